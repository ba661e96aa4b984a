"""Long acceptance runs, each computed once per session and shared between tests."""
import functools
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

from selfshot.config import TrainSection, load_config
from selfshot.datagen import DataConfig, VideoStore, build_manifest, make_episodes
from selfshot.embed import EmbedConfig, Embedder, train_embedder
from selfshot.pipeline import evaluate_run, prepare_artifacts, retrieval_precision, run_experiment, train_vis
from selfshot.retrieve import build_index

from conftest import toy_vis_config


@functools.cache
def overfit_run() -> dict:
    """Train the toy model on 20 fixed oracle episodes and score it on the same episodes."""
    torch.set_num_threads(1)
    dc = DataConfig(num_classes=14, num_train_classes=10, videos_per_class=4, height=32, width=32, num_frames=4,
                    max_instances=2, val_fraction=0.5)
    m = build_manifest(dc, 0)
    store = VideoStore(m)
    episodes = make_episodes(m, 1, "oracle", "train", 0)[:20]
    tc = TrainSection(epochs=300, grad_accum=1, lr=1e-3, lr_backbone=1e-3, lr_decay_epoch=240, pretrain_steps=0)
    t0 = time.perf_counter()
    model, log = train_vis(m, store, toy_vis_config(), tc, 0, episodes=episodes)
    seconds = time.perf_counter() - t0
    rep = evaluate_run(episodes, model, store, 0.5)
    return {"mAP": rep.mAP, "seconds": seconds, "steps": len(log)}


RETRIEVAL_SEEDS = (0, 1, 2)


@functools.cache
def retrieval_runs() -> list[dict]:
    """Rank-loss embedder vs frozen random init on a 10-class, 500-video pool."""
    torch.set_num_threads(1)
    runs = []
    for seed in RETRIEVAL_SEEDS:
        dc = DataConfig(num_classes=10, num_train_classes=6, videos_per_class=2, pool_size=500, height=32, width=32,
                        num_frames=8, max_instances=2)
        m = build_manifest(dc, seed)
        store = VideoStore(m)
        pool = [store.video(i) for i in m.ids("pool")]
        ec = EmbedConfig(epochs=10, crop_size=32, lr_decay_epoch=7)
        rand = Embedder(ec, seed)
        rand_p = retrieval_precision(build_index(pool, rand), rand, pool, m, 5)
        t0 = time.perf_counter()
        emb, _ = train_embedder(m, store.video, ec, seed)
        seconds = time.perf_counter() - t0
        trained_p = retrieval_precision(build_index(pool, emb), emb, pool, m, 5)
        runs.append({"seed": seed, "random": rand_p, "trained": trained_p, "train_seconds": seconds})
    return runs


CONFIG = Path(__file__).resolve().parents[1] / "configs" / "small.toml"
DOWNSTREAM_SEEDS = (0, 1, 2)
DOWNSTREAM_CELLS = ("random_k5", "selfshot_k5", "oracle_k5", "selfshot_k5+3", "semi_o1_s4", "oracle_k1",
                    "pool100_selfshot_k5", "pool300_selfshot_k5", "pool1000_selfshot_k5")


def downstream_config(seed: int):
    """The shipped small config: 48 classes (32 seen), 1000-video pool; one seed takes ~25 min on one core."""
    return load_config(CONFIG, seed)


@functools.cache
def downstream_results() -> list[dict]:
    """Full pipeline per seed: data, embedder, VIS training, then the support-setting grid."""
    torch.set_num_threads(1)
    runs = []
    for seed in DOWNSTREAM_SEEDS:
        cfg = downstream_config(seed)
        with tempfile.TemporaryDirectory() as out:
            t0 = time.perf_counter()
            art = prepare_artifacts(cfg, out, reuse=False)
            reports = run_experiment(cfg, out, art, cells=DOWNSTREAM_CELLS)
        row = {name: reports[name].mAP for name in DOWNSTREAM_CELLS}
        row["seed"], row["seconds"] = seed, time.perf_counter() - t0
        runs.append(row)
    return runs
