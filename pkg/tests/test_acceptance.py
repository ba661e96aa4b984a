"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The long-running criteria (overfit, retrieval efficacy, the directional
downstream studies) are sized to finish on a single CPU core; see README.
"""
import dataclasses
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from selfshot import cli
from selfshot.datagen import (DataConfig, DatasetManifest, InstanceSpec, VideoSpec, VideoStore, build_manifest,
                              generate_dataset)
from selfshot.embed import EmbedConfig, Embedder, nce_loss, rank_loss, rank_R
from selfshot.evaluation import video_iou
from selfshot.matchloss import (LossWeights, box_loss, dice_loss, focal_loss, giou, hungarian, loss_components,
                                training_loss)
from selfshot.pipeline import infer
from selfshot.retrieve import build_index
from selfshot.vistr import SelfShotVisTR, positional_encoding

from conftest import record, toy_vis_config
from downstream import downstream_results, overfit_run, retrieval_runs

# ---------------------------------------------------------------------------
# 1. matching oracle


def test_c01_hungarian_matches_brute_force():
    rng = np.random.default_rng(2024)
    mats = [rng.normal(size=(n, n)) * rng.choice([1, 10, 100]) for n in rng.integers(1, 8, size=200)]
    # a few integer matrices so exact ties are exercised
    mats[:20] = [rng.integers(0, 4, size=(n, n)).astype(float) for n in rng.integers(2, 8, size=20)]
    t0 = time.perf_counter()
    costs = [hungarian(C)[1] for C in mats]
    elapsed = time.perf_counter() - t0
    mismatches = 0
    for C, got in zip(mats, costs):
        n = C.shape[0]
        best = min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
        # both sums add the same entries, possibly in another order
        mismatches += not math.isclose(got, best, rel_tol=0, abs_tol=1e-9 * max(1.0, abs(best)))
    ok = mismatches == 0 and elapsed < 10
    record(1, ok, f"hungarian vs brute force: {200 - mismatches}/200 equal, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. gradient suite


def fd_rel_err(f, x: torch.Tensor, h: float = 1e-6) -> float:
    """Relative error between autograd and central differences of scalar f at x."""
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    fd = torch.zeros_like(x)
    flat, out = x.detach().clone().view(-1), fd.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            v = flat[i].item()
            flat[i] = v + h
            hi = f(flat.view_as(x)).item()
            flat[i] = v - h
            lo = f(flat.view_as(x)).item()
            flat[i] = v
            out[i] = (hi - lo) / (2 * h)
    scale = max(g.norm().item(), fd.norm().item(), 1e-8)
    return (g - fd).norm().item() / scale


def _rand(g, *shape):
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def _nce_case(g):
    P, N, d = 3, 5, 6
    x0 = _rand(g, 1 + P + N, d)
    tau = float(torch.empty(1).uniform_(0.05, 1.0, generator=g))

    def f(x):
        x = F.normalize(x, dim=-1)
        return nce_loss(x[0], x[1:1 + P], x[1 + P:], tau)
    return f, x0


def _rank_case(g):
    P, N, d = 3, 4, 6
    x0 = _rand(g, 1 + P + N, d)
    temp = float(torch.empty(1).uniform_(0.1, 2.0, generator=g))
    return (lambda x: rank_loss(x[0], x[1:1 + P], x[1 + P:], temp)), x0


def _random_boxes(g, *lead):
    cxcy = torch.rand(*lead, 2, generator=g, dtype=torch.float64) * 0.6 + 0.2
    wh = torch.rand(*lead, 2, generator=g, dtype=torch.float64) * 0.3 + 0.05
    return torch.cat([cxcy, wh], -1)


def _giou_box_case(g):
    T = 3
    b = _random_boxes(g, T)
    x0 = _random_boxes(g, T)

    def f(x):
        return box_loss(b, x) + giou(x[0], b[1])
    return f, x0


def _dice_case(g):
    m = torch.rand(2, 5, 5, generator=g) > 0.5
    return (lambda x: dice_loss(x, m).sum()), _rand(g, 2, 5, 5)


def _focal_case(g):
    m = torch.rand(2, 5, 5, generator=g) > 0.5
    return (lambda x: focal_loss(x, m).sum()), _rand(g, 2, 5, 5)


def _training_case(g):
    n, n_gt, T, h, w = 3, 2, 2, 4, 4
    gt_boxes = _random_boxes(g, n_gt, T)
    gt_masks = torch.rand(n_gt, T, h, w, generator=g) > 0.5
    sigma = torch.randperm(n, generator=g).numpy()
    sizes = [n, n * T * 4, n * T * h * w]

    def f(x):
        a, b, c = torch.split(x, sizes)
        fg = torch.sigmoid(a)
        boxes = torch.sigmoid(b).view(n, T, 4) * 0.5 + 0.1
        return training_loss(gt_boxes, gt_masks, fg, boxes, c.view(n, T, h, w), sigma)
    return f, _rand(g, sum(sizes))


_PROBE_MODEL = {}


def _probe_model():
    if "m" not in _PROBE_MODEL:
        torch.manual_seed(7)
        cfg = toy_vis_config(d=24, heads=2, enc_layers=1, fuse_layers=2, dec_layers=2, n_slots=2, num_frames=2,
                             height=8, width=8, backbone_strides=[2, 2], backbone_channels=[8, 24], ffn_dim=16)
        _PROBE_MODEL["m"] = SelfShotVisTR(cfg).double().eval()
    return _PROBE_MODEL["m"]


def _probe_case(g):
    m = _probe_model()
    cfg = m.cfg
    h, w = cfg.token_hw
    n_q = cfg.num_frames * h * w
    n_s = 5
    pos = positional_encoding(cfg.num_frames, h, w, cfg.d, dtype=torch.float64)
    weight = _rand(g, cfg.n_slots * cfg.num_frames, cfg.d)

    def f(x):
        e_q, e_s = x[:n_q], x[n_q:]
        inst = m.decode(m.fuse(e_q, e_s), mem_pos=pos)
        return (weight * inst).sum()
    return f, _rand(g, n_q + n_s, cfg.d)


GRAD_CASES = {
    "nce_loss": (_nce_case, 1e-4),
    "rank_loss": (_rank_case, 1e-4),
    "giou/box_loss": (_giou_box_case, 1e-4),
    "dice_loss": (_dice_case, 1e-4),
    "focal_loss": (_focal_case, 1e-4),
    "training_loss": (_training_case, 1e-4),
    "fuse+decode probe": (_probe_case, 1e-3),
}


def test_c02_gradient_suite():
    worst = {}
    for name, (make, tol) in GRAD_CASES.items():
        g = torch.Generator().manual_seed(len(name))
        errs = []
        for _ in range(20):
            f, x0 = make(g)
            errs.append(fd_rel_err(f, x0))
        worst[name] = (max(errs), tol)
    ok = all(e <= tol for e, tol in worst.values())
    detail = ", ".join(f"{k} {e:.1e}" for k, (e, _) in worst.items())
    record(2, ok, f"max rel. err over 20 instances each: {detail}")
    assert ok, worst


# ---------------------------------------------------------------------------
# 3. zero-loss fixed point


def test_c03_zero_loss_fixed_point():
    g = torch.Generator().manual_seed(3)
    n, n_gt, T, h, w = 4, 2, 3, 6, 6
    gt_boxes = _random_boxes(g, n_gt, T)
    gt_masks = torch.rand(n_gt, T, h, w, generator=g) > 0.5
    sigma = np.array([2, 0, 1, 3])
    fg = torch.zeros(n, dtype=torch.float64)
    fg[sigma[:n_gt]] = 1.0
    boxes = _random_boxes(g, n, T)
    boxes[sigma[:n_gt]] = gt_boxes
    logits = torch.full((n, T, h, w), -60.0, dtype=torch.float64)
    logits[sigma[:n_gt]] = torch.where(gt_masks, 60.0, -60.0).double()
    total, comp = training_loss(gt_boxes, gt_masks, fg, boxes, logits, sigma, return_components=True)
    vals = {k: float(v) for k, v in comp.items()} | {"total": float(total)}
    ok = all(v <= 1e-6 for v in vals.values())
    record(3, ok, "perfect predictions: " + ", ".join(f"{k} {v:.1e}" for k, v in vals.items()))
    assert ok


# ---------------------------------------------------------------------------
# 4. unit values


def _rowmask(T, cols, size=4):
    m = np.zeros((T, size, size), bool)
    m[:, 0, list(cols)] = True
    return m


def test_c04_unit_values():
    errs = {}
    for T in (1, 2, 5, 9):
        errs[f"video_iou T={T}"] = abs(video_iou(_rowmask(T, [0, 1]), _rowmask(T, [1, 2])) - 1 / 3)

    def corner(x0, y0, x1, y1):
        return torch.tensor([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dtype=torch.float64)
    errs["giou disjoint"] = abs(float(giou(corner(0, 0, 1, 1), corner(2, 2, 3, 3))) + 7 / 9)
    errs["giou overlap"] = abs(float(giou(corner(0, 0, 2, 2), corner(1, 1, 3, 3))) - (1 / 7 - 2 / 9))
    a = torch.tensor([1.0, 0.0], dtype=torch.float64)
    b = torch.tensor([0.0, 1.0], dtype=torch.float64)
    errs["rank_R C={b}"] = abs(float(rank_R(a, b, b[None])) - 1)
    c_tie = torch.tensor([0.0, -1.0], dtype=torch.float64)  # cos(a, c) = 0 = cos(a, b)
    errs["rank_R tie"] = abs(float(rank_R(a, b, torch.stack([b, c_tie]))) - 1.5)
    errs["rank_R d=1"] = abs(float(rank_R(a, b, torch.stack([b, a]))) - (1 + 1 / (1 + math.exp(-0.5))))
    ok = all(e <= 1e-9 for e in errs.values())
    record(4, ok, f"{len(errs)} arithmetic examples, max abs err {max(errs.values()):.1e}")
    assert ok, errs


# ---------------------------------------------------------------------------
# 5. overfit


def test_c05_overfit_twenty_episodes():
    res = overfit_run()
    ok = res["mAP"] >= 0.9 and res["seconds"] <= 2 * 3600
    record(5, ok, f"20 oracle episodes: mAP@0.5 {res['mAP']:.3f} after {res['steps']} steps "
                  f"({res['seconds'] / 60:.1f} min, 1 core)")
    assert ok


# ---------------------------------------------------------------------------
# 6. retrieval efficacy


def test_c06_retrieval_efficacy():
    runs = retrieval_runs()
    trained = float(np.mean([r["trained"] for r in runs]))
    rand = float(np.mean([r["random"] for r in runs]))
    minutes = max(r["train_seconds"] for r in runs) / 60
    ok = trained >= 0.3 and trained > rand and minutes <= 30
    record(6, ok, f"top-5 same-class precision over 3 seeds: trained {trained:.3f} vs random-init {rand:.3f} "
                  f"(prior 0.1; longest training {minutes:.1f} min)")
    assert ok


# ---------------------------------------------------------------------------
# 7-9. directional downstream studies


def test_c07_random_selfshot_oracle_ordering():
    res = downstream_results()
    ordered = [r["random_k5"] <= r["selfshot_k5"] <= r["oracle_k5"] for r in res]
    ext = float(np.mean([r["selfshot_k5+3"] for r in res]))
    base = float(np.mean([r["selfshot_k5"] for r in res]))
    ok = sum(ordered) >= 2 and ext >= base
    cells = "; ".join(f"seed {i}: rand {r['random_k5']:.3f} self {r['selfshot_k5']:.3f} "
                      f"oracle {r['oracle_k5']:.3f}" for i, r in enumerate(res))
    record(7, ok, f"ordering holds in {sum(ordered)}/3 seeds ({cells}); 5+(3) {ext:.3f} vs 5 {base:.3f}")
    assert ok


def test_c08_semi_shot():
    res = downstream_results()
    semi = float(np.mean([r["semi_o1_s4"] for r in res]))
    one = float(np.mean([r["oracle_k1"] for r in res]))
    ok = semi >= one
    record(8, ok, f"1 oracle + 4 self-shot {semi:.3f} vs 1 oracle {one:.3f} (3-seed mean)")
    assert ok


def test_c09_pool_scaling():
    res = downstream_results()
    curve = [float(np.mean([r[f"pool{n}_selfshot_k5"] for r in res])) for n in (100, 300, 1000)]
    ok = curve[0] <= curve[1] <= curve[2]
    record(9, ok, "self-shot mAP at pool 100/300/1000: " + " / ".join(f"{v:.3f}" for v in curve))
    assert ok


# ---------------------------------------------------------------------------
# 10. invariance suite


class PoisonedManifest(DatasetManifest):
    """Manifest whose labels are scrambled and whose label accessors explode."""

    def classes_of(self, video_id):
        raise AssertionError(f"label of {video_id} was read")


def _poison(m: DatasetManifest, seed: int) -> DatasetManifest:
    rng = np.random.default_rng(seed)
    n = len(m.class_table)
    perm = rng.permutation(n)
    videos = []
    for v in m.videos:
        inst = [dataclasses.replace(i, class_id=int(perm[i.class_id])) for i in v.instances]
        clut = [dataclasses.replace(c, class_id=int(rng.integers(n))) for c in v.clutter]
        videos.append(dataclasses.replace(v, instances=inst, clutter=clut))
    return PoisonedManifest(root=m.root, class_table=m.class_table, train_classes=m.test_classes,
                            test_classes=m.train_classes, videos=videos, seed=m.seed, config=m.config)


class NoLabelStore(VideoStore):
    def ground_truth(self, video_id):
        raise AssertionError(f"ground truth of {video_id} was read")


def _label_isolation(tmp: Path) -> bool:
    cfg = DataConfig(num_classes=6, num_train_classes=3, videos_per_class=3, pool_size=30, height=32, width=32,
                     num_frames=4, max_instances=2)
    m = generate_dataset(cfg, 11, tmp / "data")
    torch.manual_seed(0)
    model = SelfShotVisTR(toy_vis_config()).eval()
    emb = Embedder(EmbedConfig(crop_size=32, crop_frames=4, embed_dim=32, width=16), seed=0)
    clean = VideoStore(m)
    index = build_index([clean.video(i) for i in m.ids("pool")], emb)
    dirty_m = _poison(DatasetManifest.load(tmp / "data"), 5)
    dirty = NoLabelStore(dirty_m)
    same = True
    for q in m.ids("test"):
        p1, prov1 = infer(clean.video(q), "selfshot", 5, model, clean.video, manifest=m, index=index, encoder=emb)
        p2, prov2 = infer(dirty.video(q), "selfshot", 5, model, dirty.video, manifest=dirty_m, index=index,
                          encoder=emb)
        same &= prov1 == prov2
        same &= all(torch.equal(getattr(p1, f), getattr(p2, f)) for f in ("fg_prob", "boxes", "mask_logits"))
    return same


def test_c10_invariance_suite(tmp_path):
    results = {}
    torch.manual_seed(0)
    model = SelfShotVisTR(toy_vis_config()).double().eval()
    e_q = torch.randn(64, model.cfg.d, dtype=torch.float64)
    e_s = torch.randn(150, model.cfg.d, dtype=torch.float64)
    with torch.no_grad():
        f1 = model.fuse(e_q, e_s)
        f2 = model.fuse(e_q, e_s[torch.randperm(150)])
    results["fuser permutation"] = float((f1 - f2).abs().max()) <= 1e-6

    g = torch.Generator().manual_seed(10)
    n, n_gt, T, h, w = 5, 3, 3, 6, 6
    gt_boxes, gt_masks = _random_boxes(g, n_gt, T), torch.rand(n_gt, T, h, w, generator=g) > 0.5
    fg = torch.rand(n, generator=g, dtype=torch.float64)
    boxes, logits = _random_boxes(g, n, T), _rand(g, n, T, h, w)
    sigma = np.array([1, 4, 0, 2, 3])
    base = float(training_loss(gt_boxes, gt_masks, fg, boxes, logits, sigma))
    perm = np.array([3, 0, 4, 1, 2])  # slot permutation applied to predictions and assignment alike
    inv = np.argsort(perm)
    permuted = float(training_loss(gt_boxes, gt_masks, fg[perm], boxes[perm], logits[perm], inv[sigma]))
    results["loss set permutation"] = abs(base - permuted) <= 1e-6

    pe = positional_encoding(8, 8, 8, 48, dtype=torch.float64)
    d = torch.cdist(pe, pe)
    d.fill_diagonal_(float("inf"))
    results["PE injective 8x8x8"] = float(d.min()) > 0

    a, b = _rand(g, 6), _rand(g, 6)
    C = _rand(g, 7, 6)
    r = rank_R(a, b, C, b_index=None)
    results["rank_R scale invariance"] = all(
        torch.equal(rank_R(a * s, b * t, C * u), r) for s, t, u in [(2.0, 4.0, 8.0), (0.5, 1.0, 0.25)])

    results["label isolation (poisoned labels)"] = _label_isolation(tmp_path)
    ok = all(results.values())
    record(10, ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in results.items()))
    assert ok, results


# ---------------------------------------------------------------------------
# 11. determinism


def _cli(*args) -> int:
    return cli.main([str(a) for a in args])


def _digest_tree(root: Path) -> dict[str, bytes]:
    """File contents under root, minus the provenance records (compared separately)."""
    out = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root)
        if p.is_file() and rel.parts[0] not in ("run.json", "runs"):
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


def _run_json(path: Path) -> dict:
    doc = json.loads(path.read_text())
    for key in ("started_at", "finished_at"):
        doc.pop(key, None)
    return doc


DET_CONFIG = """
[data]
num_classes = 6
num_train_classes = 3
videos_per_class = 4
pool_size = 24
height = 32
width = 32
num_frames = 4
max_instances = 2
val_fraction = 0.0

[embed]
crop_size = 32
crop_frames = 4
embed_dim = 32
width = 16
epochs = 1
steps_per_epoch = 3
videos_per_batch = 4

[vis]
d = 48
enc_layers = 1
fuse_layers = 1
dec_layers = 1
heads = 4
n_slots = 3
num_frames = 4
support_frames = 4
height = 32
width = 32
backbone_strides = [2, 2, 1]
backbone_channels = [8, 16, 48]
ffn_dim = 48
mask_channels = 8

[train]
epochs = 1
steps_per_epoch = 4
grad_accum = 2
pretrain_steps = 5

[eval]
ks = [1]
"""


def test_c11_determinism(tmp_path):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(DET_CONFIG)
    shared = tmp_path / "shared"
    assert _cli("gen-data", "--config", cfg, "--seed", 3, "--out", shared) == 0
    assert _cli("train-embed", "--config", cfg, "--seed", 3, "--out", shared) == 0
    assert _cli("train-vis", "--config", cfg, "--seed", 3, "--out", shared) == 0
    assert _cli("build-index", "--config", cfg, "--seed", 3, "--out", shared) == 0
    art = ["--data", shared / "data", "--embedder", shared / "embedder.ckpt", "--model", shared / "vis.ckpt"]
    query = DatasetManifest.load(shared / "data").ids("test")[0]
    commands = {
        "gen-data": ["gen-data"],
        "build-index": ["build-index", "--data", shared / "data", "--embedder", shared / "embedder.ckpt"],
        "eval": ["eval", *art, "--index", shared / "pool.index", "--mode", "oracle", "--k", 1],
        "infer": ["infer", *art, "--index", shared / "pool.index", "--query", query, "--mode", "selfshot",
                  "--k", 2],
    }
    same = {}
    for name, argv in commands.items():
        trees, runs = [], []
        for rep in ("a", "b"):
            out = tmp_path / f"{name}-{rep}"
            code = _cli(*argv, "--config", cfg, "--seed", 3, "--out", out)
            assert code == 0, name
            trees.append(_digest_tree(out))
            runs.append(_run_json(out / "run.json"))
        runs = [json.loads(json.dumps(r).replace(str(tmp_path / f"{name}-a"), "OUT")
                           .replace(str(tmp_path / f"{name}-b"), "OUT")) for r in runs]
        same[name] = trees[0] == trees[1] and runs[0] == runs[1] and len(trees[0]) > 0
    ok = all(same.values())
    record(11, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok, same
