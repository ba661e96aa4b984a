"""Synthetic moving-shapes video benchmark with pixel-exact instance ground truth.

A class is an (archetype, colour) pair.  Every video carries one or more
annotated classes whose instances make up the ground truth, and optionally a
few unannotated clutter shapes from other classes of the same class family.
Clutter is drawn first, so it never occludes an annotated instance.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

ARCHETYPES = ("circle", "square", "triangle", "star", "cross", "ring", "diamond", "ellipse")
COLORS = (
    ("red", (220, 40, 40)),
    ("green", (40, 200, 60)),
    ("blue", (50, 90, 235)),
    ("yellow", (235, 215, 40)),
    ("magenta", (215, 50, 205)),
    ("cyan", (40, 205, 215)),
    ("orange", (245, 135, 30)),
    ("white", (240, 240, 240)),
)

SPLITS = ("train", "val", "test", "pool")
EPISODE_MODES = ("oracle", "selfshot", "semi", "random", "image-support")
MANIFEST_FORMAT = "selfshot-manifest"
MANIFEST_VERSION = 1


class InvalidSpecError(ValueError):
    pass


class EpisodeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# class table


@dataclass(frozen=True)
class ShapeClass:
    id: int
    archetype: str
    color: str
    rgb: tuple[int, int, int]


def class_table(num_classes: int) -> list[ShapeClass]:
    """Enumerate classes so that consecutive ids differ in both shape and colour."""
    na, nc = len(ARCHETYPES), len(COLORS)
    if not 1 <= num_classes <= na * nc:
        raise ValueError(f"num_classes must be in [1, {na * nc}], got {num_classes}")
    table = []
    for c in range(num_classes):
        a = c % na
        k = (a + c // na) % nc
        name, rgb = COLORS[k]
        table.append(ShapeClass(c, ARCHETYPES[a], name, rgb))
    return table


# ---------------------------------------------------------------------------
# specs


@dataclass
class InstanceSpec:
    """One moving shape. Positions and velocities are in pixels (per frame)."""

    class_id: int
    x0: int
    y0: int
    scale: int
    vx: int = 0
    vy: int = 0
    angle0: float = 0.0
    spin: float = 0.0

    def center(self, t: int) -> tuple[int, int]:
        return self.x0 + self.vx * t, self.y0 + self.vy * t

    def angle(self, t: int) -> float:
        return self.angle0 + self.spin * t


@dataclass
class VideoSpec:
    video_id: str
    num_frames: int
    height: int
    width: int
    instances: list[InstanceSpec] = field(default_factory=list)
    clutter: list[InstanceSpec] = field(default_factory=list)
    split: str = "train"
    seed: int = 0
    # per clutter object: how many instances are painted beneath it (0 = bottom)
    clutter_depth: list[int] = field(default_factory=list)

    @property
    def class_ids(self) -> list[int]:
        return sorted({inst.class_id for inst in self.instances})

    def paint_order(self) -> list[tuple[str, int]]:
        """Back-to-front list of ("instance" | "clutter", index)."""
        depth = list(self.clutter_depth) + [0] * (len(self.clutter) - len(self.clutter_depth))
        order: list[tuple[str, int]] = []
        for level in range(len(self.instances) + 1):
            order += [("clutter", j) for j, d in enumerate(depth) if min(d, len(self.instances)) == level]
            if level < len(self.instances):
                order.append(("instance", level))
        return order

    def obj(self, kind: str, idx: int) -> "InstanceSpec":
        return self.instances[idx] if kind == "instance" else self.clutter[idx]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VideoSpec":
        d = dict(d)
        d["instances"] = [InstanceSpec(**i) for i in d.get("instances", [])]
        d["clutter"] = [InstanceSpec(**i) for i in d.get("clutter", [])]
        return cls(**d)


@dataclass
class Video:
    """Raster clip, frames shaped (T, H, W, 3) uint8. Carries no labels."""

    video_id: str
    frames: np.ndarray

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class GroundTruth:
    """Visible-region masks (n, T, H, W), normalised cxcywh boxes (n, T, 4), class ids."""

    masks: np.ndarray
    boxes: np.ndarray
    class_ids: list[int]

    @property
    def num_instances(self) -> int:
        return int(self.masks.shape[0])


# ---------------------------------------------------------------------------
# rasterisation


def _shape_inside(archetype: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    if archetype == "circle":
        return u * u + v * v < r * r
    if archetype == "square":
        return np.maximum(np.abs(u), np.abs(v)) < r
    if archetype == "diamond":
        return np.abs(u) + np.abs(v) < r
    if archetype == "triangle":
        # apex up (image y grows downwards)
        return (v < r) & (np.abs(u) < (v + r) / 2)
    if archetype == "cross":
        arm = r / 3
        return ((np.abs(u) < arm) & (np.abs(v) < r)) | ((np.abs(v) < arm) & (np.abs(u) < r))
    if archetype == "ring":
        rho2 = u * u + v * v
        return (rho2 < r * r) & (rho2 > (0.5 * r) ** 2)
    if archetype == "ellipse":
        return (u / r) ** 2 + (v / (0.55 * r)) ** 2 < 1.0
    if archetype == "star":
        rho = np.sqrt(u * u + v * v)
        phi = np.arctan2(v, u)
        return rho < r * (0.62 + 0.38 * np.cos(5 * phi))
    raise ValueError(f"unknown archetype {archetype!r}")


def rasterize(archetype: str, cx: float, cy: float, scale: float, angle: float,
              height: int, width: int, pad: int = 0) -> np.ndarray:
    """Boolean mask of a shape sampled at pixel centres, on a canvas padded by ``pad``."""
    ys = np.arange(-pad, height + pad, dtype=np.float64) + 0.5
    xs = np.arange(-pad, width + pad, dtype=np.float64) + 0.5
    dx = xs[None, :] - cx
    dy = ys[:, None] - cy
    if angle != 0.0:
        c, s = math.cos(angle), math.sin(angle)
        u = c * dx + s * dy
        v = -s * dx + c * dy
    else:
        u = np.broadcast_to(dx, (len(ys), len(xs)))
        v = np.broadcast_to(dy, (len(ys), len(xs)))
    return _shape_inside(archetype, u, v, scale / 2.0)


def tight_box(mask: np.ndarray) -> np.ndarray:
    """Normalised (cx, cy, w, h) of the tight pixel box of a 2-D mask; zeros if empty."""
    h, w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return np.zeros(4)
    x0, x1 = cols[0], cols[-1] + 1
    y0, y1 = rows[0], rows[-1] + 1
    return np.array([(x0 + x1) / 2 / w, (y0 + y1) / 2 / h, (x1 - x0) / w, (y1 - y0) / h])


def background(seed: int, t: int, height: int, width: int) -> np.ndarray:
    """Per-frame textured grey noise: coarse 4-px blocks plus fine jitter."""
    rng = np.random.default_rng([seed, t])
    bh, bw = -(-height // 4), -(-width // 4)
    coarse = rng.integers(45, 125, size=(bh, bw), dtype=np.int16)
    coarse = np.repeat(np.repeat(coarse, 4, axis=0), 4, axis=1)[:height, :width]
    fine = rng.integers(-12, 13, size=(height, width, 3), dtype=np.int16)
    return np.clip(coarse[:, :, None] + fine, 0, 255).astype(np.uint8)


def _amodal_masks(spec: VideoSpec, inst: InstanceSpec, table: Sequence[ShapeClass], pad: int) -> np.ndarray:
    arche = table[inst.class_id].archetype
    out = np.zeros((spec.num_frames, spec.height + 2 * pad, spec.width + 2 * pad), dtype=bool)
    for t in range(spec.num_frames):
        cx, cy = inst.center(t)
        out[t] = rasterize(arche, cx, cy, inst.scale, inst.angle(t), spec.height, spec.width, pad=pad)
    return out


def _validate(spec: VideoSpec, table: Sequence[ShapeClass]) -> None:
    if spec.num_frames < 1:
        raise InvalidSpecError(f"{spec.video_id}: num_frames must be >= 1")
    if spec.height < 1 or spec.width < 1:
        raise InvalidSpecError(f"{spec.video_id}: frame size must be positive")
    for kind, objs in (("instance", spec.instances), ("clutter", spec.clutter)):
        for i, inst in enumerate(objs):
            if not 0 <= inst.class_id < len(table):
                raise InvalidSpecError(f"{spec.video_id}: {kind} {i} has unknown class {inst.class_id}")
            if inst.scale <= 0:
                raise InvalidSpecError(f"{spec.video_id}: {kind} {i} has non-positive scale")
            pad = int(inst.scale) + 2
            m = rasterize(table[inst.class_id].archetype, inst.x0, inst.y0, inst.scale,
                          inst.angle0, spec.height, spec.width, pad=pad)
            inside = m[pad:pad + spec.height, pad:pad + spec.width].sum()
            if inside != m.sum() or inside == 0:
                raise InvalidSpecError(f"{spec.video_id}: {kind} {i} out of bounds at t=0")


def generate_video(spec: VideoSpec, seed: int, table: Sequence[ShapeClass] | None = None
                   ) -> tuple[Video, GroundTruth]:
    """Render a clip and its visible-region ground truth.

    Later objects occlude earlier ones; the back-to-front order is ``spec.paint_order()``.
    Pure function of ``(spec, seed)``.
    """
    if table is None:
        needed = max([i.class_id for i in spec.instances + spec.clutter], default=0) + 1
        table = class_table(max(needed, 1))
    _validate(spec, table)
    T, H, W = spec.num_frames, spec.height, spec.width
    frames = np.stack([background(seed, t, H, W) for t in range(T)])
    n = len(spec.instances)
    masks = np.zeros((n, T, H, W), dtype=bool)
    drawn: list[tuple[str, int, np.ndarray]] = []
    for kind, idx in spec.paint_order():
        obj = spec.obj(kind, idx)
        rgb = np.array(table[obj.class_id].rgb, dtype=np.uint8)
        m = np.zeros((T, H, W), dtype=bool)
        for t in range(T):
            cx, cy = obj.center(t)
            m[t] = rasterize(table[obj.class_id].archetype, cx, cy, obj.scale, obj.angle(t), H, W)
            frames[t][m[t]] = rgb
        drawn.append((kind, idx, m))
    # visible region: remove pixels covered by anything painted later
    covered = np.zeros((T, H, W), dtype=bool)
    for kind, idx, m in reversed(drawn):
        if kind == "instance":
            masks[idx] = m & ~covered
        covered |= m
    boxes = np.zeros((n, T, 4))
    for i in range(n):
        for t in range(T):
            boxes[i, t] = tight_box(masks[i, t])
    gt = GroundTruth(masks=masks, boxes=boxes, class_ids=[inst.class_id for inst in spec.instances])
    return Video(spec.video_id, frames), gt


def visibility_ok(spec: VideoSpec, table: Sequence[ShapeClass], min_fraction: float = 0.5,
                  min_frames: float = 0.8) -> bool:
    """Every instance is non-empty in every frame and >= ``min_fraction`` visible
    in at least ``min_frames`` of the frames (amodal area measured off-frame too)."""
    pad = max([int(i.scale) for i in spec.instances + spec.clutter], default=0) + 2
    H, W = spec.height, spec.width
    covered = np.zeros((spec.num_frames, H, W), dtype=bool)
    for kind, idx in reversed(spec.paint_order()):
        full = _amodal_masks(spec, spec.obj(kind, idx), table, pad)
        visible = full[:, pad:pad + H, pad:pad + W] & ~covered
        covered |= visible
        if kind == "clutter":
            continue
        total = full.reshape(spec.num_frames, -1).sum(axis=1)
        vis = visible.reshape(spec.num_frames, -1).sum(axis=1)
        if (vis == 0).any():
            return False
        if np.mean(vis >= min_fraction * total) < min_frames:
            return False
    return True


# ---------------------------------------------------------------------------
# dataset


@dataclass
class DataConfig:
    num_classes: int = 40
    num_train_classes: int = 30
    videos_per_class: int = 5
    pool_size: int = 0
    height: int = 64
    width: int = 64
    num_frames: int = 8
    min_instances: int = 1
    max_instances: int = 3
    classes_per_video: int = 1
    max_clutter: int = 1
    clutter_prob: float = 0.7
    min_scale: float = 0.22
    max_scale: float = 0.34
    max_speed: int = 2
    spin_prob: float = 0.25
    val_fraction: float = 0.5
    train_classes: list[int] | None = None


@dataclass
class DatasetManifest:
    root: Path | None
    class_table: list[ShapeClass]
    train_classes: list[int]
    test_classes: list[int]
    videos: list[VideoSpec]
    seed: int
    config: dict

    def __post_init__(self):
        self._by_id = {v.video_id: v for v in self.videos}
        if len(self._by_id) != len(self.videos):
            raise ValueError("duplicate video ids in manifest")

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.to_json() == other.to_json()

    def spec(self, video_id: str) -> VideoSpec:
        return self._by_id[video_id]

    def ids(self, split: str | Iterable[str]) -> list[str]:
        splits = {split} if isinstance(split, str) else set(split)
        return [v.video_id for v in self.videos if v.split in splits]

    def classes_of(self, video_id: str) -> list[int]:
        return self._by_id[video_id].class_ids

    def to_json(self) -> str:
        doc = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "root": ".",
            "seed": self.seed,
            "config": self.config,
            "class_table": [asdict(c) for c in self.class_table],
            "train_classes": self.train_classes,
            "test_classes": self.test_classes,
            "videos": [v.to_dict() for v in self.videos],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, root: Path | None = None) -> "DatasetManifest":
        doc = json.loads(text)
        if doc.get("format") != MANIFEST_FORMAT:
            raise ValueError("not a dataset manifest")
        table = [ShapeClass(c["id"], c["archetype"], c["color"], tuple(c["rgb"])) for c in doc["class_table"]]
        m = cls(root=root, class_table=table, train_classes=list(doc["train_classes"]),
                test_classes=list(doc["test_classes"]),
                videos=[VideoSpec.from_dict(v) for v in doc["videos"]],
                seed=doc["seed"], config=doc["config"])
        m.check_splits()
        return m

    def save(self, root) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        path = root / "manifest.json"
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        return cls.from_json((root / "manifest.json").read_text(encoding="utf-8"), root=root)

    def check_splits(self) -> None:
        S, U = set(self.train_classes), set(self.test_classes)
        if S & U:
            raise ValueError(f"train and test class splits overlap: {sorted(S & U)}")
        for v in self.videos:
            if v.split in ("val", "test") and not set(v.class_ids) <= U:
                raise ValueError(f"{v.video_id} in {v.split} has classes outside the unseen split")
            if v.split == "train" and not set(v.class_ids) <= S:
                raise ValueError(f"{v.video_id} in train has classes outside the seen split")


def _sample_object(rng: np.random.Generator, cfg: DataConfig, class_id: int) -> InstanceSpec:
    H, W, T = cfg.height, cfg.width, cfg.num_frames
    side = min(H, W)
    lo = max(2, int(round(cfg.min_scale * side)))
    hi = max(lo, int(round(cfg.max_scale * side)))
    for _ in range(200):
        scale = int(rng.integers(lo, hi + 1))
        r = math.ceil(scale / 2 * 1.42)
        vx, vy = (int(v) for v in rng.integers(-cfg.max_speed, cfg.max_speed + 1, size=2))
        # keep the whole trajectory inside the frame
        xmin, xmax = r - min(0, vx * (T - 1)), W - r - max(0, vx * (T - 1))
        ymin, ymax = r - min(0, vy * (T - 1)), H - r - max(0, vy * (T - 1))
        if xmin > xmax or ymin > ymax:
            continue
        x0 = int(rng.integers(xmin, xmax + 1))
        y0 = int(rng.integers(ymin, ymax + 1))
        spin = float(rng.uniform(-0.3, 0.3)) if rng.random() < cfg.spin_prob else 0.0
        return InstanceSpec(class_id=class_id, x0=x0, y0=y0, scale=scale, vx=vx, vy=vy, spin=round(spin, 4))
    raise RuntimeError("could not place an object inside the frame; frame too small for scale range")


def _sample_video(rng, cfg: DataConfig, table, video_id: str, split: str, classes: list[int],
                  family: list[int]) -> VideoSpec:
    others = [c for c in family if c not in classes]
    for attempt in range(100):
        n = int(rng.integers(max(cfg.min_instances, len(classes)), cfg.max_instances + 1))
        inst_classes = list(classes) + [classes[int(j)] for j in rng.integers(0, len(classes), n - len(classes))]
        rng.shuffle(inst_classes)
        instances = [_sample_object(rng, cfg, c) for c in inst_classes]
        clutter = []
        if others and cfg.max_clutter > 0 and rng.random() < cfg.clutter_prob:
            for _ in range(int(rng.integers(1, cfg.max_clutter + 1))):
                clutter.append(_sample_object(rng, cfg, others[int(rng.integers(len(others)))]))
        depth = [int(rng.integers(0, n + 1)) for _ in clutter]
        spec = VideoSpec(video_id=video_id, num_frames=cfg.num_frames, height=cfg.height, width=cfg.width,
                         instances=instances, clutter=clutter, split=split,
                         seed=int(rng.integers(0, 2**31 - 1)), clutter_depth=depth)
        if visibility_ok(spec, table):
            return spec
    raise RuntimeError(f"{video_id}: could not satisfy visibility constraints")


def build_manifest(cfg: DataConfig, seed: int) -> DatasetManifest:
    """Sample all video specs for a dataset (no rendering)."""
    if cfg.train_classes is not None:
        S = sorted(int(c) for c in cfg.train_classes)
        if len(set(S)) != len(S) or not all(0 <= c < cfg.num_classes for c in S):
            raise ValueError("train_classes must be distinct valid class ids")
    else:
        perm = np.random.default_rng([seed, 0]).permutation(cfg.num_classes)
        S = sorted(int(c) for c in perm[:cfg.num_train_classes])
    U = sorted(set(range(cfg.num_classes)) - set(S))
    if len(S) < 2 or len(U) < 2:
        raise ValueError("need at least 2 train classes and 2 val/test classes")
    if set(S) & set(U):
        raise ValueError("train and test class splits overlap")
    if cfg.classes_per_video > min(len(S), len(U)):
        raise ValueError("classes_per_video exceeds the smaller class split")
    table = class_table(cfg.num_classes)
    rng = np.random.default_rng([seed, 1])
    videos: list[VideoSpec] = []

    def extra_classes(primary: int, family: list[int]) -> list[int]:
        rest = [c for c in family if c != primary]
        k = int(rng.integers(1, cfg.classes_per_video + 1)) - 1
        return [primary] + sorted(int(c) for c in rng.choice(rest, size=k, replace=False)) if k else [primary]

    counter = 0
    for c in S:
        for _ in range(cfg.videos_per_class):
            vid = f"train-{counter:05d}"
            counter += 1
            videos.append(_sample_video(rng, cfg, table, vid, "train", extra_classes(c, S), S))
    n_val = int(round(cfg.val_fraction * cfg.videos_per_class))
    for c in U:
        for j in range(cfg.videos_per_class):
            split = "val" if j < n_val else "test"
            vid = f"{split}-{counter:05d}"
            counter += 1
            videos.append(_sample_video(rng, cfg, table, vid, split, extra_classes(c, U), U))
    everything = S + U
    order = np.random.default_rng([seed, 2]).permutation(np.resize(np.arange(cfg.num_classes), cfg.pool_size))
    for j, ci in enumerate(order):
        c = int(ci)
        fam = S if c in S else U
        vid = f"pool-{j:05d}"
        videos.append(_sample_video(rng, cfg, table, vid, "pool", extra_classes(c, fam), everything))
    return DatasetManifest(root=None, class_table=table, train_classes=S, test_classes=U, videos=videos,
                           seed=seed, config=asdict(cfg))


def write_video_files(root: Path, video: Video, gt: GroundTruth) -> None:
    vdir = root / "videos" / video.video_id
    mdir = root / "masks" / video.video_id
    vdir.mkdir(parents=True, exist_ok=True)
    mdir.mkdir(parents=True, exist_ok=True)
    T = video.num_frames
    for t in range(T):
        Image.fromarray(video.frames[t], mode="RGB").save(vdir / f"frame_{t:04d}.png", optimize=False)
        label = np.zeros(video.frames.shape[1:3], dtype=np.uint8)
        for i in range(gt.num_instances):
            label[gt.masks[i, t]] = i + 1
        Image.fromarray(label, mode="L").save(mdir / f"frame_{t:04d}.png", optimize=False)


def generate_dataset(cfg: DataConfig, seed: int, root) -> DatasetManifest:
    """Sample, render and write a dataset under ``root``; returns the manifest."""
    root = Path(root)
    manifest = build_manifest(cfg, seed)
    manifest.root = root
    for spec in manifest.videos:
        video, gt = generate_video(spec, spec.seed, manifest.class_table)
        write_video_files(root, video, gt)
    manifest.save(root)
    return manifest


# ---------------------------------------------------------------------------
# loading


class VideoStore:
    """Read-through cache of rendered clips; reads PNGs when present, else renders."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._videos: dict[str, Video] = {}
        self._gts: dict[str, GroundTruth] = {}

    def _frame_dir(self, kind: str, video_id: str) -> Path | None:
        if self.manifest.root is None:
            return None
        d = Path(self.manifest.root) / kind / video_id
        return d if d.is_dir() else None

    def video(self, video_id: str) -> Video:
        if video_id not in self._videos:
            spec = self.manifest.spec(video_id)
            d = self._frame_dir("videos", video_id)
            if d is not None:
                frames = np.stack([np.asarray(Image.open(d / f"frame_{t:04d}.png").convert("RGB"))
                                   for t in range(spec.num_frames)])
                self._videos[video_id] = Video(video_id, frames)
            else:
                video, gt = generate_video(spec, spec.seed, self.manifest.class_table)
                self._videos[video_id] = video
                self._gts[video_id] = gt
        return self._videos[video_id]

    def ground_truth(self, video_id: str) -> GroundTruth:
        if video_id not in self._gts:
            spec = self.manifest.spec(video_id)
            d = self._frame_dir("masks", video_id)
            if d is None:
                _, gt = generate_video(spec, spec.seed, self.manifest.class_table)
            else:
                labels = np.stack([np.asarray(Image.open(d / f"frame_{t:04d}.png"))
                                   for t in range(spec.num_frames)])
                n = len(spec.instances)
                masks = np.stack([labels == i + 1 for i in range(n)]) if n else \
                    np.zeros((0,) + labels.shape, dtype=bool)
                boxes = np.zeros((n, spec.num_frames, 4))
                for i in range(n):
                    for t in range(spec.num_frames):
                        boxes[i, t] = tight_box(masks[i, t])
                gt = GroundTruth(masks, boxes, [inst.class_id for inst in spec.instances])
            self._gts[video_id] = gt
        return self._gts[video_id]

    __call__ = video


# ---------------------------------------------------------------------------
# clips and episodes


def clip_indices(length: int, clip_len: int, mode: str = "center",
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Frame indices for a fixed-length clip: pad with the last frame, or cut."""
    if length < 1 or clip_len < 1:
        raise ValueError("lengths must be positive")
    if length <= clip_len:
        idx = np.arange(clip_len)
        return np.minimum(idx, length - 1)
    if mode == "center":
        start = (length - clip_len) // 2
    elif mode == "random":
        if rng is None:
            raise ValueError("random cut needs an rng")
        start = int(rng.integers(0, length - clip_len + 1))
    else:
        raise ValueError(f"unknown cut mode {mode!r}")
    return np.arange(start, start + clip_len)


def middle_frame(length: int) -> np.ndarray:
    return np.array([length // 2])


@dataclass
class Episode:
    query_id: str
    support_ids: list[str]
    k: int
    mode: str
    split: str

    def __post_init__(self):
        if self.mode not in EPISODE_MODES:
            raise EpisodeError(f"unknown episode mode {self.mode!r}")

    @property
    def single_frame_support(self) -> bool:
        return self.mode == "image-support"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        return cls(**d)


def make_episodes(manifest: DatasetManifest, k: int, mode: str, split: str, seed: int,
                  pool_split: str = "pool") -> list[Episode]:
    """One episode per video of ``split``.

    oracle / image-support / semi draw k label-matched supports from the same
    split; random draws k uniformly from the pool split (or the same split if
    there is no pool); selfshot leaves the supports empty for retrieval.
    """
    if mode not in EPISODE_MODES:
        raise EpisodeError(f"unknown episode mode {mode!r}")
    if k < 0:
        raise EpisodeError("k must be non-negative")
    rng = np.random.default_rng([seed, SPLITS.index(split), EPISODE_MODES.index(mode), k])
    queries = manifest.ids(split)
    pool = manifest.ids(pool_split) or queries
    episodes = []
    for q in queries:
        if mode == "selfshot":
            episodes.append(Episode(q, [], k, mode, split))
            continue
        if mode == "random":
            cands = [v for v in pool if v != q]
        else:
            qc = set(manifest.classes_of(q))
            cands = [v for v in queries if v != q and qc & set(manifest.classes_of(v))]
        if len(cands) < k:
            what = "pool" if mode == "random" else f"class {sorted(manifest.classes_of(q))}"
            raise EpisodeError(f"k={k} exceeds the {len(cands)} videos available for {what} (query {q})")
        picks = rng.choice(len(cands), size=k, replace=False) if k else []
        episodes.append(Episode(q, [cands[int(i)] for i in picks], k, mode, split))
    return episodes


def episodes_path(root, split: str, mode: str, k: int) -> Path:
    return Path(root) / f"episodes_{split}_{mode}_k{k}.json"


def save_episodes(path, episodes: Sequence[Episode]) -> None:
    Path(path).write_text(json.dumps([e.to_dict() for e in episodes], indent=1, sort_keys=True),
                          encoding="utf-8")


def load_episodes(path) -> list[Episode]:
    return [Episode.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]
