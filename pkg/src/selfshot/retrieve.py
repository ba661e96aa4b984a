"""Exact cosine kNN over an unlabelled pool, and support-set construction from it."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .datagen import Episode, Video

INDEX_MAGIC = b"SSHOTIDX"
INDEX_VERSION = 1


class RetrievalError(ValueError):
    pass


class ClipEncoder(Protocol):
    fingerprint: str

    def encode_video(self, video: Video) -> np.ndarray: ...


@dataclass
class EmbeddingIndex:
    ids: list[str]
    vectors: np.ndarray  # (N, d) float32, unit rows
    fingerprint: str

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32).reshape(len(self.ids), -1)
        if len(set(self.ids)) != len(self.ids):
            raise RetrievalError("index ids must be unique")
        self._pos = {v: i for i, v in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, video_id: str) -> bool:
        return video_id in self._pos

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def vector(self, video_id: str) -> np.ndarray:
        return self.vectors[self._pos[video_id]]

    def subset(self, ids: Iterable[str]) -> "EmbeddingIndex":
        ids = list(ids)
        return EmbeddingIndex(ids, self.vectors[[self._pos[i] for i in ids]], self.fingerprint)

    def append(self, ids: Sequence[str], vectors: np.ndarray, fingerprint: str) -> "EmbeddingIndex":
        if fingerprint != self.fingerprint:
            raise RetrievalError(f"encoder fingerprint {fingerprint} does not match index {self.fingerprint}")
        return EmbeddingIndex(self.ids + list(ids), np.concatenate([self.vectors, vectors]), self.fingerprint)

    def to_bytes(self) -> bytes:
        fp = self.fingerprint.encode("utf-8")
        out = [INDEX_MAGIC, struct.pack("<IIIH", INDEX_VERSION, self.dim, len(self.ids), len(fp)), fp]
        for vid, vec in zip(self.ids, self.vectors):
            b = vid.encode("utf-8")
            out.append(struct.pack("<H", len(b)))
            out.append(b)
            out.append(vec.astype("<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmbeddingIndex":
        if data[:8] != INDEX_MAGIC:
            raise RetrievalError("not an index file")
        version, dim, count, fplen = struct.unpack_from("<IIIH", data, 8)
        if version != INDEX_VERSION:
            raise RetrievalError(f"unsupported index version {version}")
        pos = 8 + 14
        fp = data[pos:pos + fplen].decode("utf-8")
        pos += fplen
        ids, vecs = [], []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            ids.append(data[pos:pos + n].decode("utf-8"))
            pos += n
            vecs.append(np.frombuffer(data, dtype="<f4", count=dim, offset=pos))
            pos += 4 * dim
        vectors = np.stack(vecs) if vecs else np.zeros((0, dim), np.float32)
        return cls(ids, vectors, fp)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class RetrievalResult:
    ids: list[str]
    scores: list[float]
    k: int
    excluded: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"k": self.k, "excluded": self.excluded,
                "results": [{"video_id": i, "score": s} for i, s in zip(self.ids, self.scores)]}


def build_index(pool: Sequence[Video], encoder: ClipEncoder) -> EmbeddingIndex:
    if not pool:
        raise RetrievalError("pool is empty")
    vecs = np.stack([np.asarray(encoder.encode_video(v), dtype=np.float32) for v in pool])
    return EmbeddingIndex([v.video_id for v in pool], vecs, encoder.fingerprint)


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x)
    if n == 0:
        raise RetrievalError("zero query embedding")
    return x / n


def knn(index: EmbeddingIndex, query_emb: np.ndarray, k: int, exclude_ids: Iterable[str] = ()) -> RetrievalResult:
    """Top-k by cosine, ties broken by ascending id; excluded ids never returned."""
    excluded = set(exclude_ids)
    exclude = sorted(excluded)
    allowed = np.array([i not in excluded for i in index.ids], dtype=bool)
    n_allowed = int(allowed.sum())
    if not 1 <= k <= n_allowed:
        raise RetrievalError(f"k={k} must lie in [1, {n_allowed}] (index {len(index)}, excluded {len(exclude)})")
    q = _unit(query_emb)
    scores = index.vectors.astype(np.float64) @ q
    cand = np.flatnonzero(allowed)
    ids = np.array(index.ids, dtype=object)[cand]
    order = np.lexsort((ids, -scores[cand]))[:k]
    return RetrievalResult([str(ids[o]) for o in order], [float(scores[cand][o]) for o in order], k, exclude)


def self_shot(query_video: Video, index: EmbeddingIndex, encoder: ClipEncoder, k: int = 5,
              split: str = "test") -> Episode:
    """Supports are the k nearest pool videos to the query; no labels involved."""
    if encoder.fingerprint != index.fingerprint:
        raise RetrievalError("encoder does not match the index fingerprint")
    q = encoder.encode_video(query_video)
    res = knn(index, q, k, exclude_ids=[query_video.video_id])
    return Episode(query_video.video_id, res.ids, k, "selfshot", split)


def _key(query_emb: np.ndarray, support_embs: Sequence[np.ndarray]) -> np.ndarray:
    return _unit(np.mean([_unit(query_emb)] + [_unit(s) for s in support_embs], axis=0))


def _support_embeddings(ids: Sequence[str], index: EmbeddingIndex, encoder: ClipEncoder,
                        get_video: Callable[[str], Video] | None) -> list[np.ndarray]:
    out = []
    for i in ids:
        if i in index:
            out.append(index.vector(i))
        elif get_video is not None:
            out.append(encoder.encode_video(get_video(i)))
        else:
            raise RetrievalError(f"support {i} is not in the index and no video source was given")
    return out


def extend_supports(episode: Episode, query_video: Video, index: EmbeddingIndex, encoder: ClipEncoder,
                    n_extra: int, get_video: Callable[[str], Video] | None = None) -> Episode:
    """Append ``n_extra`` supports retrieved with the mean (query + supports) key."""
    if not episode.support_ids:
        raise RetrievalError("episode has no supports to extend")
    if n_extra == 0:
        return episode
    q = encoder.encode_video(query_video)
    key = _key(q, _support_embeddings(episode.support_ids, index, encoder, get_video))
    exclude = set(episode.support_ids) | {episode.query_id}
    available = sum(1 for i in index.ids if i not in exclude)
    if n_extra > available:
        raise RetrievalError(f"pool exhausted: {n_extra} extra supports requested, {available} available")
    res = knn(index, key, n_extra, exclude_ids=exclude)
    return Episode(episode.query_id, list(episode.support_ids) + res.ids, episode.k + n_extra, episode.mode,
                   episode.split)


def semi_shot(oracle_episode: Episode, query_video: Video, index: EmbeddingIndex, encoder: ClipEncoder,
              k_self: int, get_video: Callable[[str], Video] | None = None) -> Episode:
    """Oracle supports plus ``k_self`` retrieved with the mean (query + oracle) key."""
    if k_self == 0:
        return oracle_episode
    q = encoder.encode_video(query_video)
    key = _key(q, _support_embeddings(oracle_episode.support_ids, index, encoder, get_video))
    exclude = set(oracle_episode.support_ids) | {oracle_episode.query_id}
    res = knn(index, key, k_self, exclude_ids=exclude)
    ids = list(oracle_episode.support_ids) + res.ids
    return Episode(oracle_episode.query_id, ids, len(ids), "semi", oracle_episode.split)
