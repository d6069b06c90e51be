"""Query-masked retrieval and CMC/mAP scoring."""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import MASK_VARIANTS

FEA_MAGIC = b"DPMFEA1"
_EPS = 1e-12

# training-side placement -> the feature-side geometry used between two samples
EVAL_GEOMETRY = {"P": "F", "F": "F", "Pn": "Fn", "Fn": "Fn"}


class FeatureBankError(IOError):
    pass


@dataclass
class FeatureBank:
    features: np.ndarray   # (n, c)
    masks: np.ndarray      # (n, c)
    ids: np.ndarray        # (n,)
    cams: np.ndarray       # (n,)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.masks = np.asarray(self.masks, dtype=np.float32)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.cams = np.asarray(self.cams, dtype=np.int64)
        n = len(self.ids)
        if self.features.ndim != 2 or self.features.shape != self.masks.shape or self.features.shape[0] != n:
            raise ValueError(f"feature bank shapes disagree: features {self.features.shape}, "
                             f"masks {self.masks.shape}, {n} ids")
        if self.cams.shape != (n,):
            raise ValueError("one camera id per sample required")
        if not (np.isfinite(self.features).all() and np.isfinite(self.masks).all()):
            raise ValueError("feature bank contains non-finite values")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def save(self, path: str | Path) -> None:
        n, c = self.features.shape
        rec = np.dtype([("id", "<i8"), ("cam", "<i8"), ("f", "<f4", (c,)), ("m", "<f4", (c,))])
        arr = np.empty(n, dtype=rec)
        arr["id"], arr["cam"], arr["f"], arr["m"] = self.ids, self.cams, self.features, self.masks
        with open(path, "wb") as fh:
            fh.write(FEA_MAGIC)
            fh.write(struct.pack("<2Q", n, c))
            fh.write(arr.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "FeatureBank":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise FeatureBankError(f"cannot read {path}: {exc}") from exc
        if blob[:len(FEA_MAGIC)] != FEA_MAGIC:
            raise FeatureBankError(f"{path}: bad magic")
        head = len(FEA_MAGIC) + 16
        if len(blob) < head:
            raise FeatureBankError(f"{path}: truncated header")
        n, c = struct.unpack("<2Q", blob[len(FEA_MAGIC):head])
        rec = np.dtype([("id", "<i8"), ("cam", "<i8"), ("f", "<f4", (c,)), ("m", "<f4", (c,))])
        if len(blob) != head + n * rec.itemsize:
            raise FeatureBankError(f"{path}: truncated or oversized payload")
        arr = np.frombuffer(blob, dtype=rec, count=n, offset=head)
        return cls(arr["f"].copy(), arr["m"].copy(), arr["id"].copy(), arr["cam"].copy())


def _check_variant(variant: str) -> str:
    if variant not in MASK_VARIANTS:
        raise ValueError(f"unknown mask variant {variant!r}; expected one of {MASK_VARIANTS}")
    return EVAL_GEOMETRY[variant]


def masked_distance(fq: np.ndarray, mq: np.ndarray, fg: np.ndarray, variant: str = "Fn") -> float:
    """Cosine distance between query and gallery features inside the query's mask."""
    geom = _check_variant(variant)
    fq, mq, fg = (np.asarray(v, dtype=np.float64) for v in (fq, mq, fg))
    if geom == "Fn":
        fq = fq / max(np.linalg.norm(fq), _EPS)
        fg = fg / max(np.linalg.norm(fg), _EPS)
    a, b = fq * mq, fg * mq
    return float(1.0 - a @ b / (max(np.linalg.norm(a), _EPS) * max(np.linalg.norm(b), _EPS)))


def distance_matrix(query: FeatureBank, gallery: FeatureBank, variant: str = "Fn") -> np.ndarray:
    """All query/gallery masked distances, (n_q, n_g), each gallery row masked by the query's mask."""
    geom = _check_variant(variant)
    if query.dim != gallery.dim:
        raise ValueError(f"feature dims differ: {query.dim} vs {gallery.dim}")
    fq = query.features.astype(np.float64)
    fg = gallery.features.astype(np.float64)
    m = query.masks.astype(np.float64)
    if geom == "Fn":
        fq = fq / np.maximum(np.linalg.norm(fq, axis=1, keepdims=True), _EPS)
        fg = fg / np.maximum(np.linalg.norm(fg, axis=1, keepdims=True), _EPS)
    m2 = m * m
    num = (fq * m2) @ fg.T
    qn = np.maximum(np.sqrt(((fq * fq) * m2).sum(axis=1)), _EPS)
    gn = np.maximum(np.sqrt(m2 @ (fg * fg).T), _EPS)
    return 1.0 - num / (qn[:, None] * gn)


@dataclass
class RetrievalResult:
    ranked: list[np.ndarray]           # per query, gallery indices after exclusion, best first
    cmc: np.ndarray                    # (max_rank,)
    mAP: float
    ap: np.ndarray                     # per query; NaN for excluded queries
    excluded_queries: int
    variant: str = "Fn"
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"cmc": [float(v) for v in self.cmc], "map": float(self.mAP),
                "excluded_queries": int(self.excluded_queries), "variant": self.variant, **self.meta}


def _score_query(dist_row: np.ndarray, qid: int, qcam: int, gids: np.ndarray, gcams: np.ndarray,
                 exclude_same_camera: bool, max_rank: int):
    order = np.argsort(dist_row, kind="stable")
    if exclude_same_camera:
        order = order[~((gids[order] == qid) & (gcams[order] == qcam))]
    hits = gids[order] == qid
    if not hits.any():
        return order, None, float("nan")
    cmc = np.zeros(max_rank)
    first = int(np.argmax(hits))
    if first < max_rank:
        cmc[first:] = 1.0
    pos = np.flatnonzero(hits)
    ap = float(np.mean(np.arange(1, len(pos) + 1) / (pos + 1)))
    return order, cmc, ap


def thread_cap() -> int:
    raw = os.environ.get("DPM_THREADS", "")
    try:
        cap = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        raise ValueError(f"DPM_THREADS must be an integer, got {raw!r}") from None
    return max(1, cap)


def evaluate(query: FeatureBank, gallery: FeatureBank, variant: str = "Fn", exclude_same_camera: bool = True,
             max_rank: int = 20, workers: int | None = None) -> RetrievalResult:
    """Rank the gallery for every query and score CMC@1..max_rank and mAP.

    Queries without any valid gallery match are left out of both averages
    and counted in ``excluded_queries``.
    """
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    dist = distance_matrix(query, gallery, variant)
    n = len(query)
    workers = min(thread_cap() if workers is None else max(1, workers), max(n, 1))

    def run(rows: range):
        return [_score_query(dist[i], int(query.ids[i]), int(query.cams[i]), gallery.ids, gallery.cams,
                             exclude_same_camera, max_rank) for i in rows]

    if workers > 1:
        chunks = [range(s, min(n, s + -(-n // workers))) for s in range(0, n, -(-n // workers))]
        with ThreadPoolExecutor(workers) as pool:
            scored = [r for part in pool.map(run, chunks) for r in part]
    else:
        scored = run(range(n))
    ranked = [s[0] for s in scored]
    valid = [s for s in scored if s[1] is not None]
    ap = np.array([s[2] for s in scored], dtype=np.float64)
    cmc = np.mean([s[1] for s in valid], axis=0) if valid else np.zeros(max_rank)
    mAP = float(np.mean([s[2] for s in valid])) if valid else 0.0
    return RetrievalResult(ranked, cmc, mAP, ap, n - len(valid), variant)
