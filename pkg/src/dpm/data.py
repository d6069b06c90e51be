"""Synthetic occluded-identity images.

Each identity is a smooth colour field; each camera adds a colour tint; a
sample may have a rectangle overwritten by one of a few obstacle textures
that every identity shares.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .config import SynthSpec

IMG_MAGIC = b"DPMIMG1"
SPLITS = ("train", "query", "gallery")
_SPLIT_CODE = {"train": 0, "query": 1, "gallery": 2}


class DatasetFormatError(IOError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    identity: int
    camera: int
    rect: tuple[int, int, int, int] | None  # (top, left, height, width); diagnostics only


@dataclass
class Split:
    name: str
    images: np.ndarray   # (n, H, W, C) float32
    ids: np.ndarray      # (n,) int64
    cams: np.ndarray     # (n,) int64
    rects: np.ndarray    # (n, 4) int64, -1 rows when holistic

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def occluded(self) -> np.ndarray:
        return self.rects[:, 0] >= 0

    def sample(self, i: int) -> Sample:
        r = self.rects[i]
        return Sample(self.images[i], int(self.ids[i]), int(self.cams[i]),
                      tuple(int(v) for v in r) if r[0] >= 0 else None)

    def __iter__(self) -> Iterator[Sample]:
        return (self.sample(i) for i in range(len(self)))


@dataclass
class Dataset:
    train: Split
    query: Split
    gallery: Split

    def split(self, name: str) -> Split:
        return {"train": self.train, "query": self.query, "gallery": self.gallery}[name]

    @property
    def num_identities(self) -> int:
        return int(max(s.ids.max() for s in (self.train, self.query, self.gallery) if len(s)) + 1)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for s in (self.train, self.query, self.gallery):
            for arr in (s.images, s.ids, s.cams, s.rects):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def upsample_bilinear(field: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of a (h0, w0, C) array to (h, w, C), corners aligned."""
    h0, w0 = field.shape[:2]
    ys = np.linspace(0, h0 - 1, h)
    xs = np.linspace(0, w0 - 1, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h0 - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w0 - 2, 0))
    y1 = np.minimum(y0 + 1, h0 - 1)
    x1 = np.minimum(x0 + 1, w0 - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = field[y0][:, x0] * (1 - wx) + field[y0][:, x1] * wx
    bot = field[y1][:, x0] * (1 - wx) + field[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


@dataclass
class _Tables:
    bases: np.ndarray       # (C_ids, H, W, c_in)
    tints: np.ndarray       # (cameras, c_in)
    obstacles: np.ndarray   # (num_obstacles, H, W, c_in)


def _tables(spec: SynthSpec) -> _Tables:
    h, w, c = spec.image_h, spec.image_w, spec.in_channels
    lo_h, lo_w = max(2, h // 4), max(2, w // 4)
    bases = np.stack([
        upsample_bilinear(np.random.default_rng([spec.data_seed, 10, i]).standard_normal((lo_h, lo_w, c)), h, w)
        for i in range(spec.num_identities)
    ])
    tints = np.stack([np.random.default_rng([spec.data_seed, 20, k]).normal(0.0, 0.3, c)
                      for k in range(spec.cameras)])
    obstacles = []
    for k in range(spec.num_obstacles):
        rng = np.random.default_rng([spec.data_seed, 30, k])
        smooth = upsample_bilinear(rng.standard_normal((max(2, h // 8), max(2, w // 8), c)), h, w)
        stripes = np.sin(np.arange(h)[:, None, None] * rng.uniform(0.5, 2.0)
                         + np.arange(w)[None, :, None] * rng.uniform(0.5, 2.0) + rng.uniform(0, np.pi, c))
        obstacles.append(smooth + 0.5 * stripes)
    return _Tables(bases, tints, np.stack(obstacles))


def sample_rect(rng: np.random.Generator, h: int, w: int, a_min: float, a_max: float) -> tuple[int, int, int, int]:
    """Random rectangle whose area fraction lies in [a_min, a_max]."""
    total = h * w
    feasible = [(rh, rw) for rh in range(1, h + 1) for rw in range(1, w + 1)
                if a_min <= rh * rw / total <= a_max]
    if not feasible:
        raise ValueError(f"no rectangle in a {h}x{w} image covers a fraction in [{a_min}, {a_max}]")
    rh, rw = feasible[rng.integers(len(feasible))]
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    return top, left, rh, rw


def render(spec: SynthSpec, tables: _Tables, split: str, identity: int, index: int,
           p_occ: float, occlude: bool = True) -> tuple[np.ndarray, int, tuple | None]:
    """Render one sample; with ``occlude=False`` returns its holistic twin."""
    rng = np.random.default_rng([spec.data_seed, _SPLIT_CODE[split], identity, index])
    cam = int(rng.integers(spec.cameras))
    img = tables.bases[identity] + tables.tints[cam]
    img = img + rng.normal(0.0, 1.0, img.shape) * spec.noise_sigma
    draw = rng.random()
    rect_rng = np.random.default_rng([spec.data_seed, _SPLIT_CODE[split], identity, index, 1])
    rect = None
    if draw < p_occ:
        rect = sample_rect(rect_rng, spec.image_h, spec.image_w, spec.occ_area_min, spec.occ_area_max)
        if occlude:
            top, left, rh, rw = rect
            tex = tables.obstacles[int(rect_rng.integers(spec.num_obstacles))]
            img = img.copy()
            img[top:top + rh, left:left + rw] = tex[top:top + rh, left:left + rw]
    return img.astype(np.float32), cam, rect


def generate(spec: SynthSpec) -> Dataset:
    spec.validate()
    tables = _tables(spec)
    counts = {"train": spec.train_per_identity, "query": spec.query_per_identity,
              "gallery": spec.gallery_per_identity}
    p = {"train": spec.p_occ, "query": 1.0, "gallery": spec.gallery_p_occ}
    splits = {}
    for name in SPLITS:
        imgs, ids, cams, rects = [], [], [], []
        for ident in range(spec.num_identities):
            for j in range(counts[name]):
                img, cam, rect = render(spec, tables, name, ident, j, p[name])
                imgs.append(img)
                ids.append(ident)
                cams.append(cam)
                rects.append(rect if rect is not None else (-1, -1, -1, -1))
        splits[name] = Split(name, np.stack(imgs), np.array(ids, np.int64), np.array(cams, np.int64),
                             np.array(rects, np.int64).reshape(-1, 4))
    return Dataset(**splits)


def holistic_twin(spec: SynthSpec, split: str, identity: int, index: int) -> np.ndarray:
    p = {"train": spec.p_occ, "query": 1.0, "gallery": spec.gallery_p_occ}[split]
    img, _, _ = render(spec, _tables(spec), split, identity, index, p, occlude=False)
    return img


# ---------------------------------------------------------------- storage

def write_image(path: Path, img: np.ndarray) -> None:
    h, w, c = img.shape
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC)
        fh.write(struct.pack("<3Q", h, w, c))
        fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_image(path: Path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read {path}: {exc}") from exc
    if blob[:7] != IMG_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic")
    if len(blob) < 31:
        raise DatasetFormatError(f"{path}: truncated header")
    h, w, c = struct.unpack("<3Q", blob[7:31])
    n = h * w * c
    if len(blob) != 31 + 4 * n:
        raise DatasetFormatError(f"{path}: truncated or oversized payload")
    return np.frombuffer(blob[31:], dtype="<f4").reshape(h, w, c).astype(np.float32)


def store(dataset: Dataset, root: str | Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for name in SPLITS:
        s = dataset.split(name)
        for i in range(len(s)):
            rel = f"images/{name}_{i:05d}.bin"
            write_image(root / rel, s.images[i])
            rect = s.rects[i]
            lines.append(json.dumps({
                "id": int(s.ids[i]), "camera": int(s.cams[i]), "split": name,
                "occluded": bool(rect[0] >= 0),
                "rect": [int(v) for v in rect] if rect[0] >= 0 else None,
                "path": rel,
            }, sort_keys=True))
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")


def load(root: str | Path) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.jsonl"
    try:
        text = manifest.read_text()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read {manifest}: {exc}") from exc
    rows: dict[str, list] = {name: [] for name in SPLITS}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            rows[rec["split"]].append(rec)
        except (json.JSONDecodeError, KeyError) as exc:
            raise DatasetFormatError(f"{manifest}:{lineno}: bad record ({exc})") from exc
    splits = {}
    for name, recs in rows.items():
        if not recs:
            raise DatasetFormatError(f"{manifest}: split {name!r} is empty")
        imgs = np.stack([read_image(root / r["path"]) for r in recs])
        rects = np.array([r["rect"] if r.get("rect") else (-1, -1, -1, -1) for r in recs], np.int64)
        splits[name] = Split(name, imgs, np.array([r["id"] for r in recs], np.int64),
                             np.array([r["camera"] for r in recs], np.int64), rects)
    return Dataset(**splits)
