"""Miniature ViT encoder with per-block feature taps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import EncoderConfig, patch_grid
from .numeric import FreezeGroup, NonFiniteError, ParamStore, ShapeError, Tensor, ops


def num_patches(h: int, w: int, patch: int, stride: int) -> int:
    rows, cols = patch_grid(h, w, patch, stride)
    return rows * cols


def patchify(images: np.ndarray, patch: int, stride: int) -> np.ndarray:
    """Cut (B, H, W, C) images into flattened sliding-window patches.

    Windows are enumerated row-major; each patch is flattened in
    (row, col, channel) order. Returns (B, D, patch*patch*C).
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4:
        raise ShapeError("patchify", images.shape, detail="expected (B, H, W, C)")
    b, h, w, c = images.shape
    rows, cols = patch_grid(h, w, patch, stride)
    win = sliding_window_view(images, (patch, patch), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :rows, :cols]  # (B, rows, cols, C, P, P)
    out = win.transpose(0, 1, 2, 4, 5, 3).reshape(b, rows * cols, patch * patch * c)
    return out[0] if single else np.ascontiguousarray(out)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_encoder(store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    c = cfg.dim
    pdim = cfg.patch * cfg.patch * cfg.in_channels
    hidden = c * cfg.mlp_ratio
    g = FreezeGroup.ENCODER
    zeros = lambda *s: np.zeros(s, dtype=np.float32)  # noqa: E731
    ones = lambda *s: np.ones(s, dtype=np.float32)  # noqa: E731
    store.add("enc.proj.w", _uniform(rng, pdim, (pdim, c)), g)
    store.add("enc.proj.b", zeros(c), g)
    store.add("enc.cls", zeros(1, 1, c), g)
    store.add("enc.pos", zeros(1, cfg.num_patches + 1, c), g)
    store.add("enc.cam", zeros(cfg.cameras, c), g)
    for i in range(cfg.depth):
        p = f"enc.blocks.{i}."
        store.add(p + "ln1.g", ones(c), g)
        store.add(p + "ln1.b", zeros(c), g)
        store.add(p + "qkv.w", _uniform(rng, c, (c, 3 * c)), g)
        # query and value biases only: a key bias shifts every score in a softmax row
        # equally, so it would be a parameter with an identically zero gradient
        store.add(p + "qkv.b", zeros(2 * c), g)
        store.add(p + "proj.w", _uniform(rng, c, (c, c)), g)
        store.add(p + "proj.b", zeros(c), g)
        store.add(p + "ln2.g", ones(c), g)
        store.add(p + "ln2.b", zeros(c), g)
        store.add(p + "fc1.w", _uniform(rng, c, (c, hidden)), g)
        store.add(p + "fc1.b", zeros(hidden), g)
        store.add(p + "fc2.w", _uniform(rng, hidden, (hidden, c)), g)
        store.add(p + "fc2.b", zeros(c), g)


@dataclass
class EncoderState:
    patch_features: list[Tensor]   # L entries, each (B, D, c)
    cls_tokens: list[Tensor]       # L entries, each (B, c)
    q_cls: Tensor                  # (B, N, c/N), last block only
    k_img: Tensor                  # (B, N, D, c/N), last block only
    attn: np.ndarray | None = None  # (B, N, D+1, D+1) last-block attention, for inspection

    @property
    def depth(self) -> int:
        return len(self.patch_features)

    @property
    def final_cls(self) -> Tensor:
        return self.cls_tokens[-1]


def assemble_input(store: ParamStore, cfg: EncoderConfig, patches, cameras) -> Tensor:
    """Token sequence z_0 = [cls; F(x_1..x_D)] + pos + lambda * cam."""
    patches = ops.as_tensor(patches) if not isinstance(patches, Tensor) else patches
    cameras = np.atleast_1d(np.asarray(cameras, dtype=np.int64))
    if patches.ndim != 3 or patches.shape[1] != cfg.num_patches:
        raise ShapeError("assemble_input", patches.shape, detail=f"expected (B, {cfg.num_patches}, P*P*C)")
    if cameras.shape != (patches.shape[0],):
        raise ShapeError("assemble_input", patches.shape, cameras.shape, detail="one camera id per sample")
    if (cameras < 0).any() or (cameras >= cfg.cameras).any():
        raise ValueError(f"unknown camera id in {cameras.tolist()} (have {cfg.cameras} cameras)")
    b = patches.shape[0]
    tokens = ops.linear(patches, store["enc.proj.w"], store["enc.proj.b"])
    cls = ops.mul(store["enc.cls"], np.ones((b, 1, 1), dtype=tokens.dtype))
    z = ops.add(ops.concat([cls, tokens], axis=1), store["enc.pos"])
    cam = ops.reshape(ops.index(store["enc.cam"], cameras), (b, 1, cfg.dim))
    return ops.add(z, ops.mul(cam, cfg.lambda_cam))


def block(store: ParamStore, cfg: EncoderConfig, i: int, z: Tensor):
    """One pre-norm transformer block; returns (z_out, packed qkv, attention weights)."""
    p = f"enc.blocks.{i}."
    n = cfg.heads
    c = cfg.dim
    h = ops.layer_norm(z, store[p + "ln1.g"], store[p + "ln1.b"])
    qv = store[p + "qkv.b"]
    bias = ops.concat([ops.index(qv, slice(0, c)), np.zeros(c, dtype=qv.dtype), ops.index(qv, slice(c, None))])
    qkv = ops.linear(h, store[p + "qkv.w"], bias)
    out, attn = ops.self_attention(qkv, n)
    z = ops.add(z, ops.linear(out, store[p + "proj.w"], store[p + "proj.b"]))
    h = ops.layer_norm(z, store[p + "ln2.g"], store[p + "ln2.b"])
    h = ops.gelu(ops.linear(h, store[p + "fc1.w"], store[p + "fc1.b"]))
    z = ops.add(z, ops.linear(h, store[p + "fc2.w"], store[p + "fc2.b"]))
    return z, qkv, attn


def forward(store: ParamStore, cfg: EncoderConfig, z0: Tensor) -> EncoderState:
    if z0.ndim != 3 or z0.shape[1:] != (cfg.num_patches + 1, cfg.dim):
        raise ShapeError("encoder.forward", z0.shape, detail=f"expected (B, {cfg.num_patches + 1}, {cfg.dim})")
    feats, clss = [], []
    z = z0
    qkv = attn = None
    for i in range(cfg.depth):
        try:
            z, qkv, attn = block(store, cfg, i, z)
        except NonFiniteError as exc:
            raise NonFiniteError(exc.op, f"encoder block {i + 1}") from exc
        feats.append(ops.index(z, (slice(None), slice(1, None))))
        clss.append(ops.index(z, (slice(None), 0)))
    b, t, _ = z.shape
    c, n, dh = cfg.dim, cfg.heads, cfg.head_dim
    # last block's class query and patch keys, exactly as its attention used them
    q_cls = ops.reshape(ops.index(qkv, (slice(None), 0, slice(0, c))), (b, n, dh))
    k_img = ops.index(qkv, (slice(None), slice(1, None), slice(c, 2 * c)))
    k_img = ops.transpose(ops.reshape(k_img, (b, t - 1, n, dh)), (0, 2, 1, 3))
    return EncoderState(feats, clss, q_cls, k_img, attn)


def encode(store: ParamStore, cfg: EncoderConfig, images: np.ndarray, cameras) -> EncoderState:
    patches = patchify(images, cfg.patch, cfg.stride)
    return forward(store, cfg, assemble_input(store, cfg, Tensor(patches), cameras))


def diag_block_similarity_gap(state: EncoderState) -> np.ndarray:
    """Per block and sample, the lowest cosine similarity between two patch features.

    Returns (L, B). Values near 1 mean the block's patches have become alike.
    """
    out = []
    for f in state.patch_features:
        x = f.data.astype(np.float64)
        x = x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)
        sim = x @ np.swapaxes(x, -1, -2)
        d = sim.shape[-1]
        if d < 2:
            out.append(np.ones(sim.shape[0]))
            continue
        iu = np.triu_indices(d, k=1)
        out.append(np.clip(sim[:, iu[0], iu[1]].min(axis=-1), -1.0, 1.0))
    return np.stack(out)
