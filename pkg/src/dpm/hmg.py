"""Hierarchical mask generator: multi-block patch features -> channel mask."""

from __future__ import annotations

import numpy as np

from .config import EncoderConfig, MaskGeneratorConfig
from .encoder import EncoderState
from .numeric import FreezeGroup, NonFiniteError, ParamStore, ShapeError, Tensor, ops


def hidden_width(enc: EncoderConfig, cfg: MaskGeneratorConfig) -> int:
    return cfg.hmg_hidden or enc.dim


def init_hmg(store: ParamStore, enc: EncoderConfig, cfg: MaskGeneratorConfig, rng: np.random.Generator) -> None:
    k = len(cfg.hmg_gate)
    cin = k * enc.dim
    hid = hidden_width(enc, cfg)
    ksz = cfg.hmg_kernel
    g = FreezeGroup.HMG
    fan1 = ksz * ksz * cin
    store.add("hmg.conv1.w", rng.uniform(-1, 1, (ksz, ksz, cin, hid)).astype(np.float32) / np.sqrt(fan1), g)
    store.add("hmg.conv1.b", np.zeros(hid, dtype=np.float32), g)
    store.add("hmg.conv2.w", rng.uniform(-1, 1, (1, 1, hid, enc.dim)).astype(np.float32) / np.sqrt(hid), g)
    # zero bias: the mask starts close to 0.5 on every channel
    store.add("hmg.conv2.b", np.zeros(enc.dim, dtype=np.float32), g)


def gather_features(state: EncoderState, gate: list[int], grid: tuple[int, int]) -> Tensor:
    """Reshape each gated block's patch rows to (B, h, w, c) and stack on channels.

    ``gate`` holds 1-based block indices; blocks are taken in ascending order.
    """
    blocks = sorted(gate)
    if not blocks:
        raise ShapeError("gather_features", detail="gate selects no block")
    h, w = grid
    maps = []
    for blk in blocks:
        if not 1 <= blk <= state.depth:
            raise ShapeError("gather_features", detail=f"block {blk} outside 1..{state.depth}")
        f = state.patch_features[blk - 1]
        b, d, c = f.shape
        if d != h * w:
            raise ShapeError("gather_features", f.shape, (h, w), detail="D != h*w")
        maps.append(ops.reshape(f, (b, h, w, c)))
    return maps[0] if len(maps) == 1 else ops.concat(maps, axis=-1)


def mask_logits(store: ParamStore, cfg: MaskGeneratorConfig, stacked: Tensor) -> Tensor:
    """Conv stack then spatial average pool; returns pre-sigmoid (B, c) logits."""
    pad = cfg.hmg_kernel // 2
    x = ops.conv2d(stacked, store["hmg.conv1.w"], store["hmg.conv1.b"], padding=pad)
    x = ops.gelu(x)
    x = ops.conv2d(x, store["hmg.conv2.w"], store["hmg.conv2.b"])
    b, h, w, c = x.shape
    return ops.reshape(ops.avg_pool2d(x, (h, w)), (b, c))


def generate_mask(store: ParamStore, cfg: MaskGeneratorConfig, stacked: Tensor) -> Tensor:
    """Prototype mask in (0, 1)^c for each sample, shape (B, c)."""
    try:
        logits = mask_logits(store, cfg, stacked)
    except NonFiniteError as exc:
        raise NonFiniteError(exc.op, "mask generator") from exc
    return ops.sigmoid(logits)


def mask_from_state(store: ParamStore, enc: EncoderConfig, cfg: MaskGeneratorConfig,
                    state: EncoderState) -> Tensor:
    return generate_mask(store, cfg, gather_features(state, cfg.hmg_gate, enc.grid))


def apply_mask(prototypes, mask) -> Tensor:
    """Row-extended Hadamard product.

    ``prototypes`` is (C, c). A (c,) mask gives (C, c); a (B, c) batch of
    masks gives one masked copy per sample, (B, C, c).
    """
    prototypes, mask = ops.as_tensor(prototypes), ops.as_tensor(mask)
    if prototypes.ndim != 2 or mask.shape[-1] != prototypes.shape[-1] or mask.ndim > 2:
        raise ShapeError("apply_mask", prototypes.shape, mask.shape)
    if mask.ndim == 1:
        return ops.mul(prototypes, mask)
    b, c = mask.shape
    return ops.mul(prototypes, ops.reshape(mask, (b, 1, c)))
