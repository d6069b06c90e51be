"""Head enrichment: class-token attention maps and their decorrelation penalty."""

from __future__ import annotations

import numpy as np

from .numeric import ShapeError, Tensor, ops


def class_attention(q_cls, k_img) -> Tensor:
    """Per-head softmax of the class query against the patch keys only.

    ``q_cls`` is (..., N, dh) and ``k_img`` is (..., N, D, dh); returns (..., N, D).
    """
    q_cls, k_img = ops.as_tensor(q_cls), ops.as_tensor(k_img)
    if k_img.ndim != q_cls.ndim + 1 or k_img.shape[:-2] != q_cls.shape[:-1] or k_img.shape[-1] != q_cls.shape[-1]:
        raise ShapeError("class_attention", q_cls.shape, k_img.shape)
    dh = q_cls.shape[-1]
    q = ops.reshape(q_cls, q_cls.shape[:-1] + (1, dh))
    axes = list(range(k_img.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    scores = ops.matmul(q, ops.transpose(k_img, axes))  # (..., N, 1, D)
    scores = ops.reshape(ops.mul(scores, 1.0 / np.sqrt(dh)), k_img.shape[:-1])
    return ops.softmax(scores, axis=-1)


def _gram(attn: Tensor) -> Tensor:
    an = ops.l2_normalize(attn, axis=-1)
    axes = list(range(an.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ops.matmul(an, ops.transpose(an, axes))


def hem_loss(attn) -> Tensor:
    """Squared Frobenius distance of the normalised head Gram matrix from I_N.

    A batched (B, N, D) input gives the mean over samples.
    """
    attn = ops.as_tensor(attn)
    n = attn.shape[-2]
    resid = ops.sub(_gram(attn), np.eye(n, dtype=attn.dtype))
    per = ops.sum(ops.mul(resid, resid), axis=(-2, -1))
    return ops.mean(per) if per.ndim else per


def diag_head_crosscorr(attn) -> np.ndarray:
    """Normalised head cross-correlation matrix, (N, N) or (B, N, N)."""
    a = np.asarray(attn.data if isinstance(attn, Tensor) else attn, dtype=np.float64)
    an = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    return an @ np.swapaxes(an, -1, -2)


def mean_off_diagonal(corr: np.ndarray) -> float:
    n = corr.shape[-1]
    off = ~np.eye(n, dtype=bool)
    return float(corr[..., off].mean()) if n > 1 else 0.0
