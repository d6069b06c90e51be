"""Finite-difference check of every loss component against every parameter group."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .losses import total_loss
from .model import DPMModel
from .numeric import FreezeGroup, grad_check_outputs, precision

COMPONENTS = ("cls", "mcls", "hem", "tri", "total")

# small enough that every coordinate of every parameter can be perturbed
MICRO = {
    "image_h": 8, "image_w": 8, "in_channels": 3, "patch": 4, "stride": 2, "dim": 8, "depth": 2,
    "heads": 2, "mlp_ratio": 2, "cameras": 2, "hmg_gate": [1, 2], "hmg_hidden": 4,
}


@dataclass
class GradRow:
    component: str
    group: str
    max_rel_err: float
    checked: int
    passed: bool
    seed: int | None = None


def micro_config(base: RunConfig | None = None) -> RunConfig:
    """``base`` with its architecture replaced by the micro model; loss settings are kept."""
    base = base or RunConfig()
    return base.replace(**MICRO)


def micro_model(cfg: RunConfig, seed: int, num_classes: int = 2) -> DPMModel:
    """64-bit micro model with every parameter moved off its (often zero) initial value."""
    model = DPMModel(cfg, num_classes, seed=seed)
    model.store.astype(np.float64)
    rng = np.random.default_rng([seed, 7])
    for _, p in model.store.items():
        p.tensor.data = p.tensor.data + rng.normal(0.0, 0.3, p.tensor.shape)
    return model


def micro_batch(cfg: RunConfig, seed: int, ids: int = 2, per_id: int = 2):
    rng = np.random.default_rng([seed, 8])
    e = cfg.encoder
    n = ids * per_id
    images = rng.normal(0.0, 1.0, (n, e.image_h, e.image_w, e.in_channels))
    cams = rng.integers(0, e.cameras, n)
    labels = np.repeat(np.arange(ids), per_id)
    return images, cams, labels


def check_seed(cfg: RunConfig, seed: int, step: float = 1e-5, tol: float = 1e-4) -> list[GradRow]:
    rows = []
    with precision(np.float64):
        model = micro_model(cfg, seed)
        images, cams, labels = micro_batch(cfg, seed)
        store = model.store
        store.set_active(list(FreezeGroup))

        def objectives():
            parts = model.loss_parts(model.forward(images, cams), labels)
            return {**parts, "total": total_loss(parts, cfg.loss)}

        try:
            for group in FreezeGroup:
                reports = grad_check_outputs(objectives, store.tensors([group]), step=step, tol=tol)
                for comp in COMPONENTS:
                    r = reports[comp]
                    rows.append(GradRow(comp, group.value, r.max_rel_err, r.checked, r.passed, seed))
        finally:
            store.set_active(())
    return rows


def run_suite(cfg: RunConfig | None = None, seeds=range(5), step: float = 1e-5, tol: float = 1e-4) -> list[GradRow]:
    """Per-seed rows for every (component, group) pair."""
    cfg = micro_config(cfg)
    return [row for s in seeds for row in check_seed(cfg, int(s), step, tol)]


def summarize(rows: list[GradRow], tol: float = 1e-4) -> list[GradRow]:
    """Worst error over seeds, one row per (component, group)."""
    out = []
    for comp in COMPONENTS:
        for group in FreezeGroup:
            sel = [r for r in rows if r.component == comp and r.group == group.value]
            if sel:
                worst = max(r.max_rel_err for r in sel)
                out.append(GradRow(comp, group.value, worst, sum(r.checked for r in sel), worst < tol))
    return out
