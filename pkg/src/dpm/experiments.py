"""Paired training runs used by the directional benchmark checks."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import hem, retrieval, trainer
from .config import RunConfig
from .data import Dataset, generate
from .model import DPMModel

# ablation presets, expressed as config overrides
PRESETS: dict[str, dict] = {
    "full": {"alpha": 0.5, "beta": 0.1, "branch_losses": "SA"},
    "no_hem": {"alpha": 0.5, "beta": 0.0, "branch_losses": "SA"},
    "baseline": {"alpha": 1.0, "beta": 0.1, "branch_losses": "SA"},
    "ss": {"alpha": 0.5, "beta": 0.1, "branch_losses": "SS"},
}


@dataclass
class RunOutcome:
    name: str
    seed: int
    mAP: float
    rank1: float
    head_offdiag: float
    seconds: float
    cpu_seconds: float
    rows: list[dict]
    model: DPMModel


def uses_mask(cfg: RunConfig) -> bool:
    """A model whose masked branch carries no weight has an untrained mask generator."""
    return cfg.loss.alpha < 1.0


def retrieval_banks(model: DPMModel, ds: Dataset) -> tuple[retrieval.FeatureBank, retrieval.FeatureBank]:
    banks = []
    for split in (ds.query, ds.gallery):
        f, m = model.extract(split.images, split.cams)
        if not uses_mask(model.cfg):
            m = np.ones_like(m)
        banks.append(retrieval.FeatureBank(f, m, split.ids, split.cams))
    return banks[0], banks[1]


def head_offdiag(model: DPMModel, ds: Dataset, n: int | None = None) -> float:
    """Mean off-diagonal head cross-correlation over the first ``n`` query images."""
    n = model.cfg.eval.diag_samples if n is None else n
    q = ds.query
    attn = model.attention_maps(q.images[:n], q.cams[:n])
    return hem.mean_off_diagonal(hem.diag_head_crosscorr(attn))


def run(cfg: RunConfig, name: str = "", ds: Dataset | None = None) -> RunOutcome:
    ds = generate(cfg.data) if ds is None else ds
    t0, c0 = time.perf_counter(), time.process_time()
    model = DPMModel(cfg, ds.num_identities, seed=cfg.train.seed)
    res = trainer.train(model, ds.train)
    qb, gb = retrieval_banks(model, ds)
    ev = retrieval.evaluate(qb, gb, cfg.hmg.mask_variant, cfg.eval.exclude_same_camera, cfg.eval.max_rank)
    off = head_offdiag(model, ds)
    return RunOutcome(name, cfg.train.seed, ev.mAP, float(ev.cmc[0]), off, time.perf_counter() - t0,
                      time.process_time() - c0, res.rows, model)


def preset(base: RunConfig, name: str, seed: int, iterations: int) -> RunConfig:
    return base.replace(**PRESETS[name], seed=seed, iterations=iterations)
