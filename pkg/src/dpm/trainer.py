"""Two-step alternating training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .data import Split
from .model import DPMModel
from .numeric import SGD, FreezeGroup, NonFiniteError, backward

METRIC_COLUMNS = ("iter", "step", "L_cls", "L_Mcls", "L_hem", "L_tri", "total", "lr")


@dataclass(frozen=True)
class FreezePlan:
    step1: frozenset = frozenset({FreezeGroup.ENCODER, FreezeGroup.PROTOTYPE})
    step2: frozenset = frozenset({FreezeGroup.HMG})

    def validate(self) -> None:
        if self.step1 & self.step2:
            raise ValueError("freeze plan steps must train disjoint groups")
        if (self.step1 | self.step2) != set(FreezeGroup):
            raise ValueError("freeze plan must cover every parameter group")


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    cams: np.ndarray
    index: np.ndarray   # rows of the source split


def lr_schedule(it: int, total: int, base: float) -> float:
    """Cosine decay from ``base`` at iteration 0 towards 0 at ``total``."""
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * it / total))


def sample_batch(split: Split, p: int, k: int, rng: np.random.Generator) -> Batch:
    """P identities x K instances; identities with fewer than K images are drawn with replacement."""
    ids = np.unique(split.ids)
    if len(ids) < p:
        raise ValueError(f"need at least {p} identities, dataset has {len(ids)}")
    chosen = rng.choice(ids, size=p, replace=False)
    rows = []
    for ident in chosen:
        pool = np.flatnonzero(split.ids == ident)
        rows.append(rng.choice(pool, size=k, replace=len(pool) < k))
    index = np.concatenate(rows)
    return Batch(split.images[index], split.ids[index], split.cams[index], index)


@dataclass
class StepMetrics:
    step: int
    parts: dict[str, float]
    total: float


def _run_step(model: DPMModel, batch: Batch, groups: Iterable[FreezeGroup], opt: SGD,
              lr: float, step: int) -> StepMetrics:
    store = model.store
    store.set_active(groups)
    try:
        total, parts = model.objective(batch.images, batch.cams, batch.labels)
    except NonFiniteError as exc:
        raise NonFiniteError(exc.op, f"step {step}: {exc.where}") from exc
    if not np.isfinite(total.data).all():
        raise NonFiniteError("total_loss", f"step {step}")
    backward(total)
    opt.step(lr)
    store.zero_grad()
    return StepMetrics(step, {k: float(v.data) for k, v in parts.items()}, float(total.data))


class FreezeViolation(RuntimeError):
    pass


def _frozen_step(model: DPMModel, batch: Batch, active: frozenset, opt: SGD, lr: float, step: int,
                 verify: bool) -> StepMetrics:
    frozen = [g for g in FreezeGroup if g not in active]
    before = model.store.checksum(frozen) if verify else None
    m = _run_step(model, batch, active, opt, lr, step)
    if verify and model.store.checksum(frozen) != before:
        raise FreezeViolation(f"step {step} modified frozen groups {[g.value for g in frozen]}")
    return m


def train_step(model: DPMModel, batch: Batch, plan: FreezePlan, opt: SGD, lr: float,
               verify_freeze: bool = False) -> tuple[StepMetrics, StepMetrics]:
    """Update encoder+prototypes with the mask generator frozen, then the reverse.

    With ``verify_freeze`` the frozen groups are checksummed around each step
    and any change raises ``FreezeViolation``.
    """
    plan.validate()
    first = _frozen_step(model, batch, plan.step1, opt, lr, 1, verify_freeze)
    second = _frozen_step(model, batch, plan.step2, opt, lr, 2, verify_freeze)
    model.store.set_active(())
    return first, second


def metric_row(it: int, m: StepMetrics, lr: float) -> dict:
    p = m.parts
    return {"iter": it, "step": m.step, "L_cls": p["cls"], "L_Mcls": p["mcls"], "L_hem": p["hem"],
            "L_tri": p["tri"], "total": m.total, "lr": lr}


@dataclass
class TrainResult:
    rows: list[dict] = field(default_factory=list)
    iterations: int = 0
    freeze_checks: int = 0


def train(model: DPMModel, split: Split, iterations: int | None = None,
          on_row: Callable[[dict], None] | None = None,
          on_iteration: Callable[[int, DPMModel], None] | None = None,
          verify_freeze: bool = False) -> TrainResult:
    """Run the configured number of two-step iterations on ``split``.

    ``on_row`` receives one metrics dict per step; ``on_iteration`` runs after
    each completed iteration (checkpointing hooks). ``verify_freeze`` checks
    the freeze contract bitwise at every step.
    """
    tc = model.cfg.train
    total = tc.iterations if iterations is None else iterations
    rng = np.random.default_rng([tc.seed, 1])
    opt = SGD(model.store, tc.momentum, tc.weight_decay)
    plan = FreezePlan()
    result = TrainResult()
    for it in range(total):
        lr = lr_schedule(it, total, tc.base_lr)
        batch = sample_batch(split, tc.ids_per_batch, tc.instances_per_id, rng)
        for m in train_step(model, batch, plan, opt, lr, verify_freeze):
            row = metric_row(it, m, lr)
            result.rows.append(row)
            if on_row is not None:
                on_row(row)
        result.iterations = it + 1
        result.freeze_checks += 2 if verify_freeze else 0
        if on_iteration is not None:
            on_iteration(it + 1, model)
    return result
