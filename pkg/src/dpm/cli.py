"""Command line entry point: gen, train, eval, gradcheck, diag.

Every knob lives in the JSON config; flags only pick the config, the
inputs and the output directory. Exit codes: 0 success, 1 validation
error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, experiments, gradsuite, hem, retrieval
from .config import MASK_VARIANTS, ConfigError, RunConfig
from .model import DPMModel
from .numeric import NonFiniteError, load_checkpoint, save_checkpoint
from .trainer import METRIC_COLUMNS, train

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("dpm")


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _attach_log(out: Path) -> logging.Handler:
    # timestamps only ever go here, so every other artifact is byte-reproducible
    handler = logging.FileHandler(out / "dpm.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def _config(path: str | None, fallback: Path | None = None) -> RunConfig:
    if path:
        return RunConfig.load(path)
    if fallback is not None and fallback.exists():
        return RunConfig.load(fallback)
    return RunConfig().validate()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_model(checkpoint: str, cfg: RunConfig) -> DPMModel:
    state = load_checkpoint(checkpoint)
    if "proto.w" not in state:
        raise ConfigError("checkpoint", f"{checkpoint} has no prototype matrix")
    model = DPMModel(cfg, state["proto.w"].shape[0])
    model.store.load_state(state)
    return model


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    cfg = _config(args.config)
    out = _out_dir(args, cfg)
    handler = _attach_log(out)
    try:
        ds = data.generate(cfg.data)
        data.store(ds, out)
        cfg.save(out / "resolved_config.json")
        log.info("generated %d/%d/%d samples", len(ds.train), len(ds.query), len(ds.gallery))
    finally:
        log.removeHandler(handler)
    print(f"identities={ds.num_identities} train={len(ds.train)} query={len(ds.query)} "
          f"gallery={len(ds.gallery)} checksum={ds.checksum()}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args.config)
    out = _out_dir(args, cfg)
    ds = data.load(args.data)
    cfg.save(out / "resolved_config.json")
    handler = _attach_log(out)
    model = DPMModel(cfg, ds.num_identities, seed=cfg.train.seed)
    last_good = {"state": model.store.state(), "iter": 0}
    every = cfg.train.checkpoint_every

    def on_iteration(it: int, m: DPMModel) -> None:
        last_good["state"], last_good["iter"] = m.store.state(), it
        if every and it % every == 0:
            save_checkpoint(m.store, out / f"ckpt_{it:06d}.bin")
            log.info("checkpoint at iteration %d", it)

    try:
        with open(out / "metrics.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            writer.writeheader()

            def on_row(row: dict) -> None:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

            log.info("training %d iterations", cfg.train.iterations)
            try:
                train(model, ds.train, on_row=on_row, on_iteration=on_iteration)
            except NonFiniteError:
                save_checkpoint(last_good["state"], out / "ckpt_last_good.bin")
                log.error("non-finite values; last good checkpoint from iteration %d kept", last_good["iter"])
                raise
        save_checkpoint(model.store, out / "ckpt_final.bin")
        log.info("done")
    finally:
        log.removeHandler(handler)
    print(f"iterations={cfg.train.iterations} checkpoint={out / 'ckpt_final.bin'} "
          f"checksum={model.store.checksum()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args.config, Path(args.checkpoint).parent / "resolved_config.json")
    variant = args.variant or cfg.hmg.mask_variant
    if variant not in MASK_VARIANTS:
        raise ConfigError("variant", f"must be one of {MASK_VARIANTS}")
    out = _out_dir(args, cfg)
    model = _load_model(args.checkpoint, cfg)
    ds = data.load(args.data)
    qb, gb = experiments.retrieval_banks(model, ds)
    qb.save(out / "query.fea")
    gb.save(out / "gallery.fea")
    res = retrieval.evaluate(qb, gb, variant, cfg.eval.exclude_same_camera, cfg.eval.max_rank)
    res.meta["query_mask"] = "generated" if experiments.uses_mask(cfg) else "unit"
    _write_json(out / "metrics.json", res.to_json())
    print(f"variant={variant} mAP={res.mAP:.4f} rank1={res.cmc[0]:.4f} excluded={res.excluded_queries}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args.config)
    out = _out_dir(args, cfg)
    seeds = range(cfg.train.seed, cfg.train.seed + 5)
    rows = gradsuite.summarize(gradsuite.run_suite(cfg, seeds))
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "group", "max_rel_err", "checked", "passed"])
        for r in rows:
            w.writerow([r.component, r.group, f"{r.max_rel_err:.3e}", r.checked, r.passed])
    print(f"{'component':<10}{'group':<11}{'max_rel_err':>13}{'checked':>9}  result")
    for r in rows:
        print(f"{r.component:<10}{r.group:<11}{r.max_rel_err:>13.3e}{r.checked:>9}  {'PASS' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_NUMERIC


def write_crosscorr_csv(path: Path, corr: np.ndarray) -> None:
    """One N x N block per sample: columns sample, row, h0..h{N-1}."""
    heads = corr.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "row"] + [f"h{j}" for j in range(heads)])
        for s in range(corr.shape[0]):
            for i in range(heads):
                w.writerow([s, i] + [repr(float(v)) for v in corr[s, i]])


def _diag_bundle(model: DPMModel, split: data.Split, n: int):
    attn = model.attention_maps(split.images[:n], split.cams[:n])
    corr = hem.diag_head_crosscorr(attn)
    gaps = model.similarity_gaps(split.images[:n], split.cams[:n])
    return corr, gaps


def cmd_diag(args) -> int:
    cfg = _config(args.config, Path(args.checkpoint).parent / "resolved_config.json")
    out = _out_dir(args, cfg)
    ds = data.load(args.data)
    n = min(cfg.eval.diag_samples, len(ds.query))
    model = _load_model(args.checkpoint, cfg)
    corr, gaps = _diag_bundle(model, ds.query, n)
    heads = corr.shape[-1]
    write_crosscorr_csv(out / "head_crosscorr.csv", corr)
    with open(out / "similarity_gap.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample"] + [f"block_{l + 1}" for l in range(gaps.shape[0])])
        for s in range(gaps.shape[1]):
            w.writerow([s] + [repr(float(v)) for v in gaps[:, s]])
    summary = {"samples": n, "heads": heads, "mean_offdiag": hem.mean_off_diagonal(corr),
               "mean_gap_per_block": [float(v) for v in gaps.mean(axis=1)]}
    if args.against:
        other = _load_model(args.against, cfg)
        c2, _ = _diag_bundle(other, ds.query, n)
        summary["against"] = str(args.against)
        summary["against_mean_offdiag"] = hem.mean_off_diagonal(c2)
        summary["offdiag_difference"] = summary["mean_offdiag"] - summary["against_mean_offdiag"]
    _write_json(out / "diag.json", summary)
    print(f"samples={n} heads={heads} mean_offdiag={summary['mean_offdiag']:.4f}"
          + (f" difference={summary['offdiag_difference']:+.4f}" if args.against else ""))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name: str, fn, help: str):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON run config (defaults when omitted)")
        sp.add_argument("--out", help="output directory (config output_dir when omitted)")
        sp.set_defaults(fn=fn)
        return sp

    cmd("gen", cmd_gen, "generate the synthetic dataset")
    sp = cmd("train", cmd_train, "train a model")
    sp.add_argument("--data", required=True)
    sp = cmd("eval", cmd_eval, "masked retrieval evaluation")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--variant", choices=MASK_VARIANTS, help="mask variant (config mask_variant when omitted)")
    cmd("gradcheck", cmd_gradcheck, "finite-difference check of every loss and parameter group")
    sp = cmd("diag", cmd_diag, "export head cross-correlation and similarity-gap CSVs")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--against", help="second checkpoint whose mean off-diagonal is compared")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NonFiniteError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
