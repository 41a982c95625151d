"""Command-line entry point: ``saconvnet <command> [flags]``.

Exit codes: 0 success, 1 contract/validation failure, 2 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .climate import label_extremes, synth_generate
from .errors import ConfigError, ContractError, FormatVersionError, InputError, TrainingError
from .fileio import (
    atomic_write,
    labels_csv,
    load_checkpoint,
    read_series_csv,
    save_checkpoint,
    series_csv,
    sha256_file,
    write_grid,
    write_json,
)
from .gradcheck import DEFAULT_EPS, DEFAULT_TOLERANCE, gradcheck, gradcheck_model, gradcheck_sample
from .metrics import percentile_sweep
from .nn import ARCHITECTURES
from .pipeline import (
    GPH_FILE,
    PRECIP_FILE,
    PRECIP_GRID_FILE,
    SLP_FILE,
    TRUTH_FILE,
    RunConfig,
    dataset_from_dir,
    fit,
    fit_and_score,
    load_run_config,
    read_data_dir,
    score,
)

logger = logging.getLogger("saconvnet")

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2

CHECKPOINT_FILE = "model.ckpt"
LOG_FILE = "train_log.jsonl"
MANIFEST_FILE = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Run manifest written first as ``incomplete`` and finalised on success."""

    def __init__(self, out: Path, command: str, seed: int | None, config_hash: str | None, inputs: dict[str, Path]):
        self.path = out / MANIFEST_FILE
        self.body = {
            "command": command,
            "version": __version__,
            "status": "incomplete",
            "config_hash": config_hash,
            "master_seed": seed,
            "inputs": {name: {"path": str(p), "sha256": sha256_file(p)} for name, p in sorted(inputs.items())},
            "artifacts": {},
            "started": _now(),
            "finished": None,
        }
        write_json(self.path, self.body)

    def finish(self, artifacts: dict[str, Path]) -> None:
        self.body["artifacts"] = {
            name: {"path": p.name, "sha256": sha256_file(p)} for name, p in sorted(artifacts.items())
        }
        self.body["status"] = "complete"
        self.body["finished"] = _now()
        write_json(self.path, self.body)


def _parse_percentiles(text: str) -> list[float]:
    """``0.91:0.95`` (step 0.01), ``a:b:step`` or a comma list."""
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) not in (2, 3):
                raise ValueError
            lo, hi = parts[0], parts[1]
            step = parts[2] if len(parts) == 3 else 0.01
            n = int(round((hi - lo) / step))
            values = [round(lo + i * step, 10) for i in range(n + 1)]
        else:
            values = [float(p) for p in text.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse percentiles {text!r}; use e.g. 0.91:0.95 or 0.9,0.95") from None
    if not values or any(not 0.0 <= v <= 1.0 for v in values):
        raise UsageError(f"percentiles must lie in [0, 1], got {text!r}")
    return values


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    syn = synth_generate(args.seed, args.days, args.signal)
    manifest = Manifest(out, "synth", args.seed, None, {})
    artifacts = {
        SLP_FILE: write_grid(out / SLP_FILE, syn.slp),
        GPH_FILE: write_grid(out / GPH_FILE, syn.gph),
        PRECIP_GRID_FILE: write_grid(out / PRECIP_GRID_FILE, syn.precip_grid),
        PRECIP_FILE: atomic_write(out / PRECIP_FILE, series_csv(syn.slp.dates, syn.precip)),
        TRUTH_FILE: atomic_write(
            out / TRUTH_FILE,
            "date,extreme\n" + "".join(f"{d},{int(e)}\n" for d, e in zip(syn.slp.dates, syn.extreme)),
        ),
    }
    manifest.finish(artifacts)
    print(f"wrote {args.days} days ({int(syn.extreme.sum())} planted extremes) to {out}")
    return EXIT_OK


def cmd_label(args) -> int:
    dates, values = read_series_csv(args.precip)
    if len(values) == 0:
        raise InputError(f"{args.precip}: no data rows")
    labels, threshold = label_extremes(values, args.percentile)
    atomic_write(args.out, labels_csv(dates, labels, args.percentile, threshold))
    print(f"threshold p{args.percentile * 100:g} = {threshold!r}; {int(labels.sum())} of {len(labels)} days extreme")
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    raw = read_data_dir(args.data)
    ds = dataset_from_dir(raw, run)
    out = Path(args.out)
    inputs = dict(raw.files)
    if args.config:
        inputs["config"] = Path(args.config)
    manifest = Manifest(out, f"train --arch {args.arch}", args.seed, run.digest(args.arch), inputs)

    counts = ds.class_counts()
    logger.info("class counts: %s", counts)
    result = fit(ds, args.arch, run, args.seed, on_epoch=lambda r: logger.info(r.to_json()))
    meta = {
        "arch": args.arch,
        "seed": args.seed,
        "run_config": run.to_dict(),
        "percentile": ds.meta.get("percentile"),
        "class_weights": result.class_weights.tolist(),
    }
    ckpt = save_checkpoint(out / CHECKPOINT_FILE, result.model, meta)
    log = atomic_write(out / LOG_FILE, result.log_lines())
    manifest.finish({CHECKPOINT_FILE: ckpt, LOG_FILE: log})
    last = result.history[-1]
    print(f"epoch {last.epoch}: loss={last.loss:.6f} train_accuracy={last.train_accuracy:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    run = RunConfig.from_dict(meta["run_config"]) if "run_config" in meta else RunConfig()
    raw = read_data_dir(args.data)
    cfg = model.config
    grid = raw.slp.grid_shape
    if grid != (cfg.input_h, cfg.input_w) or cfg.input_d != 2:
        raise FormatVersionError(
            f"checkpoint expects {cfg.input_h}x{cfg.input_w}x{cfg.input_d} inputs, data grid is {grid[0]}x{grid[1]}x2"
        )
    ds = dataset_from_dir(raw, run)
    report = score(model, ds, args.split)
    out = Path(args.out)
    atomic_write(out / "report.json", report.to_json())
    atomic_write(out / "report.csv", report.to_csv())
    cm = report.confusion
    atomic_write(out / "confusion.txt", cm.render() + "\n")
    atomic_write(out / "confusion.csv", "actual,predicted,count\n" f"0,0,{cm.tn}\n0,1,{cm.fp}\n1,0,{cm.fn}\n1,1,{cm.tp}\n")
    print(cm.render())
    print(json.dumps(report.to_dict()["metrics"]))
    return EXIT_OK


def cmd_sweep(args) -> int:
    run = load_run_config(args.config)
    raw = read_data_dir(args.data)
    if raw.precip is None:
        raise InputError(f"{args.data}: sweep needs {PRECIP_FILE} to relabel at each percentile")
    thresholds = _parse_percentiles(args.percentiles)
    out = Path(args.out)
    inputs = dict(raw.files)
    if args.config:
        inputs["config"] = Path(args.config)
    manifest = Manifest(out, f"sweep --arch {args.arch}", args.seed, run.digest(args.arch), inputs)

    def build(m):
        return dataset_from_dir(raw, run, percentile=m)

    def fit_score(ds, seed):
        rep = fit_and_score(ds, args.arch, run, seed)
        logger.info("p=%s seed=%d accuracy=%.4f", ds.meta["percentile"], seed, rep.accuracy)
        return rep

    result = percentile_sweep(build, fit_score, thresholds, args.runs, args.seed)
    artifacts = {}
    for m, rep in result.reports.items():
        name = f"ensemble_p{int(round(m * 100)):02d}.json"
        body = rep.to_dict()
        body["positives"] = result.positives[m]
        body["runs"] = [r.to_dict() for r in result.runs[m]]
        artifacts[name] = write_json(out / name, body)
    artifacts["summary.csv"] = atomic_write(out / "summary.csv", result.summary_csv())
    manifest.finish(artifacts)
    print(result.summary_csv(), end="")
    print(f"{result.trainings} trainings over {len(thresholds)} thresholds")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    run = load_run_config(args.config)
    cfg = run.model_config(args.arch)
    model = gradcheck_model(cfg, seed=args.seed)
    x, label = gradcheck_sample(args.seed, cfg)
    res = gradcheck(model, x, label, tolerance=args.tolerance, eps=args.eps, max_entries=args.max_entries, seed=args.seed)
    for layer, err in res.by_layer().items():
        print(f"{layer:<20} worst relative error {err:.3e}")
    print(f"checked {sum(p.checked for p in res.params)} entries in {res.seconds:.1f}s; tolerance {args.tolerance:g}")
    if not res.passed:
        for p in res.failures:
            print(
                f"FAIL {p.name}{list(p.worst_index)}: relative error {p.worst_rel_error:.3e} "
                f"(analytic {p.analytic:.6e}, numeric {p.numeric:.6e})"
            )
        return EXIT_CONTRACT
    print("PASS")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="saconvnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic SLP/GPH/precipitation record")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--days", type=int, default=1000)
    s.add_argument("--signal", type=float, default=2.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("label", help="label extreme days above a precipitation percentile")
    s.add_argument("--precip", required=True)
    s.add_argument("--percentile", type=float, default=0.95)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_label)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--arch", choices=ARCHITECTURES, default="saconvnet-hw")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("test", "train", "all"), default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="repeat training across precipitation percentiles")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--arch", choices=ARCHITECTURES, default="saconvnet-hw")
    s.add_argument("--runs", type=int, default=5)
    s.add_argument("--percentiles", default="0.91:0.95")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("gradcheck", help="finite-difference check of all parameter gradients")
    s.add_argument("--config")
    s.add_argument("--arch", choices=ARCHITECTURES, default="saconvnet-hw")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    s.add_argument("--eps", type=float, default=DEFAULT_EPS)
    s.add_argument("--max-entries", type=int, default=None, help="check a random subset per tensor")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONTRACT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, InputError, ContractError, TrainingError, FormatVersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
