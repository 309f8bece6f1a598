"""``divnorm`` command line.

Exit codes: 0 success, 1 validation error (bad flags, config, missing
input), 2 runtime failure (numerical abort, unwritable output).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments
from .config import ExperimentConfig, load_config, manifest_text
from .errors import ConfigError, DivNormError, NonFiniteError, ParseError, UninitializedStatsError
from .gradcheck import run_suite
from .retrieval import per_query_csv, reports_to_csv
from .synth_data import dataset_to_csv, generate, load_dataset
from .trainer import load_checkpoint, log_to_csv

log = logging.getLogger("divnorm")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="divnorm", description="Diverse Norm experiments on synthetic or ingested features.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="flat key = value config file (a manifest works too)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        p.add_argument("--dataset")
        p.add_argument("--checkpoint")
        return p

    common(sub.add_parser("synth", help="generate and save a synthetic dataset"))
    common(sub.add_parser("train", help="train a model, write checkpoint and log"))
    ev = common(sub.add_parser("eval", help="evaluate a checkpoint for each protocol x strategy"))
    ev.add_argument("--per-query", action="store_true", help="also write per-query AP / first-match rank")
    common(sub.add_parser("ablate-query-strategy", help="compare sim_sum and feat_sum over seeds"))
    common(sub.add_parser("ablate-drop-clothes", help="sweep the fraction of kept training outfits"))
    common(sub.add_parser("compare-baseline", help="full model vs single-head baseline over seeds"))
    common(sub.add_parser("gradcheck", help="finite-difference check of every backward pass"))
    return parser


def resolve_config(args) -> ExperimentConfig:
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for flag, key in (("seed", "seed"), ("out_dir", "out_dir"), ("dataset", "dataset"), ("checkpoint", "checkpoint")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, "per_query", False):
        overrides["per_query"] = "true"
    cfg = load_config(args.config, overrides).resolved()
    cfg.validate()
    return cfg


def emit_report(text: str, path, cfg: ExperimentConfig, command: str) -> Path:
    """Write one output file plus the manifest for ``command`` next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")
    (path.parent / f"{command}.manifest").write_text(manifest_text(cfg, command), encoding="utf-8", newline="\n")
    return path


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def cmd_synth(cfg: ExperimentConfig) -> None:
    ds = generate(cfg.synth_config())
    out = emit_report(dataset_to_csv(ds), cfg.dataset, cfg, "synth")
    print(f"wrote {len(ds)} samples to {out}")


def cmd_train(cfg: ExperimentConfig) -> None:
    ds = load_dataset(_require(cfg.dataset, "dataset"))
    rows: list = []
    ck = experiments.fit(cfg, ds, cfg.seed, log_rows=rows)
    out_dir = Path(cfg.out_dir)
    ck_path = Path(cfg.checkpoint)
    ck_path.parent.mkdir(parents=True, exist_ok=True)
    ck.save(ck_path)
    emit_report(log_to_csv(rows), out_dir / "train_log.csv", cfg, "train")
    print(f"trained {ck.epoch} epochs; final loss {rows[-1][1]:.4f}; checkpoint {ck_path}")


def cmd_eval(cfg: ExperimentConfig) -> None:
    ck_path = _require(cfg.checkpoint, "checkpoint")
    ds = load_dataset(_require(cfg.dataset, "dataset"))
    model = load_checkpoint(ck_path).build_model()
    reports = experiments.evaluate_all(model, ds, cfg.protocols, cfg.strategies)
    out_dir = Path(cfg.out_dir)
    emit_report(reports_to_csv(reports), out_dir / "report.csv", cfg, "eval")
    if cfg.per_query:
        for r in reports:
            (out_dir / f"per_query_{r.protocol}_{r.strategy}.csv").write_text(per_query_csv(r), encoding="utf-8", newline="\n")
    for r in reports:
        print(f"{r.protocol:8s} {r.strategy:9s} mAP {r.mAP:.4f} rank1 {r.rank(1):.4f} queries {r.n_queries_evaluated}")


def cmd_ablate_query_strategy(cfg: ExperimentConfig) -> None:
    rows = experiments.query_strategy_ablation(cfg)
    out = emit_report(
        experiments.results_csv(experiments.QUERY_STRATEGY_HEADER, rows),
        Path(cfg.out_dir) / "query_strategy.csv",
        cfg,
        "ablate-query-strategy",
    )
    print(f"wrote {len(rows)} rows to {out}")


def cmd_ablate_drop_clothes(cfg: ExperimentConfig) -> None:
    rows = experiments.drop_clothes_ablation(cfg)
    out = emit_report(
        experiments.results_csv(experiments.DROP_CLOTHES_HEADER, rows),
        Path(cfg.out_dir) / "drop_clothes.csv",
        cfg,
        "ablate-drop-clothes",
    )
    print(f"wrote {len(rows)} rows to {out}")


def cmd_compare_baseline(cfg: ExperimentConfig) -> None:
    rows = experiments.baseline_comparison(cfg)
    out = emit_report(
        experiments.results_csv(experiments.BASELINE_HEADER, rows),
        Path(cfg.out_dir) / "baseline_comparison.csv",
        cfg,
        "compare-baseline",
    )
    print(f"wrote {len(rows)} rows to {out}")


def cmd_gradcheck(cfg: ExperimentConfig) -> int:
    results = run_suite(cfg.seed, n_seeds=cfg.gradcheck_seeds)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name:26s} rel_error {r.rel_error:.3e} (tol {r.tol:.0e})")
    worst = max(r.rel_error for r in results)
    print(f"max relative error {worst:.3e}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_RUNTIME


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate-query-strategy": cmd_ablate_query_strategy,
    "ablate-drop-clothes": cmd_ablate_drop_clothes,
    "compare-baseline": cmd_compare_baseline,
    "gradcheck": cmd_gradcheck,
}


def run_command(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        code = COMMANDS[args.command](cfg)
        return EXIT_OK if code is None else code
    except (ConfigError, ParseError, UninitializedStatsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NonFiniteError, DivNormError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
