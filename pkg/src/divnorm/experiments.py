"""Multi-seed experiment drivers shared by the CLI, scripts and tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .config import ExperimentConfig
from .retrieval import EvalReport, evaluate
from .synth_data import Dataset, drop_outfits, generate
from .trainer import train_labels, train_run

log = logging.getLogger(__name__)


def fit(cfg: ExperimentConfig, ds: Dataset, seed: int, kind: str | None = None, log_rows=None):
    mc = cfg.model_config(ds.features.shape[1], len(train_labels(ds)), seed=seed, kind=kind)
    ck = train_run(ds, mc, cfg.train_config(seed=seed), log_rows=log_rows)
    return ck


def evaluate_all(model, ds: Dataset, protocols, strategies) -> list[EvalReport]:
    return [evaluate(model, ds, p, s) for p in protocols for s in strategies]


@dataclass(frozen=True)
class SeedResult:
    seed: int
    label: str
    report: EvalReport

    def csv_row(self) -> str:
        r = self.report
        return f"{self.seed},{self.label},{r.csv_row()}"


def query_strategy_ablation(cfg: ExperimentConfig) -> list[SeedResult]:
    """Train one model per seed, score it with every strategy."""
    out = []
    for seed in cfg.seeds:
        ds = generate(cfg.synth_config(seed))
        model = fit(cfg, ds, seed).build_model()
        for report in evaluate_all(model, ds, cfg.protocols, cfg.strategies):
            out.append(SeedResult(seed, cfg.model, report))
        log.info("query-strategy seed %d done", seed)
    return out


def drop_clothes_ablation(cfg: ExperimentConfig, protocol: str = "cc") -> list[SeedResult]:
    """One (train, eval) pair per keep fraction per seed; label is the fraction."""
    strategy = cfg.strategies[0]
    out = []
    for seed in cfg.seeds:
        full = generate(cfg.synth_config(seed))
        for keep in cfg.keep_fractions:
            ds = drop_outfits(full, keep, seed)
            model = fit(cfg, ds, seed).build_model()
            out.append(SeedResult(seed, repr(float(keep)), evaluate(model, ds, protocol, strategy)))
            log.info("drop-clothes seed %d keep %.2f done", seed, keep)
    return out


def baseline_comparison(cfg: ExperimentConfig, protocol: str = "cc", strategy: str = "sim_sum") -> list[SeedResult]:
    """Full model against the single-head plain cross-entropy baseline."""
    out = []
    for seed in cfg.seeds:
        ds = generate(cfg.synth_config(seed))
        for kind in ("diverse_norm", "baseline"):
            model = fit(cfg, ds, seed, kind=kind).build_model()
            out.append(SeedResult(seed, kind, evaluate(model, ds, protocol, strategy)))
    return out


QUERY_STRATEGY_HEADER = "seed,model," + "protocol,strategy,mAP,rank1,rank5,rank10,n_queries"
DROP_CLOTHES_HEADER = "seed,keep_fraction," + "protocol,strategy,mAP,rank1,rank5,rank10,n_queries"
BASELINE_HEADER = "seed,model," + "protocol,strategy,mAP,rank1,rank5,rank10,n_queries"


def results_csv(header: str, rows: list[SeedResult]) -> str:
    return "\n".join([header, *(r.csv_row() for r in rows)]) + "\n"
