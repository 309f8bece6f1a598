"""Flat ``key = value`` experiment configuration.

Precedence is CLI flag > config file > default. Unknown keys are rejected.
List-valued keys are comma separated; ``#`` starts a comment.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .diverse_norm import ModelConfig
from .errors import ConfigError
from .retrieval import PROTOCOLS, STRATEGIES
from .synth_data import SynthConfig
from .trainer import TrainConfig

OUT_DIR_ENV = "DIVNORM_OUT"
FORMAT_VERSIONS = {"config": 1, "dataset_csv": 1, "checkpoint": 1, "report_csv": 1, "train_log_csv": 1}


@dataclass(frozen=True)
class ExperimentConfig:
    # synthetic data
    n_ids: int = 50
    outfits_per_id: int = 5
    samples_per_outfit: int = 8
    n_cameras: int = 4
    d_id: int = 8
    d_c: int = 8
    d_obs: int = 32
    noise_std: float = 0.3
    id_occlusion_rate: float = 0.2
    clothes_occlusion_rate: float = 0.2
    clothes_scale: float = 2.0
    mixing: str = "random"
    # model
    model: str = "diverse_norm"
    dim: int = 32
    hidden: tuple[int, ...] = ()
    whitening: str = "newton_schulz"
    ns_iters: int = 5
    eps: float = 1e-5
    momentum: float = 0.1
    gate: str = "single"
    gate_reduction: int = 4
    # training
    P: int = 8
    K: int = 8
    epochs: int = 30
    lr0: float = 3.5e-4
    lr_decay_every: int = 20
    lr_decay_factor: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # evaluation
    protocols: tuple[str, ...] = ("general", "cc")
    strategies: tuple[str, ...] = ("sim_sum", "feat_sum")
    per_query: bool = False
    # ablations / gradcheck
    seeds: tuple[int, ...] = (0, 1, 2)
    keep_fractions: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    gradcheck_seeds: int = 1
    # io
    seed: int = 0
    out_dir: str = ""
    dataset: str = ""
    checkpoint: str = ""

    def resolved(self) -> "ExperimentConfig":
        """Fill path defaults from ``out_dir`` (or ``$DIVNORM_OUT``)."""
        out = self.out_dir or os.environ.get(OUT_DIR_ENV, "") or "runs"
        return replace(
            self,
            out_dir=out,
            dataset=self.dataset or str(Path(out) / "dataset.csv"),
            checkpoint=self.checkpoint or str(Path(out) / "checkpoint.bin"),
        )

    def validate(self) -> None:
        if not self.protocols:
            raise ConfigError("protocols list is empty")
        if not self.strategies:
            raise ConfigError("strategies list is empty")
        for p in self.protocols:
            if p not in PROTOCOLS:
                raise ConfigError(f"unknown protocol {p!r} (choose from {', '.join(PROTOCOLS)})")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r} (choose from {', '.join(STRATEGIES)})")
        if not self.seeds:
            raise ConfigError("seeds list is empty")
        if not self.keep_fractions or any(not 0 < k <= 1 for k in self.keep_fractions):
            raise ConfigError("keep_fractions must be a non-empty list of values in (0, 1]")
        if self.gradcheck_seeds < 1:
            raise ConfigError("gradcheck_seeds must be >= 1")
        self.synth_config().validate()
        self.train_config().validate()

    def synth_config(self, seed: int | None = None) -> SynthConfig:
        return SynthConfig(
            n_ids=self.n_ids,
            outfits_per_id=self.outfits_per_id,
            samples_per_outfit=self.samples_per_outfit,
            n_cameras=self.n_cameras,
            d_id=self.d_id,
            d_c=self.d_c,
            d_obs=self.d_obs,
            noise_std=self.noise_std,
            id_occlusion_rate=self.id_occlusion_rate,
            clothes_occlusion_rate=self.clothes_occlusion_rate,
            clothes_scale=self.clothes_scale,
            mixing=self.mixing,
            seed=self.seed if seed is None else seed,
        )

    def model_config(self, d_in: int, n_classes: int, seed: int | None = None, kind: str | None = None) -> ModelConfig:
        return ModelConfig(
            d_in=d_in,
            n_classes=n_classes,
            dim=self.dim,
            hidden=tuple(self.hidden),
            kind=kind or self.model,
            whitening=self.whitening,
            ns_iters=self.ns_iters,
            eps=self.eps,
            momentum=self.momentum,
            gate=self.gate,
            gate_reduction=self.gate_reduction,
            seed=self.seed if seed is None else seed,
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            P=self.P,
            K=self.K,
            epochs=self.epochs,
            lr0=self.lr0,
            lr_decay_every=self.lr_decay_every,
            lr_decay_factor=self.lr_decay_factor,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            seed=self.seed if seed is None else seed,
        )


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "str":
            return raw
        items = [v.strip() for v in raw.split(",") if v.strip()]
        if kind == "tuple[int, ...]":
            return tuple(int(v) for v in items)
        if kind == "tuple[float, ...]":
            return tuple(float(v) for v in items)
        return tuple(items)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def parse_overrides(pairs: dict[str, str]) -> dict:
    out = {}
    for key, raw in pairs.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def read_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        pairs[key] = value.strip()
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_overrides(read_config_text(p.read_text(encoding="utf-8"), str(p))))
    values.update(parse_overrides(overrides or {}))
    return ExperimentConfig(**values)


def format_config(cfg: ExperimentConfig, header: list[str] | None = None) -> str:
    lines = [f"# {h}" for h in header or []]
    for f in fields(ExperimentConfig):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def manifest_text(cfg: ExperimentConfig, command: str) -> str:
    """Config snapshot that reproduces a command's outputs when passed back
    via ``--config``."""
    versions = " ".join(f"{k}={v}" for k, v in FORMAT_VERSIONS.items())
    header = ["divnorm experiment manifest", f"command: {command}", f"seed: {cfg.seed}", f"formats: {versions}"]
    return format_config(cfg, header)
