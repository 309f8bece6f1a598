"""Identity-balanced batching, Adam, step schedule, checkpoints, training loop."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from decimal import Decimal
from pathlib import Path

import numpy as np

from .diverse_norm import ModelConfig, WhiteningState, build_model
from .errors import ConfigError, NonFiniteError, ParseError
from .numerics import SeededRng
from .synth_data import Dataset

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DIVNORM"
CHECKPOINT_VERSION = 1
LOG_HEADER = "epoch,loss_total,loss_id,loss_c,mean_w_c,lr"


@dataclass(frozen=True)
class TrainConfig:
    P: int = 8
    K: int = 8
    epochs: int = 30
    lr0: float = 3.5e-4
    lr_decay_every: int = 20
    lr_decay_factor: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    @property
    def batch_size(self) -> int:
        return self.P * self.K

    def validate(self) -> None:
        if self.P < 1 or self.K < 1:
            raise ConfigError("P and K must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr0 <= 0 or self.lr_decay_every < 1 or self.lr_decay_factor <= 0:
            raise ConfigError("invalid learning-rate schedule")


def train_labels(ds: Dataset):
    """Map train-split person ids to contiguous class indices."""
    pids = sorted({m.person_id for m in ds.meta if m.split == "train"})
    return {pid: i for i, pid in enumerate(pids)}


def pk_batches(ds: Dataset, P: int, K: int, rng: SeededRng) -> list[np.ndarray]:
    """One epoch of P-identities-by-K-samples index batches.

    The number of batches is enough to see every train sample once on
    average and every identity at least once. Identities are visited in
    shuffled order; one with fewer than K train samples is drawn with
    replacement.
    """
    by_pid: dict[int, list[int]] = {}
    for i, m in enumerate(ds.meta):
        if m.split == "train":
            by_pid.setdefault(m.person_id, []).append(i)
    if not by_pid:
        raise ConfigError("dataset has no train samples")
    pids = sorted(by_pid)
    if len(pids) < P:
        raise ConfigError(f"need at least P={P} train identities, found {len(pids)}")
    n_train = sum(len(v) for v in by_pid.values())
    n_batches = max(math.ceil(n_train / (P * K)), math.ceil(len(pids) / P))

    stream: list[int] = []
    deferred: list[int] = []
    batches = []
    for _ in range(n_batches):
        chosen: list[int] = []
        pending = deferred
        deferred = []
        while len(chosen) < P:
            if pending:
                pid = pending.pop(0)
            else:
                if not stream:
                    stream = [pids[j] for j in rng.permutation(len(pids))]
                pid = stream.pop(0)
            if pid in chosen:
                deferred.append(pid)
            else:
                chosen.append(pid)
        deferred.extend(pending)
        idx = []
        for pid in chosen:
            pool = by_pid[pid]
            picks = rng.choice(len(pool), size=K, replace=len(pool) < K)
            idx.extend(pool[int(j)] for j in picks)
        batches.append(np.array(idx, dtype=np.int64))
    return batches


def lr_at_epoch(epoch: int, config: TrainConfig) -> float:
    # decimal arithmetic so 3.5e-4 * 0.1 lands on 3.5e-5 exactly
    steps = epoch // config.lr_decay_every
    return float(Decimal(repr(config.lr0)) * Decimal(repr(config.lr_decay_factor)) ** steps)


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, config: TrainConfig) -> None:
    """In-place bias-corrected Adam update; ``state.t`` is advanced first."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in tensor {name!r}")
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    whitening: WhiteningState | None
    adam: AdamState
    epoch: int
    rng_state: dict
    version: int = CHECKPOINT_VERSION

    def build_model(self):
        model = build_model(self.model_config)
        for name, p in model.named_params().items():
            p.value = self.params[name].copy()
        if self.whitening is not None:
            model.whitening = self.whitening
        return model

    def to_bytes(self) -> bytes:
        return encode_checkpoint(self)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())


def snapshot(model, adam: AdamState, model_config, train_config, epoch: int) -> Checkpoint:
    return Checkpoint(
        model_config=model_config,
        train_config=train_config,
        params=model.get_flat(),
        whitening=model.whitening,
        adam=AdamState(adam.t, {k: v.copy() for k, v in adam.m.items()}, {k: v.copy() for k, v in adam.v.items()}),
        epoch=epoch,
        rng_state=_epoch_rng(train_config, epoch).state,
    )


def _epoch_rng(config: TrainConfig, epoch: int) -> SeededRng:
    return SeededRng(config.seed, 500, epoch)


def _tensor_table(ck: Checkpoint):
    table = [(f"param/{k}", v) for k, v in ck.params.items()]
    for k in ck.params:
        if k in ck.adam.m:
            table.append((f"adam_m/{k}", ck.adam.m[k]))
            table.append((f"adam_v/{k}", ck.adam.v[k]))
    if ck.whitening is not None:
        table.append(("whitening/running_mean", ck.whitening.running_mean))
        table.append(("whitening/running_cov", ck.whitening.running_cov))
    return table


def encode_checkpoint(ck: Checkpoint) -> bytes:
    """Binary layout (all integers little-endian)::

        "DIVNORM"            7 bytes magic
        version              uint32
        n_tensors            uint32
        n_tensors times:
            name_len         uint16, then name (UTF-8)
            rows, cols       uint32, uint32 (vectors are stored as 1 x d)
            values           rows*cols float64, row-major
        meta_len             uint32, then meta (UTF-8 JSON, sorted keys):
                             model/train config, epoch, adam step, whitening
                             scalars, tensor shapes, rng state
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    table = _tensor_table(ck)
    buf.write(struct.pack("<II", ck.version, len(table)))
    shapes = {}
    for name, arr in table:
        arr = np.asarray(arr, dtype="<f8")
        shapes[name] = list(arr.shape)
        mat = arr.reshape(1, -1) if arr.ndim == 1 else arr
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", *mat.shape))
        buf.write(np.ascontiguousarray(mat).tobytes())
    wh = None
    if ck.whitening is not None:
        w = ck.whitening
        wh = {"dim": w.dim, "momentum": w.momentum, "eps": w.eps, "T": w.T, "method": w.method, "num_updates": w.num_updates}
    meta = {
        "model_config": asdict(ck.model_config),
        "train_config": asdict(ck.train_config),
        "epoch": ck.epoch,
        "adam_t": ck.adam.t,
        "whitening": wh,
        "shapes": shapes,
        "rng": {"algorithm": SeededRng.algorithm, "state": ck.rng_state},
    }
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ParseError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(len(CHECKPOINT_MAGIC))) != CHECKPOINT_MAGIC:
        raise ParseError("not a DIVNORM checkpoint (bad magic)")
    version, n = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(n):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        tensors[name] = np.frombuffer(bytes(take(8 * rows * cols)), dtype="<f8").astype(np.float64)
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    shapes = meta["shapes"]
    tensors = {k: v.reshape(shapes[k]) for k, v in tensors.items()}

    mc = meta["model_config"]
    mc["hidden"] = tuple(mc["hidden"])
    model_config = ModelConfig(**mc)
    train_config = TrainConfig(**meta["train_config"])
    params = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
    adam = AdamState(
        t=meta["adam_t"],
        m={k[len("adam_m/") :]: v for k, v in tensors.items() if k.startswith("adam_m/")},
        v={k[len("adam_v/") :]: v for k, v in tensors.items() if k.startswith("adam_v/")},
    )
    whitening = None
    if meta["whitening"] is not None:
        whitening = WhiteningState(
            **meta["whitening"],
            running_mean=tensors["whitening/running_mean"],
            running_cov=tensors["whitening/running_cov"],
        )
    return Checkpoint(
        model_config=model_config,
        train_config=train_config,
        params=params,
        whitening=whitening,
        adam=adam,
        epoch=meta["epoch"],
        rng_state=meta["rng"]["state"],
        version=version,
    )


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def model_config_for(ds: Dataset, base: ModelConfig | None = None, **overrides) -> ModelConfig:
    n_classes = len(train_labels(ds))
    d_in = ds.features.shape[1]
    if base is None:
        return ModelConfig(d_in=d_in, n_classes=n_classes, **overrides)
    return replace(base, d_in=d_in, n_classes=n_classes, **overrides)


def train_run(
    ds: Dataset,
    model_config: ModelConfig,
    config: TrainConfig,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    log_rows: list | None = None,
) -> Checkpoint:
    """Train for ``config.epochs`` epochs (or until epoch ``stop_after``).

    ``resume`` continues from a saved checkpoint; ``log_rows`` receives one
    tuple per epoch matching :data:`LOG_HEADER`.
    """
    config.validate()
    labels = train_labels(ds)
    if not labels:
        raise ConfigError("dataset has no train split")
    if model_config.n_classes != len(labels) or model_config.d_in != ds.features.shape[1]:
        raise ConfigError("model config does not match the dataset (d_in / n_classes)")
    y_all = np.array([labels.get(m.person_id, -1) for m in ds.meta], dtype=np.int64)

    if resume is not None:
        model = resume.build_model()
        adam = resume.adam
        start = resume.epoch
    else:
        model = build_model(model_config)
        adam = AdamState()
        start = 0
    end = config.epochs if stop_after is None else min(stop_after, config.epochs)
    params = model.named_params()

    for epoch in range(start, end):
        lr = lr_at_epoch(epoch, config)
        batches = pk_batches(ds, config.P, config.K, _epoch_rng(config, epoch))
        totals, lid, lc, wc = [], [], [], []
        for b, idx in enumerate(batches):
            out = model.loss(ds.features[idx], y_all[idx])
            if not math.isfinite(out.total):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
            adam_step(params, out.grads, adam, lr, config)
            totals.append(out.total)
            lid.append(out.loss_id.mean())
            lc.append(out.loss_c.mean())
            wc.append(out.w_c.mean())
        row = (epoch, float(np.mean(totals)), float(np.mean(lid)), float(np.mean(lc)), float(np.mean(wc)), lr)
        log.info("epoch %d loss %.4f w_c %.3f lr %g", epoch, row[1], row[4], lr)
        if log_rows is not None:
            log_rows.append(row)
    return snapshot(model, adam, model_config, config, end)


def log_to_csv(rows) -> str:
    lines = [LOG_HEADER]
    for epoch, total, lid, lc, wc, lr in rows:
        lines.append(f"{epoch},{total!r},{lid!r},{lc!r},{wc!r},{lr!r}")
    return "\n".join(lines) + "\n"
