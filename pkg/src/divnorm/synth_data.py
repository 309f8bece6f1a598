"""Synthetic cloth-changing data, the drop-outfits ablation, and CSV I/O.

Each observation is ``x = A @ [z_id; z_c] + noise`` where ``z_id`` is drawn
once per person and ``z_c`` once per outfit. ``A`` has orthonormal columns,
with the clothing columns scaled by ``clothes_scale`` so that clothing
dominates the raw signal.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .numerics import SeededRng

SPLITS = ("train", "query", "gallery")
META_COLUMNS = ("sample_id", "person_id", "clothes_id", "camera_id", "split")


@dataclass(frozen=True)
class SampleMeta:
    sample_id: int
    person_id: int
    clothes_id: int
    camera_id: int
    split: str


@dataclass(frozen=True)
class SynthConfig:
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
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_ids", "samples_per_outfit", "n_cameras", "d_id", "d_c", "d_obs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.outfits_per_id < 2:
            raise ConfigError("outfits_per_id must be >= 2 so query and gallery get distinct outfits")
        if self.d_obs < self.d_id + self.d_c:
            raise ConfigError("d_obs must be >= d_id + d_c")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        for name in ("id_occlusion_rate", "clothes_occlusion_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.mixing not in ("random", "identity"):
            raise ConfigError(f"unknown mixing {self.mixing!r}")


@dataclass
class Dataset:
    features: np.ndarray
    meta: list[SampleMeta]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.meta):
            raise ConfigError(
                f"feature rows ({self.features.shape[0]}) and metadata rows ({len(self.meta)}) differ"
            )

    def __len__(self):
        return len(self.meta)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and self.meta == other.meta
        )

    def column(self, name: str) -> np.ndarray:
        if name == "split":
            return np.array([m.split for m in self.meta])
        return np.array([getattr(m, name) for m in self.meta], dtype=np.int64)

    def split_indices(self, split: str) -> np.ndarray:
        return np.array([i for i, m in enumerate(self.meta) if m.split == split], dtype=np.int64)

    def person_ids(self) -> list[int]:
        return sorted({m.person_id for m in self.meta})


def mixing_matrix(config: SynthConfig) -> np.ndarray:
    k = config.d_id + config.d_c
    if config.mixing == "identity":
        A = np.zeros((config.d_obs, k))
        A[:k, :k] = np.eye(k)
    else:
        rng = SeededRng(config.seed, 100)
        Q, R = np.linalg.qr(rng.normal(size=(config.d_obs, k)))
        A = Q * np.sign(np.diag(R))
    A[:, config.d_id :] *= config.clothes_scale
    return A


def generate(config: SynthConfig) -> Dataset:
    config.validate()
    rng = SeededRng(config.seed, 200)
    A = mixing_matrix(config)
    A_id, A_c = A[:, : config.d_id], A[:, config.d_id :]
    rows, meta = [], []
    sid = 0
    for pid in range(config.n_ids):
        z_id = rng.normal(size=config.d_id)
        order = rng.permutation(config.outfits_per_id)
        roles = {int(order[0]): "gallery", int(order[1]): "query"}
        for o in range(config.outfits_per_id):
            z_c = rng.normal(size=config.d_c)
            clothes_id = pid * config.outfits_per_id + o
            split = roles.get(o, "train")
            for s in range(config.samples_per_outfit):
                keep_id = rng.random() >= config.id_occlusion_rate
                keep_c = rng.random() >= config.clothes_occlusion_rate
                noise = rng.normal(size=config.d_obs) * config.noise_std
                x = noise
                if keep_id:
                    x = x + A_id @ z_id
                if keep_c:
                    x = x + A_c @ z_c
                camera = (o * config.samples_per_outfit + s) % config.n_cameras
                rows.append(x)
                meta.append(SampleMeta(sid, pid, clothes_id, camera, split))
                sid += 1
    return Dataset(np.array(rows), meta, {"kind": "synthetic", "config": asdict(config)})


def drop_outfits(ds: Dataset, keep_fraction: float, seed: int) -> Dataset:
    """Keep ``ceil(keep_fraction * m)`` (at least 1) of each person's ``m``
    training outfits; query and gallery samples are never touched."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError("keep_fraction must lie in (0, 1]")
    rng = SeededRng(seed, 300)
    outfits: dict[int, list[int]] = {}
    for m in ds.meta:
        if m.split == "train":
            lst = outfits.setdefault(m.person_id, [])
            if m.clothes_id not in lst:
                lst.append(m.clothes_id)
    kept = set()
    for pid in sorted(outfits):
        cids = sorted(outfits[pid])
        n_keep = max(1, math.ceil(keep_fraction * len(cids) - 1e-12))
        chosen = rng.choice(len(cids), size=n_keep, replace=False)
        kept.update(cids[int(i)] for i in chosen)
    keep_rows = [i for i, m in enumerate(ds.meta) if m.split != "train" or m.clothes_id in kept]
    prov = dict(ds.provenance)
    prov["drop_outfits"] = {"keep_fraction": keep_fraction, "seed": seed}
    return Dataset(ds.features[keep_rows], [ds.meta[i] for i in keep_rows], prov)


def format_float(v: float) -> str:
    return f"{v:.17g}"


def dataset_to_csv(ds: Dataset) -> str:
    d = ds.features.shape[1]
    buf = io.StringIO()
    header = [*META_COLUMNS, *(f"f{j}" for j in range(d))]
    buf.write(",".join(header) + "\n")
    for m, row in zip(ds.meta, ds.features):
        fields = [str(m.sample_id), str(m.person_id), str(m.clothes_id), str(m.camera_id), m.split]
        fields.extend(format_float(v) for v in row)
        buf.write(",".join(fields) + "\n")
    return buf.getvalue()


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dataset_to_csv(ds), encoding="utf-8", newline="\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        ds = parse_dataset(fh)
    ds.provenance = {"kind": "ingested", "path": str(path)}
    return ds


def parse_dataset(lines) -> Dataset:
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file: missing header", line=1) from None
    for col in META_COLUMNS:
        if col not in header:
            raise ParseError(f"header is missing required column {col!r}", line=1)
    if list(header[: len(META_COLUMNS)]) != list(META_COLUMNS):
        raise ParseError(f"header must start with {','.join(META_COLUMNS)}", line=1)
    feat_cols = header[len(META_COLUMNS) :]
    if not feat_cols:
        raise ParseError("header has no feature columns", line=1)
    for j, name in enumerate(feat_cols):
        if name != f"f{j}":
            raise ParseError(f"expected feature column f{j}, got {name!r}", line=1)
    width = len(header)
    meta, rows = [], []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != width:
            raise ParseError(f"expected {width} columns, got {len(rec)}", line=lineno)
        try:
            ints = [int(v) for v in rec[:4]]
        except ValueError as exc:
            raise ParseError(f"non-integer metadata field ({exc})", line=lineno) from None
        split = rec[4]
        if split not in SPLITS:
            raise ParseError(f"split must be one of train|query|gallery, got {split!r}", line=lineno)
        try:
            feats = [float(v) for v in rec[5:]]
        except ValueError as exc:
            raise ParseError(f"non-numeric feature ({exc})", line=lineno) from None
        if not all(math.isfinite(v) for v in feats):
            raise ParseError("non-finite feature value", line=lineno)
        meta.append(SampleMeta(*ints, split))
        rows.append(feats)
    features = np.array(rows, dtype=np.float64).reshape(len(rows), len(feat_cols))
    _check_clothes_owner(meta)
    return Dataset(features, meta)


def _check_clothes_owner(meta) -> None:
    owner: dict[int, int] = {}
    for m in meta:
        if owner.setdefault(m.clothes_id, m.person_id) != m.person_id:
            raise ParseError(f"clothes_id {m.clothes_id} belongs to more than one person_id")
