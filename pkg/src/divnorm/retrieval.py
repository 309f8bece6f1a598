"""Query-vs-gallery retrieval with two-branch cosine scoring and mAP/CMC."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .synth_data import Dataset, SampleMeta

log = logging.getLogger(__name__)

PROTOCOLS = ("general", "sc", "cc")
STRATEGIES = ("sim_sum", "feat_sum")
EXCLUDED, VALID_NONMATCH, VALID_MATCH = 0, 1, 2
REPORT_HEADER = "protocol,strategy,mAP,rank1,rank5,rank10,n_queries"
DETAIL_HEADER = "query_sample_id,AP,first_match_rank"


@dataclass
class BranchFeatureStore:
    h_id: np.ndarray
    h_c: np.ndarray
    meta: list[SampleMeta]

    def __post_init__(self):
        if self.h_id.shape != self.h_c.shape or self.h_id.shape[0] != len(self.meta):
            raise ConfigError("branch feature arrays and metadata disagree in shape")
        if not (np.all(np.isfinite(self.h_id)) and np.all(np.isfinite(self.h_c))):
            raise ConfigError("branch features contain non-finite entries")

    def subset(self, idx) -> "BranchFeatureStore":
        return BranchFeatureStore(self.h_id[idx], self.h_c[idx], [self.meta[i] for i in idx])


@dataclass
class EvalReport:
    protocol: str
    strategy: str
    mAP: float
    cmc: np.ndarray
    n_queries_evaluated: int
    n_queries_skipped: int = 0
    per_query: list[tuple[int, float, int]] = field(default_factory=list, repr=False)

    def rank(self, k: int) -> float:
        if self.n_queries_evaluated == 0:
            return float("nan")
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def csv_row(self) -> str:
        return ",".join(
            [
                self.protocol,
                self.strategy,
                repr(float(self.mAP)),
                repr(self.rank(1)),
                repr(self.rank(5)),
                repr(self.rank(10)),
                str(self.n_queries_evaluated),
            ]
        )


def cosine_matrix(a, b):
    """Pairwise cosine; rows with zero norm give 0 and are reported."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero_a, zero_b = na == 0, nb == 0
    if zero_a.any() or zero_b.any():
        log.debug("zero-norm vectors: %d query, %d gallery", zero_a.sum(), zero_b.sum())
    sa = np.where(zero_a, 1.0, na)
    sb = np.where(zero_b, 1.0, nb)
    return (a / sa[:, None]) @ (b / sb[:, None]).T


def _cos(u, v) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        log.debug("zero-norm vector in cosine term; term set to 0")
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def branch_similarity(q_id, q_c, g_id, g_c, strategy: str = "sim_sum") -> float:
    if strategy == "sim_sum":
        return 0.5 * (_cos(q_id, g_id) + _cos(q_c, g_c))
    if strategy == "feat_sum":
        return _cos(np.add(q_id, q_c), np.add(g_id, g_c))
    raise ConfigError(f"unknown strategy {strategy!r}")


def similarity_matrix(query: BranchFeatureStore, gallery: BranchFeatureStore, strategy: str):
    if strategy == "sim_sum":
        return 0.5 * (cosine_matrix(query.h_id, gallery.h_id) + cosine_matrix(query.h_c, gallery.h_c))
    if strategy == "feat_sum":
        return cosine_matrix(query.h_id + query.h_c, gallery.h_id + gallery.h_c)
    raise ConfigError(f"unknown strategy {strategy!r}")


def protocol_mask(q: SampleMeta, g: SampleMeta, protocol: str) -> int:
    same_person = q.person_id == g.person_id
    if same_person:
        same_cam = q.camera_id == g.camera_id
        same_clothes = q.clothes_id == g.clothes_id
        if protocol == "general":
            excluded = same_cam
        elif protocol == "cc":
            excluded = same_cam or same_clothes
        elif protocol == "sc":
            excluded = same_cam or not same_clothes
        else:
            raise ConfigError(f"unknown protocol {protocol!r}")
        if excluded:
            return EXCLUDED
        return VALID_MATCH
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}")
    return VALID_NONMATCH


def protocol_mask_matrix(qmeta, gmeta, protocol: str) -> np.ndarray:
    """Vectorised :func:`protocol_mask` over all query/gallery pairs."""
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}")
    qp = np.array([m.person_id for m in qmeta])[:, None]
    gp = np.array([m.person_id for m in gmeta])[None, :]
    qc = np.array([m.camera_id for m in qmeta])[:, None]
    gc = np.array([m.camera_id for m in gmeta])[None, :]
    qo = np.array([m.clothes_id for m in qmeta])[:, None]
    go = np.array([m.clothes_id for m in gmeta])[None, :]
    same_person = qp == gp
    same_cam = qc == gc
    same_clothes = qo == go
    if protocol == "general":
        excluded = same_person & same_cam
    elif protocol == "cc":
        excluded = same_person & (same_cam | same_clothes)
    else:
        excluded = same_person & (same_cam | ~same_clothes)
    out = np.where(same_person, VALID_MATCH, VALID_NONMATCH)
    out[excluded] = EXCLUDED
    return out


def rank_query(scores, mask, gallery_ids):
    """Rank one query's gallery: descending score, ties by sample id.

    Returns relevance flags (True for a valid match) over the non-excluded
    gallery in rank order.
    """
    order = np.lexsort((gallery_ids, -np.asarray(scores)))
    m = np.asarray(mask)[order]
    return m[m != EXCLUDED] == VALID_MATCH


def average_precision(relevant) -> float:
    relevant = np.asarray(relevant, dtype=bool)
    hits = np.flatnonzero(relevant)
    if hits.size == 0:
        return float("nan")
    precision_at_hit = np.arange(1, hits.size + 1) / (hits + 1)
    return float(precision_at_hit.mean())


def rank_metrics(ranked_relevance, max_rank: int | None = None):
    """AP per query and the CMC curve.

    ``ranked_relevance`` holds one boolean array per query, already in rank
    order with excluded gallery items removed. Queries with no valid match
    are skipped; their AP is reported as NaN.
    """
    aps, first = [], []
    longest = max((len(r) for r in ranked_relevance), default=0)
    max_rank = longest if max_rank is None else max_rank
    for rel in ranked_relevance:
        rel = np.asarray(rel, dtype=bool)
        if not rel.any():
            aps.append(float("nan"))
            first.append(-1)
            continue
        aps.append(average_precision(rel))
        first.append(int(np.argmax(rel)) + 1)
    aps = np.array(aps)
    first = np.array(first, dtype=np.int64)
    valid = first > 0
    cmc = np.zeros(max(max_rank, 1))
    if valid.any():
        for r in first[valid]:
            if r <= len(cmc):
                cmc[r - 1 :] += 1
        cmc /= valid.sum()
    return aps, cmc, first


def evaluate_store(store: BranchFeatureStore, protocol: str, strategy: str, max_rank: int = 50) -> EvalReport:
    splits = [m.split for m in store.meta]
    q_idx = [i for i, s in enumerate(splits) if s == "query"]
    g_idx = [i for i, s in enumerate(splits) if s == "gallery"]
    if not q_idx or not g_idx:
        raise ConfigError("evaluation needs non-empty query and gallery splits")
    query, gallery = store.subset(q_idx), store.subset(g_idx)
    sims = similarity_matrix(query, gallery, strategy)
    mask = protocol_mask_matrix(query.meta, gallery.meta, protocol)
    gallery_ids = np.array([m.sample_id for m in gallery.meta])
    ranked = [rank_query(sims[i], mask[i], gallery_ids) for i in range(len(q_idx))]
    aps, cmc, first = rank_metrics(ranked, max_rank=max_rank)
    valid = first > 0
    skipped = int((~valid).sum())
    if skipped:
        log.warning("%s/%s: %d queries have no valid match and were skipped", protocol, strategy, skipped)
    mAP = float(aps[valid].mean()) if valid.any() else float("nan")
    per_query = [(query.meta[i].sample_id, float(aps[i]), int(first[i])) for i in range(len(q_idx))]
    return EvalReport(protocol, strategy, mAP, cmc, int(valid.sum()), skipped, per_query)


def build_store(model, ds: Dataset, splits=("query", "gallery")) -> BranchFeatureStore:
    idx = [i for i, m in enumerate(ds.meta) if m.split in splits]
    h_id, h_c = model.embed(ds.features[idx])
    return BranchFeatureStore(h_id, h_c, [ds.meta[i] for i in idx])


def evaluate(model, ds: Dataset, protocol: str, strategy: str) -> EvalReport:
    for split in ("query", "gallery"):
        if not any(m.split == split for m in ds.meta):
            raise ConfigError(f"dataset has no {split} samples")
    return evaluate_store(build_store(model, ds), protocol, strategy)


def reports_to_csv(reports) -> str:
    return "\n".join([REPORT_HEADER, *(r.csv_row() for r in reports)]) + "\n"


def per_query_csv(report: EvalReport) -> str:
    lines = [DETAIL_HEADER]
    for sid, ap, first in report.per_query:
        lines.append(f"{sid},{ap!r},{first}")
    return "\n".join(lines) + "\n"
