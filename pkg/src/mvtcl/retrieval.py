"""Distance ranking and the retrieval metric suite (NN, FT, ST, E, DCG, NDCG,
mAP, PR-AUC, F-measure) with micro/macro aggregation.

The per-metric cores operate on a binary relevance array over a ranked list
plus R, the number of relevant items in the database; R may exceed the number
of relevant items present in the list. Every metric lies in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

E_MEASURE_CUTOFF = 32  # SHREC convention; shortened to the list length

METRIC_KEYS = ("nn", "ft", "st", "e", "dcg", "map", "auc", "f1")


@dataclass
class EmbeddingSet:
    """Parallel id/class/subcat/domain lists over an n x d feature matrix."""

    ids: list[str]
    classes: np.ndarray
    subcats: np.ndarray
    domains: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.subcats = np.asarray(self.subcats, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        n = len(self.ids)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ContractViolation("features must be n x d with one row per id")
        for name in ("classes", "subcats", "domains"):
            if getattr(self, name).shape != (n,):
                raise ContractViolation(f"{name} must be parallel to ids")
        if not np.all(np.isfinite(self.features)):
            raise ContractViolation("features contain non-finite values")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_objects(cls, objects, features) -> "EmbeddingSet":
        return cls(ids=[o.id for o in objects],
                   classes=[o.label for o in objects],
                   subcats=[o.subcat for o in objects],
                   domains=[o.domain for o in objects],
                   features=features)


@dataclass
class Ranking:
    """One query's ordered candidates (ascending distance, ties by id)."""

    query_id: str
    ids: list[str]
    distances: np.ndarray


def rank_all(queries: EmbeddingSet, database: EmbeddingSet,
             metric: str = "euclidean") -> list[Ranking]:
    """Ranks every database item for every query; self-matches removed by id.

    Euclidean distance by default; cosine distance (1 - cosine similarity) as
    an option. Ties order by ascending candidate id, so rankings are
    deterministic.
    """
    if queries.features.shape[1] != database.features.shape[1]:
        raise ContractViolation("query and database dimensions differ")
    if metric == "euclidean":
        diff = queries.features[:, None, :] - database.features[None, :, :]
        dists = np.sqrt(np.einsum("qnd,qnd->qn", diff, diff))
    elif metric == "cosine":
        qn = np.linalg.norm(queries.features, axis=1, keepdims=True)
        dn = np.linalg.norm(database.features, axis=1, keepdims=True)
        qn = np.where(qn == 0.0, 1.0, qn)
        dn = np.where(dn == 0.0, 1.0, dn)
        sims = (queries.features / qn) @ (database.features / dn).T
        dists = 1.0 - sims
    else:
        raise ContractViolation(f"unknown distance metric {metric!r}")

    rankings = []
    db_ids = database.ids
    for qi, qid in enumerate(queries.ids):
        order = sorted(range(len(db_ids)),
                       key=lambda j: (dists[qi, j], db_ids[j]))
        kept = [j for j in order if db_ids[j] != qid]
        rankings.append(Ranking(query_id=qid,
                                ids=[db_ids[j] for j in kept],
                                distances=dists[qi, kept]))
    return rankings


# ---------------------------------------------------------------------------
# Metric cores over binary relevance flags.

def _flags(rel) -> np.ndarray:
    flags = np.asarray(rel, dtype=np.float64)
    if flags.ndim != 1:
        raise ContractViolation("relevance flags must be 1-D")
    return flags


def average_precision(rel, total_relevant: int) -> float:
    """AP = (1/R) * sum over relevant ranks k of precision@k."""
    flags = _flags(rel)
    if total_relevant < 1:
        raise ContractViolation("average precision needs at least one relevant item")
    cum = np.cumsum(flags)
    ranks = np.arange(1, flags.size + 1)
    return float(np.sum(flags * cum / ranks) / total_relevant)


def pr_auc(rel, total_relevant: int) -> float:
    """Trapezoidal area under the precision-recall points taken at each
    relevant rank, with an initial point (recall 0, precision@1)."""
    flags = _flags(rel)
    if total_relevant < 1:
        raise ContractViolation("PR-AUC needs at least one relevant item")
    if flags.size == 0:
        return 0.0
    cum = np.cumsum(flags)
    ranks = np.arange(1, flags.size + 1)
    hit = flags > 0
    recalls = np.concatenate([[0.0], cum[hit] / total_relevant])
    precisions = np.concatenate([[flags[0]], cum[hit] / ranks[hit]])
    return float(np.trapezoid(precisions, recalls))


def shrec_suite(rel, total_relevant: int):
    """(NN, FT, ST, E, DCG) per the SHREC evaluation conventions.

    FT/ST are recall within the top R / top 2R (ST capped at 1). E is the
    harmonic mean of precision and recall at cutoff min(32, list length). DCG
    discounts by 1/log2(i) from rank 2 and normalizes by the ideal ordering.
    """
    flags = _flags(rel)
    R = total_relevant
    if R < 1:
        raise ContractViolation("SHREC metrics need at least one relevant item")
    n = flags.size
    nn = float(flags[0]) if n else 0.0
    ft = float(flags[:R].sum() / R)
    st = min(float(flags[:2 * R].sum() / R), 1.0)

    c = min(E_MEASURE_CUTOFF, n)
    if c == 0:
        e = 0.0
    else:
        p = flags[:c].sum() / c
        r = flags[:c].sum() / R
        e = 0.0 if (p == 0.0 or r == 0.0) else float(2.0 / (1.0 / p + 1.0 / r))

    discounts = np.ones(n)
    if n > 1:
        discounts[1:] = 1.0 / np.log2(np.arange(2, n + 1))
    dcg_val = float(np.sum(flags * discounts))
    ideal_flags = np.zeros(n)
    ideal_flags[:min(R, n)] = 1.0
    ideal = float(np.sum(ideal_flags * discounts))
    dcg = dcg_val / ideal if ideal > 0 else 0.0
    return nn, ft, st, e, dcg


def ndcg_graded(grades, cutoff: int | None = None) -> float:
    """Normalized DCG with graded gains and 1/log2(i+1) discounts.

    Grades are 2 (same subcategory), 1 (same category, different
    subcategory), or 0. Cutoff defaults to the full list.
    """
    g = np.asarray(grades, dtype=np.float64)
    if g.ndim != 1:
        raise ContractViolation("grades must be 1-D")
    if not np.any(g > 0):
        raise ContractViolation("NDCG needs at least one nonzero grade")
    c = g.size if cutoff is None else min(cutoff, g.size)
    discounts = 1.0 / np.log2(np.arange(2, c + 2))
    dcg = float(np.sum(g[:c] * discounts))
    ideal_sorted = np.sort(g)[::-1]
    idcg = float(np.sum(ideal_sorted[:c] * discounts))
    return dcg / idcg


def f_measure(rel, total_relevant: int, cutoff: int | None = None) -> float:
    """Harmonic mean of precision and recall at `cutoff` (default: R)."""
    flags = _flags(rel)
    R = total_relevant
    if R < 1:
        raise ContractViolation("F-measure needs at least one relevant item")
    c = R if cutoff is None else cutoff
    c = min(c, flags.size)
    if c == 0:
        return 0.0
    hits = flags[:c].sum()
    p = hits / c
    r = hits / R
    if p == 0.0 or r == 0.0:
        return 0.0
    return float(2.0 * p * r / (p + r))


# ---------------------------------------------------------------------------
# Per-query evaluation and aggregation.

@dataclass
class MetricReport:
    """Per-query metric values with micro/macro aggregates.

    micro averages over queries; macro averages the per-class query means.
    """

    per_query: dict[str, list[float]]
    query_classes: list[int]
    micro: dict[str, float] = field(default_factory=dict)
    macro: dict[str, float] = field(default_factory=dict)
    per_class: dict[str, dict[int, float]] = field(default_factory=dict)
    excluded_queries: int = 0

    def to_json_dict(self) -> dict:
        metrics = {}
        for key in self.per_query:
            metrics[key] = {
                "micro": self.micro[key],
                "macro": self.macro[key],
                "per_class": {str(k): v for k, v in sorted(self.per_class[key].items())},
            }
        return {"metrics": metrics,
                "diagnostics": {"excluded_queries": self.excluded_queries,
                                "num_queries": len(self.query_classes)}}

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def aggregate(per_query: dict[str, list[float]], classes) -> MetricReport:
    """Micro (mean over queries) and macro (mean of per-class means) aggregates."""
    classes = list(classes)
    lengths = {len(v) for v in per_query.values()}
    if len(lengths) > 1 or (lengths and lengths.pop() != len(classes)):
        raise ContractViolation("per-query metric lists must parallel the classes")
    if not classes:
        raise ContractViolation("cannot aggregate an empty report")
    report = MetricReport(per_query=per_query, query_classes=classes)
    class_ids = sorted(set(classes))
    for key, values in per_query.items():
        vals = np.asarray(values, dtype=np.float64)
        report.micro[key] = float(vals.mean())
        by_class = {}
        for c in class_ids:
            mask = np.asarray([cl == c for cl in classes])
            by_class[c] = float(vals[mask].mean())
        report.per_class[key] = by_class
        report.macro[key] = float(np.mean([by_class[c] for c in class_ids]))
    return report


def evaluate(queries: EmbeddingSet, database: EmbeddingSet, graded: bool = False,
             metric: str = "euclidean") -> MetricReport:
    """Ranks and scores every query against the database.

    Relevance is same-class membership; queries whose class is absent from
    the database (R = 0) are excluded and counted in the diagnostics. With
    `graded`, NDCG uses subcategory grades (2 same subcat, 1 same class).
    """
    rankings = rank_all(queries, database, metric=metric)
    db_class = {i: c for i, c in zip(database.ids, database.classes.tolist())}
    db_subcat = {i: s for i, s in zip(database.ids, database.subcats.tolist())}

    keys = list(METRIC_KEYS) + (["ndcg"] if graded else [])
    per_query: dict[str, list[float]] = {k: [] for k in keys}
    kept_classes: list[int] = []
    excluded = 0
    for qi, ranking in enumerate(rankings):
        q_class = int(queries.classes[qi])
        q_subcat = int(queries.subcats[qi])
        rel = np.asarray([1.0 if db_class[i] == q_class else 0.0
                          for i in ranking.ids])
        R = int(rel.sum())
        if R == 0:
            excluded += 1
            continue
        nn, ft, st, e, dcg = shrec_suite(rel, R)
        per_query["nn"].append(nn)
        per_query["ft"].append(ft)
        per_query["st"].append(st)
        per_query["e"].append(e)
        per_query["dcg"].append(dcg)
        per_query["map"].append(average_precision(rel, R))
        per_query["auc"].append(pr_auc(rel, R))
        per_query["f1"].append(f_measure(rel, R))
        if graded:
            grades = np.asarray([
                2.0 if (db_class[i] == q_class and db_subcat[i] == q_subcat)
                else 1.0 if db_class[i] == q_class else 0.0
                for i in ranking.ids])
            per_query["ndcg"].append(ndcg_graded(grades))
        kept_classes.append(q_class)

    if not kept_classes:
        raise ContractViolation("no query had a relevant item in the database")
    report = aggregate(per_query, kept_classes)
    report.excluded_queries = excluded
    return report


# ---------------------------------------------------------------------------
# Embedding CSV interchange.

def write_embeddings_csv(embedding_set: EmbeddingSet, path, pca2: bool = False) -> None:
    """CSV with header id,class,subcat,domain,f_0..f_{d-1}; `pca2` appends a
    2-d principal-component projection (columns pca_0, pca_1)."""
    feats = embedding_set.features
    d = feats.shape[1]
    proj = None
    if pca2:
        centered = feats - feats.mean(axis=0, keepdims=True)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        proj = centered @ vt[:2].T
    header = ["id", "class", "subcat", "domain"] + [f"f_{k}" for k in range(d)]
    if proj is not None:
        header += ["pca_0", "pca_1"]
    lines = [",".join(header)]
    for i, oid in enumerate(embedding_set.ids):
        row = [oid, str(int(embedding_set.classes[i])),
               str(int(embedding_set.subcats[i])), str(int(embedding_set.domains[i]))]
        row += [repr(float(x)) for x in feats[i]]
        if proj is not None:
            row += [repr(float(x)) for x in proj[i]]
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_embeddings_csv(path) -> EmbeddingSet:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ContractViolation(f"{path}: empty embeddings file")
    header = lines[0].split(",")
    if header[:4] != ["id", "class", "subcat", "domain"]:
        raise ContractViolation(f"{path}: unexpected embeddings header")
    feat_cols = [i for i, name in enumerate(header) if name.startswith("f_")]
    ids, classes, subcats, domains, feats = [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise ContractViolation(f"{path}:{lineno}: wrong number of columns")
        ids.append(parts[0])
        classes.append(int(parts[1]))
        subcats.append(int(parts[2]))
        domains.append(int(parts[3]))
        feats.append([float(parts[i]) for i in feat_cols])
    return EmbeddingSet(ids=ids, classes=classes, subcats=subcats,
                        domains=domains, features=np.asarray(feats))
