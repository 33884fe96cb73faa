"""Integration and imputation quality metrics.

All nearest-neighbor computations are exact: full Euclidean distance
matrix, stable ordering, distance ties broken by ascending cell index,
never a self-neighbor.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

DEFAULT_K_SWEEP = (10, 20, 50, 100, 200)
REF_FLOOR = 1e-6


def default_k_sweep(n_cells) -> list:
    """The standard k values, clipped to n-1 and deduplicated."""
    if n_cells < 2:
        raise ContractError("need at least 2 cells for a neighbor sweep")
    return sorted({min(k, n_cells - 1) for k in DEFAULT_K_SWEEP})


def knn_graph(points, k) -> np.ndarray:
    """Indices of the k nearest neighbors per row, shape (n, k)."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise ContractError("points must be a 2D array")
    n = points.shape[0]
    if not 0 < k < n:
        raise ContractError(f"k must satisfy 0 < k < n_cells, got k={k}, n={n}")
    sq = (points * points).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (points @ points.T)
    np.fill_diagonal(d2, np.inf)
    # exact distances so equal points tie at 0; stable sort keeps index order
    d2 = np.maximum(d2, 0.0)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


def mixing_kl(embedding, labels, k) -> float:
    """Negative mean KL(local label mix || global label mix); 0 is best.

    Local neighborhood frequencies are smoothed additively with
    eps = 1/(k+2) per label so the KL stays finite when a label is
    absent from a neighborhood; the global side is unsmoothed.
    """
    labels = np.asarray(labels)
    values = np.unique(labels)
    if values.size < 2:
        raise ContractError("mixing_kl needs at least two label values present")
    neighbors = knn_graph(embedding, k)
    n = labels.size
    eps = 1.0 / (k + 2)
    p_global = np.array([(labels == v).mean() for v in values])
    onehot = (labels[:, None] == values[None, :]).astype(float)
    local_counts = onehot[neighbors].sum(axis=1)
    p_local = (local_counts + eps) / (k + values.size * eps)
    kl = (p_local * np.log(p_local / p_global[None, :])).sum(axis=1)
    return float(-kl.mean())


def knn_purity_jaccard(embedding_a, embedding_b, k) -> float:
    """Mean Jaccard overlap of per-cell k-NN sets across two embeddings.

    Both embeddings must describe the same cells in the same row order
    (call once per dataset and average when comparing joint vs
    single-dataset references).
    """
    a = np.asarray(embedding_a, dtype=float)
    b = np.asarray(embedding_b, dtype=float)
    if a.shape[0] != b.shape[0]:
        raise ContractError(
            f"embeddings describe different cell sets: {a.shape[0]} vs {b.shape[0]}"
        )
    na = knn_graph(a, k)
    nb = knn_graph(b, k)
    scores = np.empty(a.shape[0])
    for i in range(a.shape[0]):
        sa, sb = set(na[i]), set(nb[i])
        scores[i] = len(sa & sb) / len(sa | sb)
    return float(scores.mean())


def _average_ranks(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    order = np.argsort(v, kind="stable")
    sv = v[order]
    ranks = np.empty(v.size)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a, b):
    """Rank correlation with average-rank ties; None when undefined."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError("spearman needs two equal-length vectors")
    if a.size < 3:
        raise ContractError("spearman needs at least 3 observations")
    ra, rb = _average_ranks(a), _average_ranks(b)
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = math.sqrt(float((da * da).sum()) * float((db * db).sum()))
    if denom == 0.0:
        return None  # constant input: correlation undefined, report missing
    return float((da * db).sum() / denom)


@dataclass
class RelativeChange:
    per_gene: dict
    median: float
    n_excluded: int


def relative_change(scores_method, scores_reference) -> RelativeChange:
    """Per-gene (method - reference) / |reference| and its median.

    Genes with |reference| < 1e-6 or an undefined score on either side
    are excluded from the median and counted.
    """
    genes = [g for g in scores_method if g in scores_reference]
    if not genes:
        raise ContractError("no genes shared between method and reference scores")
    per_gene = {}
    excluded = 0
    for g in genes:
        m, r = scores_method[g], scores_reference[g]
        if m is None or r is None or abs(r) < REF_FLOOR:
            excluded += 1
            continue
        per_gene[g] = (m - r) / abs(r)
    med = float(np.median(list(per_gene.values()))) if per_gene else math.nan
    return RelativeChange(per_gene, med, excluded)


# ---------------------------------------------------------------------------
# Report container


@dataclass
class EvalReport:
    """Rows for (metric, k) curves and per-(gene, method) scores."""

    metric_rows: list = field(default_factory=list)
    gene_rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add_metric(self, metric, k, value):
        self.metric_rows.append({"metric": metric, "k": int(k),
                                 "value": float(value)})

    def add_gene(self, gene, method, rho, delta_rho=None):
        self.gene_rows.append({
            "gene": gene,
            "method": method,
            "spearman": None if rho is None else float(rho),
            "delta_rho": None if delta_rho is None else float(delta_rho),
        })

    def to_json(self) -> str:
        doc = {
            "metrics": self.metric_rows,
            "genes": self.gene_rows,
            "summary": self.summary,
        }
        return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False)

    def write(self, json_path, metrics_csv_path, genes_csv_path) -> None:
        with open(json_path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")
        with open(metrics_csv_path, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["metric", "k", "value"])
            w.writeheader()
            for row in self.metric_rows:
                w.writerow({**row, "value": repr(row["value"])})
        with open(genes_csv_path, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["gene", "method", "spearman",
                                               "delta_rho"])
            w.writeheader()
            for row in self.gene_rows:
                out = dict(row)
                for key in ("spearman", "delta_rho"):
                    out[key] = "" if out[key] is None else repr(out[key])
                w.writerow(out)
