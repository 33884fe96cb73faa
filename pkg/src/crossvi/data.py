"""Count-matrix ingestion, gene panels, holdout splits, and the synthetic generator.

Two on-disk formats are supported. Dense CSV: first row is a corner
label followed by gene ids, each further row is a cell id followed by
counts; a spatial file may carry per-cell coordinates as two leading
columns literally named ``x`` and ``y``. Triplet: a ``cell gene count``
header then whitespace-separated ``cell_index gene_index count`` rows,
with one id per line in ``<path>.cells`` / ``<path>.genes`` sidecars.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, DataError, DomainError, ParseError

log = logging.getLogger(__name__)

RNA = "rna"
SPATIAL = "spatial"

COUNT_TOL = 1e-6


# ---------------------------------------------------------------------------
# Core containers


@dataclass(frozen=True)
class CountMatrix:
    """Immutable cells-by-genes count table for one modality."""

    cell_ids: tuple
    gene_ids: tuple
    counts: np.ndarray
    modality: str
    coords: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "cell_ids", tuple(self.cell_ids))
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        counts = np.asarray(self.counts, dtype=float)
        if self.modality not in (RNA, SPATIAL):
            raise DataError(f"unknown modality {self.modality!r}")
        if counts.ndim != 2 or counts.shape != (len(self.cell_ids), len(self.gene_ids)):
            raise DataError(
                f"counts shape {counts.shape} does not match "
                f"{len(self.cell_ids)} cells x {len(self.gene_ids)} genes"
            )
        if not np.all(np.isfinite(counts)):
            raise DataError("counts contain non-finite values")
        if counts.size and counts.min() < 0:
            raise DataError("counts contain negative values")
        snapped = np.rint(counts)
        if counts.size and np.abs(counts - snapped).max() > COUNT_TOL:
            raise DataError(f"counts deviate from integers by more than {COUNT_TOL}")
        if len(set(self.gene_ids)) != len(self.gene_ids):
            raise DataError("gene ids are not unique")
        if len(set(self.cell_ids)) != len(self.cell_ids):
            raise DataError("cell ids are not unique")
        if self.coords is not None:
            if self.modality != SPATIAL:
                raise DataError("coordinates are only valid for spatial data")
            coords = np.asarray(self.coords, dtype=float)
            if coords.shape != (len(self.cell_ids), 2):
                raise DataError(f"coordinates shape {coords.shape} != (n_cells, 2)")
            object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "counts", snapped)

    @property
    def n_cells(self):
        return len(self.cell_ids)

    @property
    def n_genes(self):
        return len(self.gene_ids)

    def row_sums(self):
        return self.counts.sum(axis=1)

    def columns(self, gene_ids) -> np.ndarray:
        """Counts for the requested genes, in the requested order."""
        pos = {g: i for i, g in enumerate(self.gene_ids)}
        missing = [g for g in gene_ids if g not in pos]
        if missing:
            raise AlignmentError(f"genes absent from matrix: {missing}")
        return self.counts[:, [pos[g] for g in gene_ids]]

    def drop_zero_cells(self) -> "CountMatrix":
        keep = self.row_sums() > 0
        dropped = int((~keep).sum())
        if dropped == 0:
            return self
        log.warning("dropping %d zero-count %s cell(s)", dropped, self.modality)
        return CountMatrix(
            tuple(c for c, k in zip(self.cell_ids, keep) if k),
            self.gene_ids,
            self.counts[keep],
            self.modality,
            None if self.coords is None else self.coords[keep],
        )


@dataclass(frozen=True)
class GenePanel:
    """Split of the spatial assay's panel into observed and held-out genes.

    ``genes`` is the full gene universe G in RNA column order; ``observed``
    (G') and ``held_out`` partition the original spatial panel.
    """

    genes: tuple
    observed: tuple
    held_out: tuple
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "genes", tuple(self.genes))
        object.__setattr__(self, "observed", tuple(self.observed))
        object.__setattr__(self, "held_out", tuple(self.held_out))
        if len(set(self.genes)) != len(self.genes):
            raise DataError("panel gene list has duplicates")
        if not self.observed:
            raise DataError("observed gene set is empty")
        universe = set(self.genes)
        missing = [g for g in (*self.observed, *self.held_out) if g not in universe]
        if missing:
            raise AlignmentError(f"panel genes absent from gene universe: {missing}")
        if set(self.observed) & set(self.held_out):
            raise DataError("observed and held-out gene sets overlap")

    @property
    def n_genes(self):
        return len(self.genes)

    @property
    def n_observed(self):
        return len(self.observed)

    def observed_idx(self) -> np.ndarray:
        pos = {g: i for i, g in enumerate(self.genes)}
        return np.array([pos[g] for g in self.observed], dtype=int)

    def held_out_idx(self) -> np.ndarray:
        pos = {g: i for i, g in enumerate(self.genes)}
        return np.array([pos[g] for g in self.held_out], dtype=int)

    def save(self, path):
        doc = {
            "genes": list(self.genes),
            "observed": list(self.observed),
            "held_out": list(self.held_out),
            "seed": self.seed,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "GenePanel":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
            return cls(doc["genes"], doc["observed"], doc["held_out"], doc["seed"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"bad gene panel file: {exc}", path=str(path)) from exc


# ---------------------------------------------------------------------------
# Loading / saving


def load_counts(path, modality, fmt=None) -> CountMatrix:
    """Read a count matrix; zero-total spatial cells are dropped (logged)."""
    path = str(path)
    if fmt is None:
        fmt = "dense_csv" if path.endswith(".csv") else "triplet"
    if fmt == "dense_csv":
        matrix = _load_dense_csv(path, modality)
    elif fmt == "triplet":
        matrix = _load_triplets(path, modality)
    else:
        raise DomainError(f"unknown count format {fmt!r}")
    if modality == SPATIAL:
        matrix = matrix.drop_zero_cells()
    return matrix


def _parse_count(token, path, lineno):
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"non-numeric count {token!r}", path, lineno) from None
    if not math.isfinite(value) or value < 0:
        raise ParseError(f"negative or non-finite count {token!r}", path, lineno)
    if abs(value - round(value)) > COUNT_TOL:
        raise ParseError(f"non-integer count {token!r}", path, lineno)
    return value


def _load_dense_csv(path, modality) -> CountMatrix:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file", path, 1)
    header = lines[0].split(",")
    if len(header) < 2:
        raise ParseError("header must name at least one gene", path, 1)
    columns = [c.strip() for c in header[1:]]
    has_coords = modality == SPATIAL and columns[:2] == ["x", "y"]
    gene_ids = columns[2:] if has_coords else columns
    if len(set(gene_ids)) != len(gene_ids):
        raise ParseError("duplicate gene id in header", path, 1)
    cell_ids, rows, coords = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != len(header):
            raise ParseError(
                f"expected {len(header)} fields, found {len(fields)}", path, lineno
            )
        cell_id = fields[0].strip()
        if cell_id in cell_ids:
            raise ParseError(f"duplicate cell id {cell_id!r}", path, lineno)
        cell_ids.append(cell_id)
        values = fields[1:]
        if has_coords:
            try:
                coords.append((float(values[0]), float(values[1])))
            except ValueError:
                raise ParseError("non-numeric coordinate", path, lineno) from None
            values = values[2:]
        rows.append([_parse_count(v, path, lineno) for v in values])
    counts = np.array(rows, dtype=float).reshape(len(cell_ids), len(gene_ids))
    return CountMatrix(
        cell_ids, gene_ids, counts, modality,
        np.array(coords) if has_coords else None,
    )


def _read_id_file(path):
    with open(path, encoding="utf-8") as fh:
        ids = [line.strip() for line in fh if line.strip()]
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate identifier", str(path), None)
    return ids


def _load_triplets(path, modality) -> CountMatrix:
    cell_ids = _read_id_file(path + ".cells")
    gene_ids = _read_id_file(path + ".genes")
    counts = np.zeros((len(cell_ids), len(gene_ids)))
    seen = set()
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split() != ["cell", "gene", "count"]:
        raise ParseError("triplet header must be 'cell gene count'", path, 1)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ParseError(f"expected 3 fields, found {len(fields)}", path, lineno)
        try:
            ci, gi = int(fields[0]), int(fields[1])
        except ValueError:
            raise ParseError("non-integer cell/gene index", path, lineno) from None
        if not (0 <= ci < len(cell_ids)) or not (0 <= gi < len(gene_ids)):
            raise ParseError(f"index ({ci}, {gi}) out of range", path, lineno)
        if (ci, gi) in seen:
            raise ParseError(f"duplicate entry for ({ci}, {gi})", path, lineno)
        seen.add((ci, gi))
        counts[ci, gi] = _parse_count(fields[2], path, lineno)
    return CountMatrix(cell_ids, gene_ids, counts, modality)


def save_counts(matrix: CountMatrix, path, fmt=None) -> None:
    path = str(path)
    if fmt is None:
        fmt = "dense_csv" if path.endswith(".csv") else "triplet"
    if fmt == "dense_csv":
        _save_dense_csv(matrix, path)
    elif fmt == "triplet":
        _save_triplets(matrix, path)
    else:
        raise DomainError(f"unknown count format {fmt!r}")


def _format_count(v: float) -> str:
    return str(int(v))


def _save_dense_csv(matrix, path):
    with open(path, "w", encoding="utf-8") as fh:
        cols = list(matrix.gene_ids)
        if matrix.coords is not None:
            cols = ["x", "y"] + cols
        fh.write(",".join(["cell_id"] + cols) + "\n")
        for i, cell in enumerate(matrix.cell_ids):
            fields = [cell]
            if matrix.coords is not None:
                fields += [repr(float(matrix.coords[i, 0])),
                           repr(float(matrix.coords[i, 1]))]
            fields += [_format_count(v) for v in matrix.counts[i]]
            fh.write(",".join(fields) + "\n")


def _save_triplets(matrix, path):
    with open(path + ".cells", "w", encoding="utf-8") as fh:
        fh.write("".join(c + "\n" for c in matrix.cell_ids))
    with open(path + ".genes", "w", encoding="utf-8") as fh:
        fh.write("".join(g + "\n" for g in matrix.gene_ids))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("cell gene count\n")
        rows, cols = np.nonzero(matrix.counts)
        for ci, gi in zip(rows, cols):
            fh.write(f"{ci} {gi} {_format_count(matrix.counts[ci, gi])}\n")


# ---------------------------------------------------------------------------
# Holdout split


def make_holdout(spatial_genes, rna_genes, fraction=0.2, seed=0) -> GenePanel:
    """Randomly hold out ``fraction`` of the spatial panel (round half up)."""
    spatial_genes = list(spatial_genes)
    rna_genes = list(rna_genes)
    if not 0 < fraction < 1:
        raise DomainError(f"holdout fraction must be in (0, 1), got {fraction}")
    if len(spatial_genes) < 2:
        raise DomainError("spatial panel must contain at least 2 genes")
    missing = [g for g in spatial_genes if g not in set(rna_genes)]
    if missing:
        raise AlignmentError(f"spatial panel genes absent from RNA data: {missing}")
    n_held = int(math.floor(fraction * len(spatial_genes) + 0.5))
    if not 0 < n_held < len(spatial_genes):
        raise DomainError(
            f"holdout of {n_held}/{len(spatial_genes)} genes leaves no usable split"
        )
    rng = np.random.default_rng(seed)
    held_pos = sorted(rng.choice(len(spatial_genes), size=n_held, replace=False))
    held_set = set(held_pos)
    held_out = [spatial_genes[i] for i in held_pos]
    observed = [g for i, g in enumerate(spatial_genes) if i not in held_set]
    return GenePanel(rna_genes, observed, held_out, seed)


# ---------------------------------------------------------------------------
# Synthetic generator (ground-truth oracle)


@dataclass(frozen=True)
class SimulationTruth:
    """Everything the generator knew: latents, frequencies, parameters."""

    seed: int
    latent_dim: int
    z_rna: np.ndarray
    z_spatial: np.ndarray
    cluster_rna: np.ndarray
    cluster_spatial: np.ndarray
    rho_rna: np.ndarray
    rho_spatial: np.ndarray
    rho_spatial_full: np.ndarray
    params: dict = field(default_factory=dict)

    def save(self, path) -> None:
        from . import blob

        arrays = {
            "z_rna": self.z_rna,
            "z_spatial": self.z_spatial,
            "cluster_rna": self.cluster_rna.astype(float),
            "cluster_spatial": self.cluster_spatial.astype(float),
            "rho_rna": self.rho_rna,
            "rho_spatial": self.rho_spatial,
            "rho_spatial_full": self.rho_spatial_full,
        }
        for name, arr in self.params.items():
            arrays["param." + name] = np.asarray(arr, dtype=float)
        meta = {"kind": "simulation_truth", "seed": self.seed,
                "latent_dim": self.latent_dim}
        blob.save(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "SimulationTruth":
        from . import blob

        meta, arrays = blob.load(path)
        if meta.get("kind") != "simulation_truth":
            raise ParseError("not a simulation truth file", path=str(path))
        params = {
            name[len("param."):]: arr
            for name, arr in arrays.items() if name.startswith("param.")
        }
        return cls(
            seed=meta["seed"],
            latent_dim=meta["latent_dim"],
            z_rna=arrays["z_rna"],
            z_spatial=arrays["z_spatial"],
            cluster_rna=arrays["cluster_rna"].astype(int),
            cluster_spatial=arrays["cluster_spatial"].astype(int),
            rho_rna=arrays["rho_rna"],
            rho_spatial=arrays["rho_spatial"],
            rho_spatial_full=arrays["rho_spatial_full"],
            params=params,
        )


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def simulate(n_rna, n_spatial, n_genes, n_spatial_genes, n_clusters=4,
             shift_strength=0.5, seed=0, latent_dim=10):
    """Sample paired datasets from the model's own generative process.

    Latents come from a mixture of ``n_clusters`` Gaussians shared by both
    modalities; frequencies from a random linear decoder plus softmax,
    with a fixed logit shift of magnitude ``shift_strength`` applied to
    spatial cells only. RNA counts are ZINB with per-gene dispersion and
    dropout; spatial counts are Poisson on the panel-renormalized
    frequencies. Returns (rna, spatial, panel, truth).
    """
    if n_spatial_genes >= n_genes:
        raise DomainError("spatial panel must be a strict subset of the gene set")
    for name, v in [("n_rna", n_rna), ("n_spatial", n_spatial),
                    ("n_genes", n_genes), ("n_spatial_genes", n_spatial_genes),
                    ("n_clusters", n_clusters), ("latent_dim", latent_dim)]:
        if v < 1:
            raise DomainError(f"{name} must be >= 1, got {v}")
    if shift_strength < 0:
        raise DomainError("shift_strength must be >= 0")

    rng = np.random.default_rng(seed)
    d = latent_dim
    genes = [f"g{i:04d}" for i in range(n_genes)]

    cluster_means = 2.0 * rng.standard_normal((n_clusters, d))
    weight = rng.standard_normal((d, n_genes)) / math.sqrt(d)
    bias = rng.standard_normal(n_genes)
    shift = shift_strength * rng.standard_normal(n_genes)
    log_theta = rng.normal(math.log(5.0), 0.25, size=n_genes)
    dropout_logit = rng.normal(-1.5, 0.5, size=n_genes)
    lib_mu, lib_sigma = math.log(2000.0), 0.3
    lib_mu_sp, lib_sigma_sp = math.log(500.0), 0.3

    def draw_latent(n):
        labels = rng.integers(0, n_clusters, size=n)
        z = cluster_means[labels] + 0.5 * rng.standard_normal((n, d))
        return z, labels

    z_rna, cl_rna = draw_latent(n_rna)
    z_sp, cl_sp = draw_latent(n_spatial)

    rho_rna = _softmax(z_rna @ weight + bias)
    rho_sp_full = _softmax(z_sp @ weight + bias)  # counterfactual, RNA-style
    rho_sp_shifted = _softmax(z_sp @ weight + bias + shift)

    # RNA: ZINB via gamma-Poisson with per-gene dropout
    lib = np.exp(rng.normal(lib_mu, lib_sigma, size=(n_rna, 1)))
    mean = lib * rho_rna
    theta = np.exp(log_theta)
    lam = rng.gamma(shape=theta[None, :], scale=mean / theta[None, :])
    x_rna = rng.poisson(lam).astype(float)
    pi = 1.0 / (1.0 + np.exp(-dropout_logit))
    x_rna[rng.random((n_rna, n_genes)) < pi[None, :]] = 0.0

    # spatial: Poisson on the observed sub-panel, frequencies renormalized
    observed_pos = sorted(rng.choice(n_genes, size=n_spatial_genes, replace=False))
    observed = [genes[i] for i in observed_pos]
    held_out = [g for g in genes if g not in set(observed)]
    rho_obs = rho_sp_shifted[:, observed_pos]
    rho_obs = rho_obs / rho_obs.sum(axis=1, keepdims=True)
    lib_sp = np.exp(rng.normal(lib_mu_sp, lib_sigma_sp, size=(n_spatial, 1)))
    x_sp = rng.poisson(lib_sp * rho_obs).astype(float)

    rna = CountMatrix(
        [f"r{i:05d}" for i in range(n_rna)], genes, x_rna, RNA)
    spatial = CountMatrix(
        [f"s{i:05d}" for i in range(n_spatial)], observed, x_sp, SPATIAL)
    panel = GenePanel(genes, observed, held_out, seed)
    truth = SimulationTruth(
        seed=seed,
        latent_dim=d,
        z_rna=z_rna,
        z_spatial=z_sp,
        cluster_rna=cl_rna,
        cluster_spatial=cl_sp,
        rho_rna=rho_rna,
        rho_spatial=rho_obs,
        rho_spatial_full=rho_sp_full,
        params={
            "cluster_means": cluster_means,
            "weight": weight,
            "bias": bias,
            "shift": shift,
            "log_theta": log_theta,
            "dropout_logit": dropout_logit,
            "library": np.array([lib_mu, lib_sigma, lib_mu_sp, lib_sigma_sp]),
        },
    )
    return rna, spatial, panel, truth
