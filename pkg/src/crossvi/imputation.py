"""Held-out gene imputation from the trained model, plus baselines.

Imputed values are posterior-mean decoded frequencies rho_g (the
evaluation is rank-based, so no library scaling is applied); the
uncertainty is the variance of rho_g across posterior samples.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .data import CountMatrix, GenePanel
from .errors import ContractError, DomainError

DEFAULT_N_SAMPLES = 50
DEFAULT_KNN_FRAC = 0.05
COND_LIMIT = 1e10


@dataclass
class ImputationResult:
    """Per (spatial cell, held-out gene) posterior mean and variance."""

    cell_ids: tuple
    gene_ids: tuple
    imputed: np.ndarray
    uncertainty: np.ndarray
    n_samples: int
    degenerate: bool = False  # True when n_samples gives no spread estimate
    coords: np.ndarray | None = None

    def to_csv(self, path) -> None:
        fields = ["cell_id", "gene_id", "imputed", "uncertainty"]
        if self.coords is not None:
            fields += ["x", "y"]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(fields)
            for i, cell in enumerate(self.cell_ids):
                for j, gene in enumerate(self.gene_ids):
                    row = [cell, gene, repr(float(self.imputed[i, j])),
                           repr(float(self.uncertainty[i, j]))]
                    if self.coords is not None:
                        row += [repr(float(self.coords[i, 0])),
                                repr(float(self.coords[i, 1]))]
                    w.writerow(row)

    def gene_column(self, gene) -> np.ndarray:
        return self.imputed[:, self.gene_ids.index(gene)]

    def gene_uncertainty(self, gene) -> float:
        """Mean posterior variance of a gene across cells."""
        return float(self.uncertainty[:, self.gene_ids.index(gene)].mean())


def impute(state, spatial: CountMatrix, n_samples=DEFAULT_N_SAMPLES,
           decode_label="rna", seed=0) -> ImputationResult:
    """Posterior-sample the held-out genes for every spatial cell.

    Draws ``n_samples`` latents from q(z | x', s=spatial) per cell,
    decodes frequencies with the requested dataset label, and records
    mean and variance of each held-out gene across the samples.
    """
    panel: GenePanel = state.panel
    if not panel.held_out:
        raise ContractError("panel has no held-out genes to impute")
    if n_samples < 1:
        raise DomainError(f"n_samples must be >= 1, got {n_samples}")
    mu, log_var = model_mod.encode(state, spatial)
    sd = np.exp(0.5 * log_var)
    held = panel.held_out_idx()
    rng = np.random.default_rng(seed)
    total = np.zeros((mu.shape[0], held.size))
    total_sq = np.zeros_like(total)
    for _ in range(n_samples):
        z = mu + sd * rng.standard_normal(mu.shape)
        rho = model_mod.decode_rho(state, z, decode_label)[:, held]
        total += rho
        total_sq += rho * rho
    mean = total / n_samples
    var = np.maximum(total_sq / n_samples - mean * mean, 0.0)
    # a single sample has no spread: variance 0 by convention, flagged
    return ImputationResult(
        cell_ids=spatial.cell_ids,
        gene_ids=tuple(panel.held_out),
        imputed=mean,
        uncertainty=var,
        n_samples=n_samples,
        degenerate=n_samples == 1,
        coords=spatial.coords,
    )


def log_normalize(counts) -> np.ndarray:
    """Counts-per-total then log1p, row-wise."""
    counts = np.asarray(counts, dtype=float)
    sums = counts.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise DomainError("cannot normalize cells with zero total count")
    return np.log1p(counts / sums)


def knn_impute_baseline(rna_latent, rna: CountMatrix, spatial_latent,
                        panel: GenePanel, k_frac=DEFAULT_KNN_FRAC):
    """k-NN regression of held-out genes from RNA cells in latent space.

    For each spatial cell, averages the log-normalized held-out-gene
    expression of its k nearest RNA cells (k = max(1, round(k_frac * n_rna))).
    Returns (values (n_spatial, n_held_out), k).
    """
    rna_latent = np.asarray(rna_latent, dtype=float)
    spatial_latent = np.asarray(spatial_latent, dtype=float)
    if rna_latent.shape[0] == 0:
        raise ContractError("kNN baseline needs at least one RNA cell")
    if rna_latent.shape[0] != rna.n_cells:
        raise ContractError("RNA latent rows do not match the RNA matrix")
    if not 0 < k_frac < 1:
        raise DomainError(f"k_frac must be in (0, 1), got {k_frac}")
    k = max(1, int(round(k_frac * rna_latent.shape[0])))
    expr = log_normalize(rna.counts)[:, _held_idx_in(rna, panel)]
    d2 = ((spatial_latent[:, None, :] - rna_latent[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return expr[order].mean(axis=1), k


def _held_idx_in(rna: CountMatrix, panel: GenePanel) -> np.ndarray:
    pos = {g: i for i, g in enumerate(rna.gene_ids)}
    return np.array([pos[g] for g in panel.held_out], dtype=int)


@dataclass
class LinregScores:
    """Mean squared OLS residual per held-out gene, from observed genes."""

    residuals: dict
    condition_number: float
    rank_deficient: bool


def _linreg_fit(rna: CountMatrix, panel: GenePanel):
    if rna.n_cells < panel.n_observed + 1:
        raise ContractError(
            f"need at least {panel.n_observed + 1} RNA cells, have {rna.n_cells}"
        )
    expr = log_normalize(rna.counts)
    pos = {g: i for i, g in enumerate(rna.gene_ids)}
    obs = expr[:, [pos[g] for g in panel.observed]]
    targets = expr[:, [pos[g] for g in panel.held_out]]
    design = np.hstack([obs, np.ones((rna.n_cells, 1))])
    beta, _, rank, sv = np.linalg.lstsq(design, targets, rcond=None)
    resid = targets - design @ beta
    mse = (resid * resid).mean(axis=0)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    return beta, mse, cond, rank < design.shape[1] or cond > COND_LIMIT


def linreg_predictability(rna: CountMatrix, panel: GenePanel) -> LinregScores:
    """OLS from observed-panel columns (plus intercept) to each held-out gene.

    Inputs are normalized to counts-per-total and log1p-transformed.
    Rank-deficient designs are solved by minimum-norm least squares and
    flagged via the condition number.
    """
    _, mse, cond, deficient = _linreg_fit(rna, panel)
    return LinregScores(
        residuals={g: float(m) for g, m in zip(panel.held_out, mse)},
        condition_number=cond,
        rank_deficient=deficient,
    )


def linreg_impute(rna: CountMatrix, spatial: CountMatrix,
                  panel: GenePanel) -> np.ndarray:
    """Apply the RNA-fitted regression to spatial cells' observed panel."""
    beta, _, _, _ = _linreg_fit(rna, panel)
    obs = log_normalize(spatial.columns(panel.observed))
    design = np.hstack([obs, np.ones((spatial.n_cells, 1))])
    return design @ beta
