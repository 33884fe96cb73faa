"""Command-line pipeline: simulate, train, impute, evaluate, sweep-kappa.

Options resolve in three layers: built-in defaults, then a JSON config
file (``--config``), then explicit command-line flags. Every command is
deterministic given its seed; outputs land in ``--out`` or a fresh
``run_<timestamp>_seed<seed>`` directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import data, imputation, metrics, model
from .errors import CrossviError, DataError, DomainError, TrainingDivergedError

TRAIN_KEYS = ("latent_dim", "rna_likelihood", "spatial_likelihood", "kappa",
              "epochs", "batch_size", "seed", "hidden_width", "learning_rate",
              "renorm_denominator")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _add_train_flags(p):
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--rna-likelihood", choices=model.RNA_LIKELIHOODS)
    p.add_argument("--spatial-likelihood", choices=model.SPATIAL_LIKELIHOODS)
    p.add_argument("--kappa", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--hidden-width", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--renorm-denominator", choices=("observed", "all"))


def _add_eval_flags(p):
    p.add_argument("--k-sweep", help="comma-separated k values")
    p.add_argument("--knn-frac", type=float)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--decode-label", choices=(data.RNA, data.SPATIAL))


def build_parser() -> _Parser:
    parser = _Parser(prog="crossvi", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")

    p = sub.add_parser("simulate", parents=[common],
                       help="generate synthetic paired datasets")
    p.add_argument("--n-rna", type=int)
    p.add_argument("--n-spatial", type=int)
    p.add_argument("--n-genes", type=int)
    p.add_argument("--n-spatial-genes", type=int)
    p.add_argument("--n-clusters", type=int)
    p.add_argument("--shift-strength", type=float)
    p.add_argument("--latent-dim", type=int)
    p.set_defaults(func=cmd_simulate, defaults={
        "n_rna": 1000, "n_spatial": 1000, "n_genes": 100,
        "n_spatial_genes": 30, "n_clusters": 4, "shift_strength": 0.5,
        "latent_dim": 10, "seed": 0, "out": None,
    })

    p = sub.add_parser("train", parents=[common], help="fit the joint model")
    p.add_argument("--rna", help="RNA count file")
    p.add_argument("--spatial", help="spatial count file")
    p.add_argument("--panel", help="gene panel JSON (else a holdout is drawn)")
    p.add_argument("--holdout-fraction", type=float)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train, defaults={
        "rna": None, "spatial": None, "panel": None, "holdout_fraction": 0.2,
        "out": None, **_train_defaults(),
    })

    p = sub.add_parser("impute", parents=[common],
                       help="impute held-out genes for spatial cells")
    p.add_argument("--checkpoint")
    p.add_argument("--spatial")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--decode-label", choices=(data.RNA, data.SPATIAL))
    p.set_defaults(func=cmd_impute, defaults={
        "checkpoint": None, "spatial": None, "n_samples": 50,
        "decode_label": data.RNA, "seed": 0, "out": None,
    })

    p = sub.add_parser("evaluate", parents=[common],
                       help="mixing/purity curves and imputation scores")
    p.add_argument("--checkpoint")
    p.add_argument("--rna")
    p.add_argument("--spatial")
    p.add_argument("--truth", help="simulation truth blob or truth-count CSV")
    _add_eval_flags(p)
    p.set_defaults(func=cmd_evaluate, defaults={
        "checkpoint": None, "rna": None, "spatial": None, "truth": None,
        "k_sweep": None, "knn_frac": 0.05, "n_samples": 50,
        "decode_label": data.RNA, "seed": 0, "out": None,
    })

    p = sub.add_parser("sweep-kappa", parents=[common],
                       help="train and score one model per kappa value")
    p.add_argument("--kappas", help="comma-separated kappa values (>= 2)")
    p.add_argument("--rna")
    p.add_argument("--spatial")
    p.add_argument("--panel")
    p.add_argument("--truth")
    p.add_argument("--holdout-fraction", type=float)
    _add_train_flags(p)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_sweep_kappa, defaults={
        "kappas": None, "rna": None, "spatial": None, "panel": None,
        "truth": None, "holdout_fraction": 0.2, "k_sweep": None,
        "knn_frac": 0.05, "n_samples": 50, "decode_label": data.RNA,
        "out": None, **_train_defaults(),
    })
    return parser


def _train_defaults():
    return {k: getattr(model.TrainConfig(), k) for k in TRAIN_KEYS}


def _resolve(args) -> dict:
    """Defaults, overlaid by the JSON config, overlaid by explicit flags."""
    opts = dict(args.defaults)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DomainError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DomainError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise DomainError("config must be a JSON object")
        unknown = sorted(set(doc) - set(opts))
        if unknown:
            raise DomainError(f"unknown config keys: {unknown}")
        opts.update(doc)
    for key in opts:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def _require(opts, *keys):
    missing = [k for k in keys if opts.get(k) is None]
    if missing:
        raise DomainError(
            "missing required option(s): " + ", ".join(f"--{k.replace('_', '-')}"
                                                       for k in missing))


def _run_dir(opts) -> Path:
    out = opts.get("out")
    if out is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = f"run_{stamp}_seed{opts.get('seed', 0)}"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _train_config(opts, **overrides) -> model.TrainConfig:
    fields = {k: opts[k] for k in TRAIN_KEYS}
    fields.update(overrides)
    return model.TrainConfig(**fields)


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _write_trace(trace, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "elbo_rna", "elbo_spatial",
                                           "adv_loss", "total_loss"])
        w.writeheader()
        for row in trace:
            w.writerow({k: _csv_cell(v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(args) -> int:
    opts = _resolve(args)
    out = _run_dir(opts)
    rna, spatial, panel, truth = data.simulate(
        n_rna=opts["n_rna"], n_spatial=opts["n_spatial"],
        n_genes=opts["n_genes"], n_spatial_genes=opts["n_spatial_genes"],
        n_clusters=opts["n_clusters"], shift_strength=opts["shift_strength"],
        seed=opts["seed"], latent_dim=opts["latent_dim"])
    data.save_counts(rna, out / "rna.csv")
    data.save_counts(spatial, out / "spatial.csv")
    panel.save(out / "panel.json")
    truth.save(out / "truth.blob")
    print(f"seed: {opts['seed']}")
    print(f"wrote rna.csv spatial.csv panel.json truth.blob under {out}")
    return 0


def _load_training_inputs(opts):
    rna = data.load_counts(opts["rna"], data.RNA)
    spatial = data.load_counts(opts["spatial"], data.SPATIAL)
    if opts.get("panel"):
        panel = data.GenePanel.load(opts["panel"])
    else:
        panel = data.make_holdout(spatial.gene_ids, rna.gene_ids,
                                  opts["holdout_fraction"], opts["seed"])
    observed = data.CountMatrix(
        spatial.cell_ids, panel.observed, spatial.columns(panel.observed),
        data.SPATIAL, spatial.coords)
    return rna, spatial, observed, panel


def cmd_train(args) -> int:
    opts = _resolve(args)
    _require(opts, "rna", "spatial")
    out = _run_dir(opts)
    rna, _, observed, panel = _load_training_inputs(opts)
    config = _train_config(opts)
    state, trace = model.train(rna, observed, panel, config)
    model.save_model(state, out / "checkpoint.blob")
    panel.save(out / "panel.json")
    _write_trace(trace, out / "trace.csv")
    print(f"seed: {config.seed}")
    print(f"final elbo_rna={trace[-1]['elbo_rna']:.4f} "
          f"elbo_spatial={trace[-1]['elbo_spatial']:.4f}")
    print(f"wrote checkpoint.blob trace.csv panel.json under {out}")
    return 0


def _load_spatial_for(state, path):
    spatial = data.load_counts(path, data.SPATIAL)
    panel = state.panel
    missing = [g for g in panel.observed if g not in set(spatial.gene_ids)]
    if missing:
        raise DataError(
            "spatial file lacks genes the checkpoint was trained on: "
            f"{missing}")
    return data.CountMatrix(
        spatial.cell_ids, panel.observed, spatial.columns(panel.observed),
        data.SPATIAL, spatial.coords)


def cmd_impute(args) -> int:
    opts = _resolve(args)
    _require(opts, "checkpoint", "spatial")
    out = _run_dir(opts)
    state = model.load_model(opts["checkpoint"])
    observed = _load_spatial_for(state, opts["spatial"])
    result = imputation.impute(
        state, observed, n_samples=opts["n_samples"],
        decode_label=opts["decode_label"], seed=opts["seed"])
    result.to_csv(out / "imputed.csv")
    print(f"seed: {opts['seed']}")
    print(f"imputed {len(result.cell_ids)} cells x {len(result.gene_ids)} "
          f"genes ({result.n_samples} posterior samples) -> {out/'imputed.csv'}")
    return 0


def _parse_k_sweep(opts, n_cells):
    if opts.get("k_sweep"):
        raw = opts["k_sweep"]
        values = ([int(v) for v in raw.split(",")] if isinstance(raw, str)
                  else [int(v) for v in raw])
        if any(v < 1 for v in values):
            raise DomainError("k values must be positive")
        return sorted({min(v, n_cells - 1) for v in values})
    return metrics.default_k_sweep(n_cells)


def _truth_columns(truth_path, panel, observed):
    """Per-held-out-gene truth vectors over the spatial cells."""
    if str(truth_path).endswith(".csv"):
        truth_mat = data.load_counts(truth_path, data.SPATIAL)
        if tuple(truth_mat.cell_ids) != tuple(observed.cell_ids):
            raise DataError("truth cells do not match the spatial cells")
        cols = truth_mat.columns(panel.held_out)
    else:
        truth = data.SimulationTruth.load(truth_path)
        if truth.rho_spatial_full.shape[0] != observed.n_cells:
            raise DataError("truth cell count does not match the spatial data")
        if truth.rho_spatial_full.shape[1] != panel.n_genes:
            raise DataError("truth gene count does not match the panel")
        cols = truth.rho_spatial_full[:, panel.held_out_idx()]
    return {g: cols[:, j] for j, g in enumerate(panel.held_out)}


def _evaluate(state, rna, observed, truth_cols, opts, report,
              with_purity=True):
    """Fill an EvalReport; returns the summary dict."""
    panel = state.panel
    mu_rna, _ = model.encode(state, rna)
    mu_sp, _ = model.encode(state, observed)
    joint = np.vstack([mu_rna, mu_sp])
    labels = np.r_[np.zeros(len(mu_rna), int), np.ones(len(mu_sp), int)]

    for k in _parse_k_sweep(opts, joint.shape[0]):
        report.add_metric("mixing_kl", k, metrics.mixing_kl(joint, labels, k))

    if with_purity:
        # purity reference: the same architecture fit on each dataset alone
        ref_cfg = _train_config(opts, kappa=0.0)
        ref_rna_state, _ = model.train(rna, None, panel, ref_cfg)
        ref_sp_state, _ = model.train(None, observed, panel, ref_cfg)
        ref_rna, _ = model.encode(ref_rna_state, rna)
        ref_sp, _ = model.encode(ref_sp_state, observed)
        for k in _parse_k_sweep(opts, min(len(mu_rna), len(mu_sp))):
            purity = 0.5 * (metrics.knn_purity_jaccard(mu_rna, ref_rna, k)
                            + metrics.knn_purity_jaccard(mu_sp, ref_sp, k))
            report.add_metric("knn_purity_jaccard", k, purity)

    result = imputation.impute(
        state, observed, n_samples=opts["n_samples"],
        decode_label=opts["decode_label"], seed=opts["seed"])
    knn_values, knn_k = imputation.knn_impute_baseline(
        mu_rna, rna, mu_sp, panel, opts["knn_frac"])
    lin_values = imputation.linreg_impute(rna, observed, panel)
    lin_scores = imputation.linreg_predictability(rna, panel)

    score_model, score_knn, score_lin = {}, {}, {}
    for j, gene in enumerate(panel.held_out):
        t = truth_cols[gene]
        score_model[gene] = metrics.spearman(result.imputed[:, j], t)
        score_knn[gene] = metrics.spearman(knn_values[:, j], t)
        score_lin[gene] = metrics.spearman(lin_values[:, j], t)
    delta_knn = metrics.relative_change(score_knn, score_model)
    delta_lin = metrics.relative_change(score_lin, score_model)
    for gene in panel.held_out:
        report.add_gene(gene, "model", score_model[gene])
        report.add_gene(gene, "knn_baseline", score_knn[gene],
                        delta_knn.per_gene.get(gene))
        report.add_gene(gene, "linreg", score_lin[gene],
                        delta_lin.per_gene.get(gene))

    unc = {g: result.gene_uncertainty(g) for g in panel.held_out}
    resid = lin_scores.residuals
    unc_corr = metrics.spearman(
        [unc[g] for g in panel.held_out],
        [resid[g] for g in panel.held_out])

    summary = {
        "seed": state.config.seed,
        "kappa": state.config.kappa,
        "knn_baseline_k": knn_k,
        "median_spearman_model": _median(score_model),
        "median_spearman_knn": _median(score_knn),
        "median_spearman_linreg": _median(score_lin),
        "median_delta_rho_knn_vs_model": _nan_none(delta_knn.median),
        "median_delta_rho_linreg_vs_model": _nan_none(delta_lin.median),
        "n_undefined_model": sum(v is None for v in score_model.values()),
        "uncertainty_vs_residual_spearman": unc_corr,
        "linreg_condition_number": lin_scores.condition_number,
        "linreg_rank_deficient": lin_scores.rank_deficient,
    }
    report.summary.update(summary)
    return summary


def _median(scores: dict):
    vals = [v for v in scores.values() if v is not None]
    return float(np.median(vals)) if vals else None


def _nan_none(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


def cmd_evaluate(args) -> int:
    opts = _resolve(args)
    _require(opts, "checkpoint", "rna", "spatial", "truth")
    out = _run_dir(opts)
    state = model.load_model(opts["checkpoint"])
    rna = data.load_counts(opts["rna"], data.RNA)
    observed = _load_spatial_for(state, opts["spatial"])
    truth_cols = _truth_columns(opts["truth"], state.panel, observed)
    for k in TRAIN_KEYS:  # reference models reuse the checkpoint's config
        opts[k] = getattr(state.config, k)
    report = metrics.EvalReport()
    summary = _evaluate(state, rna, observed, truth_cols, opts, report)
    report.write(out / "report.json", out / "metrics.csv", out / "genes.csv")
    print(f"seed: {summary['seed']}")
    print(f"median spearman: model={summary['median_spearman_model']} "
          f"knn={summary['median_spearman_knn']} "
          f"linreg={summary['median_spearman_linreg']}")
    print(f"wrote report.json metrics.csv genes.csv under {out}")
    return 0


def cmd_sweep_kappa(args) -> int:
    opts = _resolve(args)
    _require(opts, "kappas", "rna", "spatial", "truth")
    raw = opts["kappas"]
    kappas = ([float(v) for v in raw.split(",")] if isinstance(raw, str)
              else [float(v) for v in raw])
    if len(kappas) < 2:
        raise DomainError("sweep needs at least 2 kappa values")
    out = _run_dir(opts)
    rna, _, observed, panel = _load_training_inputs(opts)
    truth_cols = _truth_columns(opts["truth"], panel, observed)

    rows = []
    summary_path = out / "sweep.csv"
    try:
        for kappa in kappas:
            config = _train_config(opts, kappa=kappa)
            sub = out / f"kappa_{kappa:g}"
            sub.mkdir(exist_ok=True)
            state, trace = model.train(rna, observed, panel, config)
            model.save_model(state, sub / "checkpoint.blob")
            _write_trace(trace, sub / "trace.csv")
            report = metrics.EvalReport()
            summary = _evaluate(state, rna, observed, truth_cols, dict(opts),
                                report, with_purity=False)
            report.write(sub / "report.json", sub / "metrics.csv",
                         sub / "genes.csv")
            mixing_rows = [r for r in report.metric_rows
                           if r["metric"] == "mixing_kl"]
            mid = mixing_rows[len(mixing_rows) // 2]
            rows.append({
                "kappa": kappa,
                "seed": config.seed,
                "median_spearman": summary["median_spearman_model"],
                "mixing_kl": mid["value"],
                "mixing_k": mid["k"],
            })
            print(f"kappa={kappa:g} median_spearman="
                  f"{summary['median_spearman_model']} "
                  f"mixing_kl={mid['value']:.6f} (k={mid['k']})")
    finally:
        # partial results survive a failed run
        with open(summary_path, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["kappa", "seed",
                                               "median_spearman", "mixing_kl",
                                               "mixing_k"])
            w.writeheader()
            for row in rows:
                w.writerow({k: ("" if v is None else repr(v)
                                if isinstance(v, float) else v)
                            for k, v in row.items()})
    print(f"seed: {opts['seed']}")
    print(f"wrote sweep.csv under {out}")
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CrossviError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
