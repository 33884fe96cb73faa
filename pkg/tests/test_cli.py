"""End-to-end command-line workflows on small synthetic runs."""

import json

import numpy as np
import pytest

from crossvi import cli, data, model
from crossvi.data import SPATIAL, CountMatrix


def _lines(path):
    return path.read_text().splitlines()


def _same_bytes(a, b):
    return a.read_bytes() == b.read_bytes()


SIM_FLAGS = ["--seed", "7", "--n-rna", "40", "--n-spatial", "40",
             "--n-genes", "12", "--n-spatial-genes", "6",
             "--n-clusters", "2", "--latent-dim", "3"]
FIT_FLAGS = ["--seed", "7", "--epochs", "3", "--hidden-width", "16",
             "--latent-dim", "3", "--batch-size", "8"]


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """A simulated dataset plus one trained run, shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    sim = root / "sim"
    assert cli.main(["simulate", "--out", str(sim), *SIM_FLAGS]) == 0
    run = root / "run"
    rc = cli.main(["train", "--out", str(run),
                   "--rna", str(sim / "rna.csv"),
                   "--spatial", str(sim / "spatial.csv"),
                   "--panel", str(sim / "panel.json"),
                   "--kappa", "0.25", *FIT_FLAGS])
    assert rc == 0
    return root, sim, run


class TestSimulate:
    def test_writes_all_artifacts(self, ws, capsys):
        root, sim, _ = ws
        for name in ("rna.csv", "spatial.csv", "panel.json", "truth.blob"):
            assert (sim / name).exists()
        out = root / "sim_echo"
        assert cli.main(["simulate", "--out", str(out), *SIM_FLAGS]) == 0
        assert "seed: 7" in capsys.readouterr().out

    def test_rerun_is_byte_identical(self, ws):
        root, sim, _ = ws
        again = root / "sim_again"
        assert cli.main(["simulate", "--out", str(again), *SIM_FLAGS]) == 0
        for name in ("rna.csv", "spatial.csv", "panel.json", "truth.blob"):
            assert _same_bytes(sim / name, again / name), name

    def test_panel_matches_matrices(self, ws):
        _, sim, _ = ws
        panel = data.GenePanel.load(sim / "panel.json")
        rna = data.load_counts(sim / "rna.csv", data.RNA)
        spatial = data.load_counts(sim / "spatial.csv", SPATIAL)
        assert tuple(rna.gene_ids) == panel.genes
        assert tuple(spatial.gene_ids) == panel.observed
        assert set(panel.observed) | set(panel.held_out) == set(panel.genes)

    def test_oversized_spatial_panel_fails(self, tmp_path, capsys):
        rc = cli.main(["simulate", "--out", str(tmp_path / "bad"),
                       "--n-genes", "12", "--n-spatial-genes", "20"])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_default_output_directory_name(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        rc = cli.main(["simulate", "--seed", "3", "--n-rna", "5",
                       "--n-spatial", "5", "--n-genes", "6",
                       "--n-spatial-genes", "3", "--n-clusters", "2",
                       "--latent-dim", "2"])
        assert rc == 0
        made = list(tmp_path.glob("run_*_seed3"))
        assert len(made) == 1 and (made[0] / "rna.csv").exists()


class TestTrain:
    def test_artifacts_and_trace_shape(self, ws):
        _, _, run = ws
        lines = _lines(run / "trace.csv")
        assert lines[0] == "epoch,elbo_rna,elbo_spatial,adv_loss,total_loss"
        assert len(lines) == 1 + 3  # one row per epoch
        state = model.load_model(run / "checkpoint.blob")
        assert state.config.kappa == 0.25
        assert state.config.epochs == 3
        panel = data.GenePanel.load(run / "panel.json")
        assert panel.genes == state.panel.genes

    def test_rerun_is_byte_identical(self, ws):
        root, sim, run = ws
        again = root / "run_again"
        rc = cli.main(["train", "--out", str(again),
                       "--rna", str(sim / "rna.csv"),
                       "--spatial", str(sim / "spatial.csv"),
                       "--panel", str(sim / "panel.json"),
                       "--kappa", "0.25", *FIT_FLAGS])
        assert rc == 0
        for name in ("checkpoint.blob", "trace.csv", "panel.json"):
            assert _same_bytes(run / name, again / name), name

    def test_holdout_drawn_when_no_panel_given(self, ws, tmp_path):
        _, sim, _ = ws
        out = tmp_path / "drawn"
        rc = cli.main(["train", "--out", str(out),
                       "--rna", str(sim / "rna.csv"),
                       "--spatial", str(sim / "spatial.csv"),
                       "--holdout-fraction", "0.34", *FIT_FLAGS])
        assert rc == 0
        panel = data.GenePanel.load(out / "panel.json")
        spatial = data.load_counts(sim / "spatial.csv", SPATIAL)
        assert set(panel.observed) | set(panel.held_out) >= set(
            spatial.gene_ids)
        assert len(panel.held_out) == 2  # round(6 * 0.34)

    def test_missing_required_flag(self, ws, tmp_path, capsys):
        _, sim, _ = ws
        rc = cli.main(["train", "--out", str(tmp_path / "x"),
                       "--spatial", str(sim / "spatial.csv")])
        assert rc == 1
        assert "--rna" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, ws, tmp_path, capsys):
        # the all-genes denominator keeps the decode well defined, so a
        # huge step hits the non-finite loss guard instead of the
        # panel-mass check
        _, sim, _ = ws
        rc = cli.main(["train", "--out", str(tmp_path / "boom"),
                       "--rna", str(sim / "rna.csv"),
                       "--spatial", str(sim / "spatial.csv"),
                       "--learning-rate", "1e6", "--epochs", "2",
                       "--renorm-denominator", "all",
                       "--hidden-width", "16", "--latent-dim", "3",
                       "--seed", "7"])
        assert rc == 2
        assert "non-finite" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_degenerate_panel_mass_exit_code(self, ws, tmp_path, capsys):
        # with the observed-only denominator the same blow-up is caught
        # as a domain problem instead
        _, sim, _ = ws
        rc = cli.main(["train", "--out", str(tmp_path / "mass"),
                       "--rna", str(sim / "rna.csv"),
                       "--spatial", str(sim / "spatial.csv"),
                       "--learning-rate", "1e6", "--epochs", "2",
                       "--hidden-width", "16", "--latent-dim", "3",
                       "--seed", "7"])
        assert rc == 1
        assert "mass underflow" in capsys.readouterr().err

    def test_config_file_layering(self, ws, tmp_path):
        _, sim, _ = ws
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(
            {"epochs": 2, "kappa": 0.8, "hidden_width": 8, "latent_dim": 3}))
        out = tmp_path / "from_cfg"
        rc = cli.main(["train", "--out", str(out), "--config", str(cfg),
                       "--rna", str(sim / "rna.csv"),
                       "--spatial", str(sim / "spatial.csv"),
                       "--panel", str(sim / "panel.json"),
                       "--kappa", "0.1", "--seed", "7"])
        assert rc == 0
        config = model.load_model(out / "checkpoint.blob").config
        assert config.epochs == 2  # from the file
        assert config.hidden_width == 8
        assert config.kappa == 0.1  # explicit flag wins

    def test_unknown_config_key(self, ws, tmp_path, capsys):
        _, sim, _ = ws
        cfg = tmp_path / "bad.json"
        cfg.write_text('{"bogus": 1}')
        rc = cli.main(["train", "--out", str(tmp_path / "y"),
                       "--config", str(cfg),
                       "--rna", str(sim / "rna.csv"),
                       "--spatial", str(sim / "spatial.csv")])
        assert rc == 1
        assert "unknown config keys" in capsys.readouterr().err

    def test_config_must_be_json_object(self, ws, tmp_path, capsys):
        _, sim, _ = ws
        cfg = tmp_path / "list.json"
        cfg.write_text("[1, 2]")
        rc = cli.main(["train", "--config", str(cfg),
                       "--rna", str(sim / "rna.csv"),
                       "--spatial", str(sim / "spatial.csv"),
                       "--out", str(tmp_path / "z")])
        assert rc == 1
        assert "JSON object" in capsys.readouterr().err


class TestImpute:
    def test_output_shape_and_sample_count(self, ws, tmp_path, capsys):
        _, sim, run = ws
        out = tmp_path / "imp"
        rc = cli.main(["impute", "--out", str(out),
                       "--checkpoint", str(run / "checkpoint.blob"),
                       "--spatial", str(sim / "spatial.csv"),
                       "--n-samples", "5", "--seed", "7"])
        assert rc == 0
        assert "(5 posterior samples)" in capsys.readouterr().out
        panel = data.GenePanel.load(run / "panel.json")
        lines = _lines(out / "imputed.csv")
        assert lines[0] == "cell_id,gene_id,imputed,uncertainty"
        assert len(lines) == 1 + 40 * len(panel.held_out)

    def test_rerun_is_byte_identical(self, ws, tmp_path):
        _, sim, run = ws
        args = ["impute", "--checkpoint", str(run / "checkpoint.blob"),
                "--spatial", str(sim / "spatial.csv"),
                "--n-samples", "4", "--seed", "1"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main([*args, "--out", str(a)]) == 0
        assert cli.main([*args, "--out", str(b)]) == 0
        assert _same_bytes(a / "imputed.csv", b / "imputed.csv")

    def test_missing_flag_vs_missing_file(self, ws, tmp_path, capsys):
        _, sim, run = ws
        rc = cli.main(["impute", "--out", str(tmp_path / "m"),
                       "--spatial", str(sim / "spatial.csv")])
        assert rc == 1  # flag absent: usage problem
        rc = cli.main(["impute", "--out", str(tmp_path / "m"),
                       "--checkpoint", str(tmp_path / "nope.blob"),
                       "--spatial", str(sim / "spatial.csv")])
        assert rc == 2  # file absent: I/O problem
        capsys.readouterr()

    def test_spatial_file_must_cover_trained_panel(self, ws, tmp_path,
                                                   capsys):
        _, sim, run = ws
        spatial = data.load_counts(sim / "spatial.csv", SPATIAL)
        renamed = CountMatrix(spatial.cell_ids,
                              [f"{g}_x" for g in spatial.gene_ids],
                              spatial.counts, SPATIAL)
        bad = tmp_path / "renamed.csv"
        data.save_counts(renamed, bad)
        rc = cli.main(["impute", "--out", str(tmp_path / "o"),
                       "--checkpoint", str(run / "checkpoint.blob"),
                       "--spatial", str(bad)])
        assert rc == 1
        assert "lacks genes" in capsys.readouterr().err


class TestEvaluate:
    def _run(self, ws, out, extra=()):
        _, sim, run = ws
        return cli.main(["evaluate", "--out", str(out),
                         "--checkpoint", str(run / "checkpoint.blob"),
                         "--rna", str(sim / "rna.csv"),
                         "--spatial", str(sim / "spatial.csv"),
                         "--truth", str(sim / "truth.blob"),
                         "--k-sweep", "3,5", "--n-samples", "4",
                         "--seed", "7", *extra])

    def test_reports_and_metric_rows(self, ws, tmp_path, capsys):
        out = tmp_path / "ev"
        assert self._run(ws, out) == 0
        assert "median spearman: model=" in capsys.readouterr().out
        doc = json.loads((out / "report.json").read_text())
        assert doc["summary"]["kappa"] == 0.25  # echoed from the checkpoint
        assert doc["summary"]["seed"] == 7
        assert doc["summary"]["knn_baseline_k"] == 2  # round(0.05 * 40)
        rows = _lines(out / "metrics.csv")
        assert rows[0] == "metric,k,value"
        mixing = [r for r in rows[1:] if r.startswith("mixing_kl,")]
        purity = [r for r in rows[1:] if r.startswith("knn_purity_jaccard,")]
        assert [int(r.split(",")[1]) for r in mixing] == [3, 5]
        assert [int(r.split(",")[1]) for r in purity] == [3, 5]
        genes = _lines(out / "genes.csv")
        panel = data.GenePanel.load(ws[2] / "panel.json")
        assert genes[0] == "gene,method,spearman,delta_rho"
        assert len(genes) == 1 + 3 * len(panel.held_out)

    def test_rerun_is_byte_identical(self, ws, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert self._run(ws, a) == 0
        assert self._run(ws, b) == 0
        for name in ("report.json", "metrics.csv", "genes.csv"):
            assert _same_bytes(a / name, b / name), name

    def test_constant_truth_gene_counts_as_undefined(self, ws, tmp_path):
        _, sim, run = ws
        panel = data.GenePanel.load(run / "panel.json")
        spatial = data.load_counts(sim / "spatial.csv", SPATIAL)
        rng = np.random.default_rng(0)
        cols = rng.integers(1, 50, size=(40, len(panel.held_out))).astype(
            float)
        cols[:, 0] = 5.0  # no rank signal for the first held-out gene
        truth = CountMatrix(spatial.cell_ids, list(panel.held_out), cols,
                            SPATIAL)
        truth_csv = tmp_path / "truth.csv"
        data.save_counts(truth, truth_csv)
        out = tmp_path / "ev_const"
        assert self._run(ws, out, extra=["--truth", str(truth_csv)]) == 0
        doc = json.loads((out / "report.json").read_text())
        assert doc["summary"]["n_undefined_model"] == 1
        flat = [r for r in doc["genes"]
                if r["gene"] == panel.held_out[0] and r["method"] == "model"]
        assert flat[0]["spearman"] is None
        first_gene_lines = [ln for ln in _lines(out / "genes.csv")
                            if ln.startswith(f"{panel.held_out[0]},model,")]
        assert first_gene_lines[0].endswith(",,")  # empty score cells

    def test_bad_k_sweep(self, ws, tmp_path, capsys):
        rc = self._run(ws, tmp_path / "bad", extra=["--k-sweep", "0,5"])
        assert rc == 1
        assert "positive" in capsys.readouterr().err

    def test_truth_cells_must_match(self, ws, tmp_path, capsys):
        _, sim, run = ws
        panel = data.GenePanel.load(run / "panel.json")
        truth = CountMatrix(["zz1", "zz2"], list(panel.held_out),
                            np.ones((2, len(panel.held_out))), SPATIAL)
        truth_csv = tmp_path / "short.csv"
        data.save_counts(truth, truth_csv)
        rc = self._run(ws, tmp_path / "ev_bad",
                       extra=["--truth", str(truth_csv)])
        assert rc == 1
        assert "truth cells" in capsys.readouterr().err


class TestSweepKappa:
    def _flags(self, ws, out):
        _, sim, _ = ws
        return ["sweep-kappa", "--out", str(out),
                "--rna", str(sim / "rna.csv"),
                "--spatial", str(sim / "spatial.csv"),
                "--panel", str(sim / "panel.json"),
                "--truth", str(sim / "truth.blob"),
                "--k-sweep", "3,5", "--n-samples", "4", *FIT_FLAGS]

    def test_one_row_and_subdir_per_kappa(self, ws, tmp_path, capsys):
        out = tmp_path / "sweep"
        rc = cli.main([*self._flags(ws, out), "--kappas", "0,0.5"])
        assert rc == 0
        capsys.readouterr()
        rows = _lines(out / "sweep.csv")
        assert rows[0] == "kappa,seed,median_spearman,mixing_kl,mixing_k"
        assert len(rows) == 3
        assert [r.split(",")[0] for r in rows[1:]] == ["0.0", "0.5"]
        assert {r.split(",")[1] for r in rows[1:]} == {"7"}  # same seed
        for sub in ("kappa_0", "kappa_0.5"):
            for name in ("checkpoint.blob", "trace.csv", "report.json",
                         "metrics.csv", "genes.csv"):
                assert (out / sub / name).exists(), (sub, name)
        state = model.load_model(out / "kappa_0.5" / "checkpoint.blob")
        assert state.config.kappa == 0.5

    def test_partial_results_survive_a_bad_kappa(self, ws, tmp_path, capsys):
        out = tmp_path / "partial"
        rc = cli.main([*self._flags(ws, out), "--kappas", "0,nan"])
        assert rc == 1
        assert "kappa" in capsys.readouterr().err
        rows = _lines(out / "sweep.csv")
        assert len(rows) == 2  # header plus the completed kappa=0 row
        assert rows[1].startswith("0.0,")

    def test_requires_two_kappas(self, ws, tmp_path, capsys):
        out = tmp_path / "single"
        rc = cli.main([*self._flags(ws, out), "--kappas", "0.5"])
        assert rc == 1
        assert "at least 2" in capsys.readouterr().err
        assert not out.exists()  # rejected before any work


class TestUsage:
    def test_unknown_subcommand(self, capsys):
        assert cli.main(["bogus"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_subcommand_required(self, capsys):
        assert cli.main([]) == 1
        capsys.readouterr()

    def test_invalid_choice_value(self, capsys):
        assert cli.main(["impute", "--decode-label", "protein"]) == 1
        capsys.readouterr()

    def test_missing_config_file(self, ws, tmp_path, capsys):
        _, sim, _ = ws
        rc = cli.main(["train", "--config", str(tmp_path / "absent.json"),
                       "--rna", str(sim / "rna.csv"),
                       "--spatial", str(sim / "spatial.csv"),
                       "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "config file not found" in capsys.readouterr().err
