import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from chmmplots.figures import (model_averaged_densities, plot_posteriors,
                               plot_state_heatmap, weighted_kde)
from chmmplots.tables import (SchemaError, read_evidence_csv, read_smooth_csv,
                              read_theta_samples_csv)

EXAMPLES = Path(__file__).resolve().parents[1] / "examples"


def test_package_does_not_touch_the_estimation_library():
    # pure view layer: importing it must not pull in the estimation library
    code = ("import sys, chmmplots; "
            "sys.exit(any(n.startswith('chmmevidence') for n in sys.modules))")
    assert subprocess.run([sys.executable, "-c", code]).returncode == 0


class TestReaders:
    def test_evidence_weights_normalize(self):
        table = read_evidence_csv(str(EXAMPLES / "ranking.csv"))
        w = table.weights()
        assert w.sum() == pytest.approx(1.0)
        assert list(table.models) == [1, 3]

    def test_samples_shape(self):
        z = read_theta_samples_csv(str(EXAMPLES / "model1_samples.csv"))
        assert z.shape[1] == 7

    def test_smooth_probabilities_validated(self, tmp_path):
        src = (EXAMPLES / "smoothing.csv").read_text().splitlines()
        cells = src[1].split(",")
        cells[5] = "1.7"  # p_i out of range
        bad = tmp_path / "bad.csv"
        bad.write_text("\n".join([src[0], ",".join(cells)] + src[2:]) + "\n")
        with pytest.raises(SchemaError):
            read_smooth_csv(str(bad))

    def test_wrong_header_rejected(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(SchemaError):
            read_evidence_csv(str(bad))


class TestWeightedDensities:
    def test_single_model_is_unweighted(self):
        dens, weights, missing = model_averaged_densities(
            {1: str(EXAMPLES / "model1_samples.csv")},
            str(EXAMPLES / "ranking.csv"))
        assert missing == [3]
        z = read_theta_samples_csv(str(EXAMPLES / "model1_samples.csv"))
        grid, d = dens["gamma_n"]
        direct = weighted_kde(z[:, 5], np.full(z.shape[0], 1.0 / z.shape[0]), grid)
        assert np.abs(d - direct).max() < 1e-12

    def test_degenerate_weights_reduce_to_single_model(self, tmp_path):
        # one model carries essentially all the evidence weight
        rank = tmp_path / "rank.csv"
        rank.write_text(
            "model,log_ml,se_log,lo3,hi3,category\n"
            "1,-10.0,0.01,-10.1,-9.9,best\n"
            "3,-60.0,0.01,-60.1,-59.9,rejected\n")
        both = {1: str(EXAMPLES / "model1_samples.csv"),
                3: str(EXAMPLES / "model3_samples.csv")}
        dens_both, _, _ = model_averaged_densities(both, str(rank))
        dens_one, _, _ = model_averaged_densities(
            {1: str(EXAMPLES / "model1_samples.csv")}, str(rank))
        for name in ("p_n", "beta_n", "gamma_n"):
            g1, d1 = dens_both[name]
            g2, d2 = dens_one[name]
            assert np.abs(d1 - d2).max() < 1e-8

    def test_unknown_model_samples_rejected(self):
        with pytest.raises(SchemaError):
            model_averaged_densities({7: str(EXAMPLES / "model1_samples.csv")},
                                     str(EXAMPLES / "ranking.csv"))

    def test_kde_integrates_to_one(self):
        rng = np.random.default_rng(0)
        x = rng.normal(2.0, 0.5, size=500)
        grid = np.linspace(-2, 6, 800)
        d = weighted_kde(x, np.full(500, 1 / 500), grid)
        assert np.trapezoid(d, grid) == pytest.approx(1.0, abs=1e-3)


class TestFigureFiles:
    def test_posterior_panels_from_shipped_examples(self, tmp_path):
        paths = plot_posteriors(
            {1: str(EXAMPLES / "model1_samples.csv"),
             3: str(EXAMPLES / "model3_samples.csv")},
            str(EXAMPLES / "ranking.csv"), str(tmp_path))
        assert len(paths) == 2
        assert {Path(p).suffix for p in paths} == {".png", ".pdf"}
        for p in paths:
            assert Path(p).stat().st_size > 2000

    def test_heatmap_from_shipped_examples(self, tmp_path):
        paths = plot_state_heatmap(str(EXAMPLES / "smoothing.csv"),
                                   str(EXAMPLES / "observations.csv"),
                                   str(tmp_path))
        assert len(paths) == 2
        for p in paths:
            assert Path(p).stat().st_size > 2000

    def test_filenames_carry_input_digest(self, tmp_path):
        paths = plot_state_heatmap(str(EXAMPLES / "smoothing.csv"),
                                   str(EXAMPLES / "observations.csv"),
                                   str(tmp_path))
        name = Path(paths[0]).stem
        assert name.startswith("infection_grid_")
        assert len(name.split("_")[-1]) == 12

    def test_dimension_mismatch_rejected(self, tmp_path):
        truncated = tmp_path / "short.csv"
        lines = (EXAMPLES / "smoothing.csv").read_text().splitlines()
        truncated.write_text("\n".join(lines[:1 + 20 * 15]) + "\n")
        with pytest.raises(SchemaError):
            plot_state_heatmap(str(truncated),
                               str(EXAMPLES / "observations.csv"),
                               str(tmp_path))

    def test_all_zero_probabilities_render_white(self, tmp_path):
        lines = (EXAMPLES / "smoothing.csv").read_text().splitlines()
        out = [lines[0]]
        for row in lines[1:]:
            cells = row.split(",")
            cells[4], cells[5], cells[6] = "1.0", "0.0", "0.0"
            out.append(",".join(cells))
        zeros = tmp_path / "zeros.csv"
        zeros.write_text("\n".join(out) + "\n")
        table = read_smooth_csv(str(zeros))
        _, _, grid = table.infection_by_day()
        assert np.all(grid == 0.0)
        paths = plot_state_heatmap(str(zeros), str(EXAMPLES / "observations.csv"),
                                   str(tmp_path))
        assert Path(paths[0]).exists()


class TestCli:
    def run(self, args, cwd):
        return subprocess.run([sys.executable, "-m", "chmmplots"] + args,
                              capture_output=True, text=True, cwd=str(cwd))

    def test_posteriors_command(self, tmp_path):
        r = self.run(["posteriors",
                      "--samples", "1=%s" % (EXAMPLES / "model1_samples.csv"),
                      "--samples", "3=%s" % (EXAMPLES / "model3_samples.csv"),
                      "--evidence", str(EXAMPLES / "ranking.csv"),
                      "--out-dir", "figs"], tmp_path)
        assert r.returncode == 0, r.stderr
        written = json.loads(r.stdout)["written"]
        assert all((tmp_path / p).exists() for p in written)

    def test_heatmap_command(self, tmp_path):
        r = self.run(["heatmap", "--smooth", str(EXAMPLES / "smoothing.csv"),
                      "--data", str(EXAMPLES / "observations.csv"),
                      "--out-dir", "figs"], tmp_path)
        assert r.returncode == 0, r.stderr

    def test_schema_error_is_machine_readable(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("model,nope\n1,2\n")
        r = self.run(["posteriors", "--samples",
                      "1=%s" % (EXAMPLES / "model1_samples.csv"),
                      "--evidence", str(bad), "--out-dir", "figs"], tmp_path)
        assert r.returncode == 1
        err = json.loads(r.stderr)
        assert err["error"] == "SchemaError"
