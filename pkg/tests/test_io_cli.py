import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdreg import io
from pdreg.cli import run_command
from pdreg.errors import BadShapeParams, FormatError, OutputExists
from pdreg.landmarks import LandmarkSet
from pdreg.registration import LooReport, LooRow, RegistrationConfig, small_deformation_register
from pdreg.synthetic import generate_synthetic, shape_points
from pdreg.uncertainty import fc_field

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    for name in ("circle.csv", "flower.csv"):
        shutil.copy(FIXTURES / name, tmp_path / name)
    monkeypatch.chdir(tmp_path)
    return tmp_path


def without_duration(path):
    data = json.loads(Path(path).read_text())
    man = data.get("manifest", data)
    man.pop("duration_s")
    return data


class TestSynthetic:
    def test_circle_axis_points(self):
        np.testing.assert_array_equal(shape_points("circle", 4, 10.0), [[10, 0], [0, 10], [-10, 0], [0, -10]])

    def test_flat_flower_is_circle(self):
        np.testing.assert_allclose(shape_points("flower", 12, 5.0, 0.0), shape_points("circle", 12, 5.0))

    def test_flower_petal_tip(self):
        assert shape_points("flower", 20, 10.0, 0.3, 5)[0, 0] == pytest.approx(13.0, abs=1e-12)

    def test_labels(self):
        lms = generate_synthetic("circle", 12)
        assert lms.labels[0] == "L000" and lms.labels[-1] == "L011"

    @pytest.mark.parametrize("kw", [dict(shape="square", n_points=5), dict(shape="circle", n_points=2),
                                    dict(shape="circle", n_points=5, radius=0.0)])
    def test_bad_parameters(self, kw):
        with pytest.raises(BadShapeParams):
            shape_points(**kw)


class TestLandmarkFiles:
    @given(st.lists(st.tuples(st.floats(-1e6, 1e6, allow_nan=False), st.floats(-1e6, 1e6, allow_nan=False),
                              st.floats(1e-6, 1e3)), min_size=1, max_size=10))
    def test_round_trip_is_exact(self, rows):
        import tempfile

        pts = np.array([r[:2] for r in rows])
        lms = LandmarkSet([f"p{i}" for i in range(len(rows))], pts, [r[2] for r in rows])
        with tempfile.TemporaryDirectory() as d:
            path = Path(d) / "lm.csv"
            io.write_landmarks(path, lms)
            back = io.read_landmarks(path)
        assert back.labels == lms.labels
        assert np.array_equal(back.points, lms.points)
        assert np.array_equal(back.noise_var, lms.noise_var)

    def test_three_dimensional(self, tmp_path):
        lms = LandmarkSet(["a", "b"], [[1.0, 2.0, 3.0], [0.1, 0.2, 0.3]])
        io.write_landmarks(tmp_path / "lm.csv", lms)
        raw = (tmp_path / "lm.csv").read_bytes()
        assert raw.startswith(b"label,x,y,z\n") and b"\r" not in raw
        assert io.read_landmarks(tmp_path / "lm.csv").dim == 3

    @pytest.mark.parametrize("text", ["", "name,x,y\na,1,2\n", "label,x,y\n", "label,x,y\na,1\n",
                                      "label,x,y\na,1,zz\n", "label,x,y,w\na,1,2,3\n", "label,x,y\na,1,2\na,3,4\n"])
    def test_malformed_files(self, tmp_path, text):
        (tmp_path / "bad.csv").write_text(text)
        with pytest.raises(FormatError):
            io.read_landmarks(tmp_path / "bad.csv")


class TestConfigFiles:
    def test_parse_with_comments(self, tmp_path):
        (tmp_path / "c.txt").write_text("# settings\nsigma = 3.5  # mm\n\ntime_steps=16\ngradient_mode = paper\n")
        assert io.read_config(tmp_path / "c.txt") == {"sigma": 3.5, "time_steps": 16, "gradient_mode": "paper"}

    def test_round_trip(self, tmp_path):
        cfg = RegistrationConfig(sigma=1.25, data_weight=7.0, seed=3)
        io.write_config(tmp_path / "c.txt", cfg)
        assert RegistrationConfig(**io.read_config(tmp_path / "c.txt")) == cfg

    @pytest.mark.parametrize("text", ["sigma 2\n", "colour = red\n", "time_steps = many\n"])
    def test_rejects_bad_lines(self, tmp_path, text):
        (tmp_path / "c.txt").write_text(text)
        with pytest.raises(FormatError):
            io.read_config(tmp_path / "c.txt")


class TestOutputs:
    def test_check_output(self, tmp_path):
        existing = tmp_path / "a.csv"
        existing.write_text("x")
        with pytest.raises(OutputExists):
            io.check_output(existing)
        io.check_output(existing, force=True)
        with pytest.raises(OutputExists):
            io.check_output(existing, inputs=[existing], force=True)

    def test_grid_and_loo_round_trip(self, tmp_path):
        m, f = generate_synthetic("circle", 6), generate_synthetic("flower", 6)
        cfg = RegistrationConfig()
        field = fc_field(small_deformation_register(m, f, cfg), [(-5, 5), (-5, 5)], 4, cfg)
        io.write_grid_csv(tmp_path / "g.csv", field)
        pts, fc = io.read_grid_csv(tmp_path / "g.csv")
        assert np.array_equal(pts, field.grid_points) and np.array_equal(fc, field.fc_values)
        report = LooReport([LooRow("a", 1.0, 0.5, 0.25), LooRow("b", 2.0, float("nan"), float("nan"), True)], 2.0)
        io.write_loo_csv(tmp_path / "l.csv", report)
        rows = io.read_loo_csv(tmp_path / "l.csv")
        assert rows[0] == {"label": "a", "pre_mm": 1.0, "post_mm": 0.5, "predicted_fc": 0.25}
        assert np.isnan(rows[1]["post_mm"])

    def test_svg_needs_a_two_dimensional_grid(self, tmp_path):
        from pdreg.uncertainty import UncertaintyField

        with pytest.raises(FormatError):
            io.write_svg(tmp_path / "x.svg", UncertaintyField(np.zeros((3, 2)), np.zeros(3)))


class TestCommands:
    def test_synth(self, workdir):
        assert run_command(["synth", "--shape", "circle", "--n", "20", "--radius", "10", "--out", "c.csv"]) == 0
        assert len(io.read_landmarks("c.csv")) == 20
        man = json.loads(Path("c.csv.manifest.json").read_text())
        assert man["command"] == "synth" and man["config"]["petal_count"] == 5

    def test_register(self, workdir):
        argv = ["register", "--moving", "circle.csv", "--fixed", "flower.csv", "--sigma", "2", "--out", "r.json"]
        assert run_command(argv) == 0
        data = json.loads(Path("r.json").read_text())
        for key in ("mu0", "residuals_mm", "objective_trace", "final_mean", "final_cov", "converged", "manifest"):
            assert key in data
        assert data["converged"] is True
        assert len(data["final_cov"]) == 40 * 40
        assert np.all(np.diff(data["objective_trace"]) <= 0)
        man = data["manifest"]
        assert set(man["inputs"]) == {"circle.csv", "flower.csv"}
        assert man["inputs"]["circle.csv"] == io.file_digest("circle.csv")
        assert man["config"]["sigma"] == 2.0
        back = io.read_result("r.json")
        assert back.converged and back.mu0.shape == (20, 2)

    def test_config_file_and_flag_override(self, workdir):
        Path("c.txt").write_text("sigma = 3\ndata_weight = 4\nmax_iters = 2\n")
        argv = ["register", "--moving", "circle.csv", "--fixed", "flower.csv", "--config", "c.txt",
                "--max-iters", "1", "--out", "r.json"]
        assert run_command(argv) == 0
        cfg = json.loads(Path("r.json").read_text())["manifest"]["config"]
        assert (cfg["sigma"], cfg["data_weight"], cfg["max_iters"]) == (3.0, 4.0, 1)

    def test_baseline(self, workdir):
        assert run_command(["baseline", "--moving", "circle.csv", "--fixed", "flower.csv", "--out", "b.json"]) == 0
        data = json.loads(Path("b.json").read_text())
        assert data["kind"] == "small_deformation" and max(data["residuals_mm"]) < 1e-8

    def test_uncertainty_map_with_svg(self, workdir):
        argv = ["uncertainty-map", "--moving", "circle.csv", "--fixed", "flower.csv", "--method", "baseline",
                "--bounds", "-15", "15", "-15", "15", "--resolution", "8", "--svg", "fc.svg", "--jacobian",
                "--out", "fc.csv"]
        assert run_command(argv) == 0
        pts, fc = io.read_grid_csv("fc.csv")
        assert pts.shape == (64, 2) and np.all(fc >= 0)
        svg = Path("fc.svg").read_text()
        assert svg.startswith("<svg") and svg.count("<circle") == 20 and "mm²" in svg
        summary = json.loads(Path("fc.csv.manifest.json").read_text())["summary"]
        assert summary["svg"]["fc_max"] == pytest.approx(fc.max())
        assert "jacobian_min" in summary

    def test_loo(self, workdir):
        argv = ["loo", "--moving", "circle.csv", "--fixed", "circle.csv", "--noise-amplitude", "0",
                "--out", "loo.csv"]
        assert run_command(argv) == 0
        rows = io.read_loo_csv("loo.csv")
        assert len(rows) == 20 and all(r["post_mm"] < 1e-9 for r in rows)

    def test_validate_ll_small_run(self, workdir):
        argv = ["validate-ll", "--sigma", "5", "--shapes", "circle", "--samples", "200", "--repeats", "2",
                "--steps", "8", "--n-points", "5", "--out", "v.json"]
        assert run_command(argv) == 0
        rows = json.loads(Path("v.json").read_text())["rows"]
        assert len(rows) == 1 and rows[0]["repeats"] == 2
        assert rows[0]["mean_distance"] < 0.1 * 10.0

    def test_usage_error(self, workdir, capsys):
        assert run_command(["register", "--moving", "circle.csv"]) == 2
        assert "--fixed" in capsys.readouterr().err
        assert run_command(["frobnicate"]) == 2

    def test_domain_error(self, workdir, capsys):
        Path("bad.csv").write_text("label,x\n")
        assert run_command(["register", "--moving", "bad.csv", "--fixed", "flower.csv", "--out", "r.json"]) == 1
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("pdreg register: FormatError")
        assert run_command(["synth", "--shape", "circle", "--n", "2", "--out", "x.csv"]) == 1

    def test_never_overwrites(self, workdir):
        before = Path("circle.csv").read_bytes()
        argv = ["register", "--moving", "circle.csv", "--fixed", "flower.csv", "--max-iters", "0"]
        assert run_command(argv + ["--out", "circle.csv", "--force"]) == 1
        assert Path("circle.csv").read_bytes() == before
        assert run_command(argv + ["--out", "r.json"]) == 0
        assert run_command(argv + ["--out", "r.json"]) == 1
        assert run_command(argv + ["--out", "r.json", "--force"]) == 0


REPRO_RUNS = {
    "synth": (["synth", "--shape", "flower", "--n", "12", "--out", "o.csv"], ["o.csv"], ["o.csv.manifest.json"]),
    "register": (["register", "--moving", "circle.csv", "--fixed", "flower.csv", "--max-iters", "3",
                  "--out", "o.json"], [], ["o.json"]),
    "baseline": (["baseline", "--moving", "circle.csv", "--fixed", "flower.csv", "--out", "o.json"], [],
                 ["o.json"]),
    "validate-ll": (["validate-ll", "--sigma", "2", "--shapes", "flower", "--samples", "150", "--repeats", "2",
                     "--steps", "4", "--n-points", "4", "--out", "o.json"], [], ["o.json"]),
    "uncertainty-map": (["uncertainty-map", "--moving", "circle.csv", "--fixed", "flower.csv", "--max-iters", "2",
                         "--resolution", "5", "--svg", "o.svg", "--out", "o.csv"], ["o.csv", "o.svg"],
                        ["o.csv.manifest.json"]),
    "loo": (["loo", "--moving", "circle.csv", "--fixed", "flower.csv", "--max-iters", "1", "--time-steps", "8",
             "--out", "o.csv"],
            ["o.csv"], ["o.csv.manifest.json"]),
}


def rerun_outputs(command, base, chdir):
    """Run ``command`` twice in fresh directories; return both sets of outputs."""
    argv, raw_files, json_files = REPRO_RUNS[command]
    outputs = []
    for run in ("first", "second"):
        d = Path(base) / run
        d.mkdir(parents=True)
        for name in ("circle.csv", "flower.csv"):
            shutil.copy(FIXTURES / name, d / name)
        chdir(d)
        assert run_command(argv) == 0
        outputs.append(([Path(f).read_bytes() for f in raw_files], [without_duration(f) for f in json_files]))
    return outputs


@pytest.mark.parametrize("command", sorted(REPRO_RUNS))
def test_rerun_is_bit_exact(command, tmp_path, monkeypatch):
    first, second = rerun_outputs(command, tmp_path, monkeypatch.chdir)
    assert first == second
