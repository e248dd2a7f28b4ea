import json

import numpy as np
import pytest
from pydantic import ValidationError

from mlopt.cli import main
from mlopt.config import ExperimentConfig, load_config
from mlopt.results import read_final_points, read_histogram, read_poses, read_table, trace_header, write_final_points

TRACE_HEADER = (
    "iter,cond,he_mean,he_std,re_dltdecomp_mean,re_dltdecomp_std,te_dltdecomp_mean,te_dltdecomp_std,"
    "re_mrelm_mean,re_mrelm_std,te_mrelm_mean,te_mrelm_std"
)


def header_line(path):
    return next(line for line in path.read_text().splitlines() if not line.startswith("#"))


def write_config(path, **fields):
    path.write_text(json.dumps(fields))
    return path


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.n_values == [4, 5, 6, 7, 8]
        assert cfg.optimizer_config().alpha0 == pytest.approx(1.5e-4)
        assert cfg.pose_config().total == 400
        assert cfg.intrinsics().fx == 800

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ValidationError):
            load_config(write_config(tmp_path / "c.json", bogus=1))
        with pytest.raises(ValidationError):
            load_config(write_config(tmp_path / "c.json", optimizer={"bogus": 1}))

    def test_overrides_win(self, tmp_path):
        cfg = load_config(write_config(tmp_path / "c.json", base_seed=3, runs=10), base_seed=7, output_dir=None)
        assert cfg.base_seed == 7 and cfg.runs == 10

    def test_n_minimum(self):
        with pytest.raises(ValidationError, match="n must be ≥ 4"):
            ExperimentConfig(n=3)

    def test_unknown_method(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(methods=["epnp"])

    def test_canonical_json_round_trip(self):
        cfg = ExperimentConfig(runs=5, n_values=[4, 6])
        assert ExperimentConfig.model_validate_json(cfg.canonical_json()) == cfg


class TestOptimizeCommand:
    def test_default_fronto_parallel(self, tmp_path):
        assert main(["optimize", "--fronto-parallel", "--out", str(tmp_path)]) == 0
        trace = tmp_path / "trace.csv"
        assert header_line(trace) == TRACE_HEADER == ",".join(trace_header(["dlt-decomp", "mre-lm"]))
        meta, rows = read_table(trace)
        assert len(rows) >= 2
        assert meta["config"]["runs"] == 1000
        assert all(row["he_mean"] != "" for row in rows)
        assert (tmp_path / "points.csv").exists()
        ((run_id, pts, status),) = read_final_points(tmp_path / "final_points.csv")
        assert run_id == "fronto_n4_i0" and pts.shape == (4, 2)
        assert status in {"converged", "max_iter", "stalled"}

    def test_same_seed_same_bytes(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", runs=30, eval_every=20)
        for out in ("a", "b"):
            assert main(["optimize", "--config", str(cfg), "--pose-index", "12", "--seed", "7", "--out", str(tmp_path / out)]) == 0
        for name in ("trace.csv", "points.csv", "final_points.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_n_too_small(self, tmp_path, capsys):
        assert main(["optimize", "--n", "3", "--out", str(tmp_path)]) == 2
        assert "n must be ≥ 4" in capsys.readouterr().err

    def test_bad_pose_index(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", runs=5)
        assert main(["optimize", "--config", str(cfg), "--pose-index", "400", "--out", str(tmp_path)]) == 2

    def test_missing_config(self, tmp_path):
        assert main(["optimize", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


class TestSweepCommand:
    def test_tiny_sweep(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", max_poses=2, inits_per_pose=2, runs=50)
        assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        _, rows = read_table(tmp_path / "sweep_summary.csv")
        keys = [(r["n"], r["conditioning"], r["metric"]) for r in rows]
        assert len(keys) == len(set(keys))
        metrics = {"cond", "he", "re:dlt-decomp", "te:dlt-decomp", "re:mre-lm", "te:mre-lm"}
        assert set(keys) == {(str(n), c, m) for n in range(4, 9) for c in ("ill", "well") for m in metrics}
        he = {(r["n"], r["conditioning"]): float(r["mean"]) for r in rows if r["metric"] == "he"}
        for n in range(4, 9):
            assert he[(str(n), "well")] <= he[(str(n), "ill")]
        _, cells = read_table(tmp_path / "sweep_cells.csv")
        assert len(cells) == 2 * 2 * 5

    def test_jobs_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MLOPT_JOBS", "0")
        assert main(["sweep", "--out", str(tmp_path)]) == 2


class TestHistogramCommand:
    def make_inputs(self, tmp_path):
        rng = np.random.default_rng(0)
        runs = [(f"r{i}", rng.uniform(-0.1, 0.1, (4, 2)), "converged") for i in range(5)]
        write_final_points(tmp_path / "in" / "final_points.csv", runs, {})
        return runs

    def test_single_trace_total_mass(self, tmp_path):
        write_final_points(tmp_path / "one.csv", [("r0", np.array([[0.1, 0.0], [0.0, 0.1], [-0.1, 0.0], [0.0, -0.1]]), "converged")], {})
        assert main(["histogram", "--in", str(tmp_path / "one.csv"), "--bins", "8", "--out", str(tmp_path / "h.csv")]) == 0
        hist = read_histogram(tmp_path / "h.csv")
        assert hist.total == 4 and hist.counts.shape == (8, 8)
        _, listing = read_table(tmp_path / "h_runs.csv")
        assert len(listing) == 4

    def test_round_trip_and_determinism(self, tmp_path):
        from mlopt.simulation import aggregate_histogram

        runs = self.make_inputs(tmp_path)
        args = ["histogram", "--in", str(tmp_path / "in" / "*.csv"), "--bins", "10"]
        assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
        assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        expected = aggregate_histogram([p for _, p, _ in runs], 10, 0.15)
        back = read_histogram(tmp_path / "a.csv")
        assert np.array_equal(back.counts, expected.counts)
        assert np.allclose(back.edges, expected.edges)

    def test_converged_runs_by_default(self, tmp_path):
        sq = np.array([[0.1, 0.0], [0.0, 0.1], [-0.1, 0.0], [0.0, -0.1]])
        write_final_points(tmp_path / "s.csv", [("a", sq, "converged"), ("b", 0.5 * sq, "max_iter")], {})
        args = ["histogram", "--in", str(tmp_path / "s.csv"), "--bins", "8"]
        assert main(args + ["--out", str(tmp_path / "c.csv")]) == 0
        assert read_histogram(tmp_path / "c.csv").total == 4
        assert main(args + ["--all", "--out", str(tmp_path / "all.csv")]) == 0
        assert read_histogram(tmp_path / "all.csv").total == 8
        _, listing = read_table(tmp_path / "all_runs.csv")
        assert {r["status"] for r in listing} == {"converged", "max_iter"}

    def test_no_converged_runs(self, tmp_path):
        write_final_points(tmp_path / "s.csv", [("a", np.eye(4, 2) * 0.1, "max_iter")], {})
        assert main(["histogram", "--in", str(tmp_path / "s.csv"), "--out", str(tmp_path / "h.csv")]) == 2

    def test_mixed_n(self, tmp_path):
        write_final_points(tmp_path / "m.csv", [("a", np.zeros((4, 2)) + [[0.1, 0], [0, 0.1], [-0.1, 0], [0, 0]], "converged"), ("b", np.zeros((5, 2)), "converged")], {})
        assert main(["histogram", "--in", str(tmp_path / "m.csv"), "--out", str(tmp_path / "h.csv")]) == 2

    def test_no_inputs(self, tmp_path):
        assert main(["histogram", "--in", str(tmp_path / "*.csv"), "--out", str(tmp_path / "h.csv")]) == 2


class TestPosesCommand:
    def test_default(self, tmp_path):
        out = tmp_path / "poses.csv"
        assert main(["poses", "--out", str(out)]) == 0
        _, rows = read_table(out)
        assert len(rows) == 400
        assert all(r["valid"] == "1" for r in rows)
        for pose in read_poses(out):
            assert np.abs(pose.R.T @ pose.R - np.eye(3)).max() < 1e-9
        again = tmp_path / "again.csv"
        assert main(["poses", "--out", str(again)]) == 0
        assert out.read_bytes() == again.read_bytes()

    def test_infeasible(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", poses={"radii": [0.1]})
        assert main(["poses", "--config", str(cfg), "--out", str(tmp_path / "p.csv")]) == 2


def test_provenance_header(tmp_path):
    out = tmp_path / "poses.csv"
    main(["poses", "--out", str(out)])
    first, second = out.read_text().splitlines()[:2]
    assert first.startswith("# mlopt ")
    meta = json.loads(second.removeprefix("# meta: "))
    assert meta["command"] == "poses" and meta["config"]["bound_radius"] == 0.15
