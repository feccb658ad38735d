import csv
import json
import os

import numpy as np
import pytest
import yaml

from shearcell.cli import main, read_field_grid

FAST_SOLVER = {"gmres_tol": 1e-8, "mfs": {"m": 24, "proxy_count": 96}}


def write_cfg(path, cfg):
    with open(path, "w") as f:
        yaml.safe_dump(cfg, f)
    return str(path)


def read_rows(path):
    with open(path) as f:
        rows = [r for r in f if not r.startswith("#")]
    return list(csv.reader(rows))


class TestMobilityCommand:
    def test_empty_config_reports_mu(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.yaml",
                        {"fluid": {"mu": 0.7, "gamma": 1.0},
                         "solver": FAST_SOLVER})
        assert main(["mobility", cfg, "-o", str(tmp_path / "out")]) == 0
        rows = read_rows(tmp_path / "out" / "mueff.csv")
        assert rows[0] == ["method", "mu_eff"]
        assert float(rows[1][1]) == pytest.approx(0.7, abs=1e-12)

    def test_single_body_artifacts(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.yaml", {
            "fluid": {"mu": 1.0, "gamma": 1.0},
            "particles": [{"shape": {"kind": "ellipse", "a": 0.15, "b": 0.1},
                           "center": [0.4, 0.45], "angle": 0.3, "n": 48}],
            "solver": FAST_SOLVER,
            "grid": {"nx": 24, "ny": 24}})
        out = tmp_path / "out"
        assert main(["mobility", cfg, "-o", str(out)]) == 0
        assert (out / "velocities.csv").exists()
        assert (out / "density.npy").exists()
        nx, ny, bounds, arrays = read_field_grid(out / "fields.bin")
        assert (nx, ny) == (24, 24)
        assert len(arrays) == 4
        assert np.isfinite(arrays[0]).all()

    def test_malformed_config_exit_2(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.yaml",
                        {"particles": [{"shape": {"kind": "hexagon"},
                                        "center": [0.5, 0.5]}]})
        assert main(["mobility", cfg, "-o", str(tmp_path / "out")]) == 2

    def test_missing_file_exit_2(self, tmp_path):
        assert main(["mobility", str(tmp_path / "nope.yaml"),
                     "-o", str(tmp_path / "out")]) == 2

    def test_overlap_exit_4(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.yaml", {
            "particles": [
                {"shape": {"kind": "ellipse", "a": 0.2, "b": 0.2},
                 "center": [0.4, 0.5], "n": 32},
                {"shape": {"kind": "ellipse", "a": 0.2, "b": 0.2},
                 "center": [0.6, 0.5], "n": 32}],
            "solver": FAST_SOLVER})
        assert main(["mobility", cfg, "-o", str(tmp_path / "out")]) == 3


class TestEvolveCommand:
    def _cfg(self, tmp_path, extra=None):
        cfg = {
            "fluid": {"mu": 1.0, "gamma": 1.0},
            "particles": [{"shape": {"kind": "star", "s": 0.15,
                                     "amplitude": 0.3, "frequency": 3},
                           "center": [0.35, 0.4], "n": 48}],
            "solver": FAST_SOLVER,
            "evolve": {"dt": 0.02, "t_end": 0.08, **(extra or {})}}
        return write_cfg(tmp_path / "c.yaml", cfg)

    def test_runlog_and_final_state(self, tmp_path):
        out = tmp_path / "out"
        assert main(["evolve", self._cfg(tmp_path), "-o", str(out)]) == 0
        rows = read_rows(out / "runlog.csv")
        assert rows[0][0] == "t"
        assert len(rows) == 5
        assert (out / "final_state.json").exists()

    def test_restart_reproduces(self, tmp_path):
        out1 = tmp_path / "out1"
        assert main(["evolve", self._cfg(tmp_path, {"checkpoint_stride": 2}),
                     "-o", str(out1)]) == 0
        # restart from the mid checkpoint and rerun the tail
        cfg2 = self._cfg(tmp_path, {"restart_from":
                                    str(out1 / "checkpoint.json")})
        out2 = tmp_path / "out2"
        assert main(["evolve", cfg2, "-o", str(out2)]) == 0
        with open(out1 / "final_state.json") as f:
            s1 = np.asarray(json.load(f)["state"])
        with open(out2 / "final_state.json") as f:
            s2 = np.asarray(json.load(f)["state"])
        np.testing.assert_allclose(s2, s1, atol=1e-12)

    def test_config_hash_reproducible(self, tmp_path):
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        cfg = self._cfg(tmp_path)
        assert main(["evolve", cfg, "-o", str(out1)]) == 0
        assert main(["evolve", cfg, "-o", str(out2)]) == 0
        r1 = read_rows(out1 / "runlog.csv")
        r2 = read_rows(out2 / "runlog.csv")
        # numeric columns identical except wall-clock time
        for a, b in zip(r1[1:], r2[1:]):
            assert a[:6] == b[:6]


class TestConvergeCommand:
    def test_dt_study_first_order(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.yaml", {
            "fluid": {"mu": 1.0, "gamma": 1.0},
            "particles": [
                {"shape": {"kind": "ellipse", "a": 0.12, "b": 0.08},
                 "center": [0.3, 0.3], "angle": 0.2, "n": 48},
                {"shape": {"kind": "ellipse", "a": 0.08, "b": 0.12},
                 "center": [0.7, 0.65], "angle": -0.1, "n": 48}],
            "solver": FAST_SOLVER,
            "study": {"kind": "dt", "t_end": 0.24,
                      "dts": [0.03, 0.015, 0.0075]}})
        out = tmp_path / "out"
        assert main(["converge", cfg, "-o", str(out)]) == 0
        rows = read_rows(out / "dt_study.csv")
        order = float(rows[-1][3])
        assert 0.8 <= order <= 1.2

    def test_mfs_study_decays(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.yaml",
                        {"fluid": {"mu": 0.7},
                         "study": {"kind": "mfs",
                                   "sweep": [[12, 40], [24, 88], [40, 144]]}})
        out = tmp_path / "out"
        assert main(["converge", cfg, "-o", str(out)]) == 0
        rows = read_rows(out / "mfs_study.csv")
        errs = [float(r[2]) for r in rows[1:]]
        assert errs[-1] < 1e-9
        assert errs[0] / errs[-1] > 100
