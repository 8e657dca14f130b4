import csv
import json

import pytest

from matchbias.cli import main


def write_config(path, **overrides):
    cfg = {
        "population": {"kind": "prognostic", "a_values": [1 / 3]},
        "matching": {"method": "auto", "band": 2000},
        "simulation": {"n_values": [120], "reps": 2, "master_seed": 7},
        "output": {"dir": str(path.parent / "out")},
    }
    for section, values in overrides.items():
        cfg.setdefault(section, {}).update(values)
    path.write_text(json.dumps(cfg))
    return cfg


def toy_units_csv(path, rows):
    lines = ["id,w,s"] + [f"{i},{w},{s}" for i, (w, s) in enumerate(rows)]
    path.write_text("\n".join(lines) + "\n")


class TestSimulate:
    def test_small_run_writes_outputs(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path)
        rc = main(["simulate", "--config", str(cfg_path)])
        assert rc == 0
        out_dir = tmp_path / "out"
        with open(out_dir / "table.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][0] == "a" and len(rows) == 2
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["tool"] == "matchbias"
        assert set(manifest["files"]) == {"table.csv", "table.md"}
        assert manifest["master_seed"] == 7
        assert len(manifest["cells"]) == 1
        assert (out_dir / "table.md").read_text().startswith("| a |")
        assert "a,n,asymp_bias" in capsys.readouterr().out

    def test_full_grid_has_fifteen_rows(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path,
                     population={"a_values": [1 / 3, 4 / 9, 1.0]},
                     simulation={"n_values": [30, 45, 60, 80, 100], "reps": 1})
        rc = main(["simulate", "--config", str(cfg_path)])
        assert rc == 0
        with open(tmp_path / "out" / "table.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 16  # header + 3 x 5 cells

    def test_missing_config_exits_one(self, capsys):
        assert main(["simulate", "--config", "/nonexistent.json"]) == 1
        assert "config error" in capsys.readouterr().err

    def test_invalid_json_reports_line(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text('{\n  "population": [}\n}')
        assert main(["simulate", "--config", str(cfg_path)]) == 1
        assert f"{cfg_path}:2" in capsys.readouterr().err

    def test_zero_reps_exits_one(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path, simulation={"reps": 0})
        assert main(["simulate", "--config", str(cfg_path)]) == 1
        assert "reps" in capsys.readouterr().err

    def test_flag_overrides(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path)
        rc = main(["simulate", "--config", str(cfg_path),
                   "--out-dir", str(tmp_path / "alt"),
                   "--n", "60", "--reps", "1", "--seed", "99"])
        assert rc == 0
        manifest = json.loads((tmp_path / "alt" / "manifest.json").read_text())
        assert manifest["master_seed"] == 99
        assert manifest["cells"][0]["n"] == 60

    def test_categorical_population(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path,
                     population={"kind": "categorical", "mass_a": 0.1,
                                 "p_in_a": 0.4, "p_out": 0.3})
        assert main(["simulate", "--config", str(cfg_path)]) == 0


class TestMatch:
    def test_toy_csv(self, tmp_path, capsys):
        data = tmp_path / "units.csv"
        toy_units_csv(data, [(1, 0.5), (0, 0.4), (0, 0.7), (1, 0.3), (0, 0.25)])
        rc = main(["match", str(data), "--out-dir", str(tmp_path / "m")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "total_cost" in out and "crossing_matches=False" in out
        with open(tmp_path / "m" / "pairs.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["treated_id", "control_id", "gap"]
        assert len(rows) == 3
        with open(tmp_path / "m" / "summary.csv", newline="") as fh:
            srows = list(csv.reader(fh))
        assert srows[0] == ["method", "band", "capacity", "total_cost"]

    def test_pairs_use_input_ids(self, tmp_path):
        data = tmp_path / "units.csv"
        data.write_text("id,w,s\nu101,1,0.5\nu102,0,0.4\nu103,0,0.7\n")
        assert main(["match", str(data), "--out-dir", str(tmp_path / "m")]) == 0
        with open(tmp_path / "m" / "pairs.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[1] == ["u101", "u102", repr(0.09999999999999998)]

    def test_all_treated_exits_three(self, tmp_path, capsys):
        data = tmp_path / "units.csv"
        toy_units_csv(data, [(1, 0.5), (1, 0.4)])
        assert main(["match", str(data)]) == 3
        assert "zero" in capsys.readouterr().err

    def test_more_treated_than_controls_with_replacement_ok(self, tmp_path):
        data = tmp_path / "units.csv"
        toy_units_csv(data, [(1, 0.5), (1, 0.4), (0, 0.45)])
        assert main(["match", str(data), "--with-replacement",
                     "--out-dir", str(tmp_path / "m")]) == 0

    def test_caliper_emits_dropped(self, tmp_path, capsys):
        data = tmp_path / "units.csv"
        toy_units_csv(data, [(1, 0.1), (1, 0.6), (0, 0.11), (0, 0.9)])
        rc = main(["match", str(data), "--caliper", "0.1",
                   "--out-dir", str(tmp_path / "m")])
        assert rc == 0
        assert "caliper dropped 1 treated units" in capsys.readouterr().out

    def test_unreadable_input(self, capsys):
        assert main(["match", "/does/not/exist.csv"]) == 1


class TestBias:
    def test_prognostic_closed_and_numeric(self, capsys):
        rc = main(["bias", "--prognostic", "--a", "0.4444444444444444"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "0.0803" in out  # 0.080376 printed at 6 decimals, Table value 0.0804
        assert "closed-form" in out and "numeric" in out

    def test_prognostic_a_one_zero_bias(self, capsys):
        assert main(["bias", "--prognostic", "--a", "1"]) == 0
        assert "0.000000" in capsys.readouterr().out

    def test_closed_form_domain_error(self, capsys):
        rc = main(["bias", "--prognostic", "--a", "0.2", "--closed-form"])
        assert rc == 1

    def test_numeric_domain_error(self, capsys):
        assert main(["bias", "--prognostic", "--a", "0.2"]) == 1
        assert "invalid population" in capsys.readouterr().err

    def test_uniform_propensity_reports_pstar(self, capsys):
        rc = main(["bias", "--uniform-propensity", "0.8"])
        assert rc == 0
        assert "p* = 0.200000" in capsys.readouterr().out

    def test_missing_selector(self, capsys):
        assert main(["bias"]) == 1


class TestDiagnose:
    def test_counts(self, tmp_path, capsys):
        data = tmp_path / "units.csv"
        toy_units_csv(data, [(1, 0.6), (0, 0.4), (0, 0.3)])
        assert main(["diagnose", str(data)]) == 0
        out = capsys.readouterr().out
        assert "1 of 3" in out and "rejected" in out

    def test_threshold_flag(self, tmp_path, capsys):
        data = tmp_path / "units.csv"
        toy_units_csv(data, [(1, 0.6), (0, 0.4)])
        assert main(["diagnose", str(data), "--threshold", "0.7"]) == 0
        assert "not rejected" in capsys.readouterr().out


class TestHelp:
    def test_help_lists_subcommands(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for cmd in ("simulate", "match", "bias", "diagnose"):
            assert cmd in out

    def test_subcommand_help_lists_flags(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for flag in ("--config", "--out-dir", "--seed", "--reps", "--n",
                     "--a", "--method", "--band", "--capacity", "--caliper",
                     "--format"):
            assert flag in out
