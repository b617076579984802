"""Tests for the command-line front end."""

import csv
import json
from unittest.mock import patch

import pytest

from borderlab.artifacts import Manifest, git_blob_sha1
from borderlab.cli import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_NUMERIC,
    EXIT_OK,
    main,
    resolved_config,
    run,
)
from borderlab.config import parse_config
from borderlab.necessary import INVARIANCE_EXCLUDED


def flow_data(x0=(0.75,), step=0.01):
    return {
        "command": "flow",
        "seed": 7,
        "domain": {"kind": "interval", "alpha": 0.0, "beta": 1.0},
        "flow": {
            "field": {"kind": "example", "id": "ex31"},
            "x0": list(x0),
            "horizon": 2.0,
            "step": step,
        },
    }


def sde_data(seed=11):
    return {
        "command": "sde",
        "seed": seed,
        "sde": {
            "coefficients": {"kind": "ornstein_uhlenbeck", "dimension": 2},
            "x0": [1.0, -0.5],
            "horizon": 1.0,
            "step": 0.01,
            "n_paths": 50,
            "recorded_paths": 4,
        },
    }


def pdmp_data():
    return {
        "command": "pdmp",
        "seed": 5,
        "domain": {"kind": "interval", "alpha": -1.0, "beta": 1.0},
        "pdmp": {
            "modes": ["left", "right"],
            "transition": [[0, 1], [1, 0]],
            "rates": [2.0, 1.0],
            "velocities": [[-0.1], [0.1]],
            "mode0": "left",
            "x0": [0.0],
            "horizon": 5.0,
            "step": 0.05,
            "n_paths": 3000,
        },
    }


def write_config(tmp_path, data):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(data))
    return path


def read_csv(path):
    with path.open(newline="") as f:
        return list(csv.reader(f))


def read_json(path):
    return json.loads(path.read_text())


class TestRunFlow:
    """Tests for the flow command."""

    def test_ex31_hits_at_one(self, tmp_path):
        """Should end the CSV on the boundary at t = 1 from x0 = 0.75."""
        assert run(parse_config(flow_data()), out_dir=tmp_path) == EXIT_OK
        rows = read_csv(tmp_path / "flow.csv")
        assert rows[0] == ["t", "x1", "delta"]
        t, x, delta = (float(v) for v in rows[-1])
        assert abs(t - 1.0) <= 1e-5
        assert 0.0 <= delta <= 1e-9
        summary = read_json(tmp_path / "flow.json")["summary"]
        assert summary["hit"] is True
        assert summary["hit_time"] == pytest.approx(1.0, abs=1e-5)

    def test_summary_embeds_config(self, tmp_path):
        """Should embed the resolved config without workers or output directory."""
        config = parse_config(flow_data())
        run(config, out_dir=tmp_path, workers=3)
        data = read_json(tmp_path / "flow.json")
        assert data["config"] == resolved_config(config)
        assert "workers" not in data["config"]
        assert "out" not in data["config"]
        assert data["config"]["flow"]["hit_tolerance"] == 1e-9

    def test_start_outside_domain_is_numeric_failure(self, tmp_path):
        """Should exit 3 when the start lies outside the domain."""
        out = tmp_path / "out"
        assert run(parse_config(flow_data(x0=(1.5,))), out_dir=out) == EXIT_NUMERIC
        assert not out.exists()

    def test_dimension_mismatch_is_config_error(self, tmp_path):
        """Should exit 2 when x0 does not match the field."""
        out = tmp_path / "out"
        assert run(parse_config(flow_data(x0=(0.5, 0.5))), out_dir=out) == EXIT_CONFIG
        assert not out.exists()

    def test_unwritable_output(self, tmp_path):
        """Should exit 1 when the output directory cannot be created."""
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        assert run(parse_config(flow_data()), out_dir=blocker / "out") == EXIT_IO


class TestManifest:
    """Tests for emit_manifest through run."""

    def test_manifest_lists_outputs(self, tmp_path):
        """Should hash every output like git and validate against the schema."""
        run(parse_config(flow_data()), out_dir=tmp_path, run_id="abc123")
        manifest = Manifest.model_validate(read_json(tmp_path / "manifest.json"))
        assert manifest.run_id == "abc123"
        assert manifest.command == "flow"
        assert manifest.seed == 7
        assert [o.name for o in manifest.outputs] == ["flow.csv", "flow.json"]
        for output in manifest.outputs:
            data = (tmp_path / output.name).read_bytes()
            assert output.sha1 == git_blob_sha1(data)
            assert output.size == len(data)

    def test_same_seed_same_hashes(self, tmp_path):
        """Should reproduce byte-identical outputs for the same config and seed."""
        config = parse_config(sde_data())
        run(config, out_dir=tmp_path / "a")
        run(config, out_dir=tmp_path / "b", workers=2)
        a = read_json(tmp_path / "a" / "manifest.json")["outputs"]
        b = read_json(tmp_path / "b" / "manifest.json")["outputs"]
        assert a == b

    def test_changed_seed_changes_paths(self, tmp_path):
        """Should change the path CSV but not its schema when the seed changes."""
        run(parse_config(sde_data(seed=11)), out_dir=tmp_path / "a")
        run(parse_config(sde_data(seed=12)), out_dir=tmp_path / "b")
        a = {o["name"]: o for o in read_json(tmp_path / "a" / "manifest.json")["outputs"]}
        b = {o["name"]: o for o in read_json(tmp_path / "b" / "manifest.json")["outputs"]}
        assert a["sde.csv"]["sha1"] != b["sde.csv"]["sha1"]
        rows_a = read_csv(tmp_path / "a" / "sde.csv")
        rows_b = read_csv(tmp_path / "b" / "sde.csv")
        assert rows_a[0] == rows_b[0] == ["t", "path", "x1", "x2"]
        assert len(rows_a) == len(rows_b)


class TestRunCommands:
    """Tests for the remaining commands."""

    def test_sde_records_paths(self, tmp_path):
        """Should record the requested paths and skip the moment estimate for few paths."""
        assert run(parse_config(sde_data()), out_dir=tmp_path) == EXIT_OK
        rows = read_csv(tmp_path / "sde.csv")
        assert len(rows) == 1 + 4 * 101
        assert rows[1][:2] == ["0.0", "0"]
        assert [float(v) for v in rows[1][2:]] == [1.0, -0.5]
        summary = read_json(tmp_path / "sde.json")["summary"]
        assert "sup_moment" not in summary
        assert "lambda0" in summary

    def test_zeta_hoelder(self, tmp_path):
        """Should classify the square-root profile and report its inverse."""
        data = {
            "command": "zeta",
            "seed": 1,
            "domain": {"kind": "interval", "alpha": 0.0, "beta": 1.0},
            "zeta": {"field": {"kind": "profile", "profile": "hoelder", "parameter": 0.5}},
        }
        assert run(parse_config(data), out_dir=tmp_path) == EXIT_OK
        rows = read_csv(tmp_path / "zeta.csv")
        assert rows[0] == ["eps", "zeta", "raw", "sup"]
        assert len(rows) == 21
        summary = read_json(tmp_path / "zeta.json")["summary"]
        assert summary["verdict"] == INVARIANCE_EXCLUDED
        assert set(summary["inverse"]) == {"0.5", "0.9", "0.99"}

    def test_zeta_eps_min_above_eps0(self, tmp_path):
        """Should reject a grid that does not reach below eps0."""
        data = {
            "command": "zeta",
            "seed": 1,
            "domain": {"kind": "interval", "alpha": 0.0, "beta": 1.0},
            "zeta": {
                "field": {"kind": "profile", "profile": "hoelder", "parameter": 0.5},
                "eps_min": 0.5,
            },
        }
        assert run(parse_config(data), out_dir=tmp_path / "out") == EXIT_CONFIG

    def test_value_ex31(self, tmp_path):
        """Should estimate one value per start."""
        data = {
            "command": "value",
            "seed": 2,
            "domain": {"kind": "interval", "alpha": 0.0, "beta": 1.0},
            "value": {
                "coefficients": {"kind": "field", "field": {"kind": "example", "id": "ex31"}},
                "starts": [[0.75], [0.5]],
                "lam": 1.0,
                "horizon_cut": 20.0,
                "n_paths": 2,
                "step": 0.001,
            },
        }
        assert run(parse_config(data), out_dir=tmp_path) == EXIT_OK
        rows = read_csv(tmp_path / "value.csv")
        assert rows[0] == ["start", "x1", "policy", "mean", "std_error", "upper"]
        assert len(rows) == 3
        summary = read_json(tmp_path / "value.json")["summary"]
        assert len(summary["values"]) == 2

    def _value_data(self, **section):
        data = {
            "command": "value",
            "seed": 2,
            "domain": {"kind": "interval", "alpha": 0.1, "beta": 0.9},
            "value": {
                "coefficients": {"kind": "field", "field": {"kind": "example", "id": "ex32"}},
                "starts": [[0.3]],
                "horizon_cut": 5.0,
                "n_paths": 8,
                "step": 0.01,
                "threshold_samples": 16,
            },
        }
        data["value"].update(section)
        return data

    def test_value_lambda_defaults_to_threshold(self, tmp_path):
        """Should take lambda = max(lambda_min, 1) when the section omits it."""
        assert run(parse_config(self._value_data()), out_dir=tmp_path) == EXIT_OK
        summary = read_json(tmp_path / "value.json")["summary"]
        lambda_min = summary["lambda_threshold"]["lambda_min"]
        assert summary["lambda_source"] == "threshold"
        assert summary["lambda"] == max(lambda_min, 1.0)
        assert summary["lambda"] >= 1.0
        assert summary["lambda_meets_threshold"] is True
        assert summary["values"][0]["lambda"] == summary["lambda"]

    def test_value_explicit_lambda(self, tmp_path):
        """Should keep a configured lambda and still report the threshold."""
        data = self._value_data(lam=50.0)
        assert run(parse_config(data), out_dir=tmp_path) == EXIT_OK
        summary = read_json(tmp_path / "value.json")["summary"]
        assert summary["lambda_source"] == "config"
        assert summary["lambda"] == 50.0

    def test_value_enforced_threshold_rejects_small_lambda(self, tmp_path):
        """Should exit 3 without artifacts when lambda is below lambda_min."""
        out = tmp_path / "out"
        data = self._value_data(lam=0.5, enforce_threshold=True)
        assert run(parse_config(data), out_dir=out) == EXIT_NUMERIC
        assert not out.exists()

    def test_value_enforced_threshold_accepts_default(self, tmp_path):
        """Should pass the enforced check with the threshold-derived default."""
        data = self._value_data(enforce_threshold=True)
        assert run(parse_config(data), out_dir=tmp_path) == EXIT_OK

    def test_value_exterior_indicator(self, tmp_path):
        """Should report V_K when the exterior indicator is selected."""
        data = self._value_data(lam=2.0, exterior=True)
        del data["value"]["threshold_samples"]
        assert run(parse_config(data), out_dir=tmp_path) == EXIT_OK
        summary = read_json(tmp_path / "value.json")["summary"]
        assert summary["indicator"] == "exterior"
        assert "lambda_threshold" not in summary

    def test_pdmp(self, tmp_path):
        """Should report occupations, both stationary laws and the boundary check."""
        assert run(parse_config(pdmp_data()), out_dir=tmp_path) == EXIT_OK
        rows = read_csv(tmp_path / "pdmp.csv")
        assert rows[0] == ["path", "jumps", "final_mode", "x1", "occupation_left", "occupation_right"]
        assert len(rows) == 3001
        summary = read_json(tmp_path / "pdmp.json")["summary"]
        assert summary["embedded_stationary"] == pytest.approx([0.5, 0.5])
        assert summary["time_stationary"] == pytest.approx([1 / 3, 2 / 3])
        assert summary["min_distance"] > 0
        assert summary["boundary_check"]["satisfied"] is False

    def test_phage_defaults_avoid_the_border(self, tmp_path):
        """Should report zero boundary hits for the default rates."""
        data = {"command": "phage", "seed": 3, "phage": {"n_paths": 200, "horizon": 5.0}}
        assert run(parse_config(data), out_dir=tmp_path) == EXIT_OK
        summary = read_json(tmp_path / "phage.json")["summary"]
        assert summary["hit_count"] == 0
        assert summary["total_hit_count"] == 0
        assert summary["min_distance"] > 0
        rows = read_csv(tmp_path / "phage.csv")
        assert rows[0] == ["rate_vector", "start", "path", "min_log10_distance"]
        assert len(rows) == 201

    def test_phage_cartesian_check(self, tmp_path):
        """Should state the chart coordinates and add a Cartesian cross-check."""
        data = {
            "command": "phage",
            "seed": 3,
            "phage": {"n_paths": 50, "horizon": 2.0, "cartesian_paths": 40},
        }
        assert run(parse_config(data), out_dir=tmp_path) == EXIT_OK
        summary = read_json(tmp_path / "phage.json")["summary"]
        assert summary["coordinates"] == "chart"
        assert summary["hits_detectable"] is False
        check = summary["cartesian_check"]
        assert check["n_paths"] == 40
        assert check["hit_count"] == 0
        assert check["min_distance"] > 0
        assert len(read_csv(tmp_path / "phage.csv")) == 51

    def test_phage_sweep(self, tmp_path):
        """Should run the base rates plus the random rate vectors."""
        data = {
            "command": "phage",
            "seed": 4,
            "phage": {"n_paths": 50, "horizon": 2.0, "random_rate_vectors": 2},
        }
        assert run(parse_config(data), out_dir=tmp_path) == EXIT_OK
        summary = read_json(tmp_path / "phage.json")["summary"]
        assert len(summary["sweep"]) == 3
        assert summary["total_hit_count"] == 0
        assert len(read_csv(tmp_path / "phage.csv")) == 1 + 3 * 50


class TestMain:
    """Tests for main."""

    def test_runs_config(self, tmp_path):
        """Should run the config and write into --out."""
        path = write_config(tmp_path, flow_data())
        out = tmp_path / "results"
        assert main(["--config", str(path), "--out", str(out)]) == EXIT_OK
        assert (out / "manifest.json").exists()

    def test_seed_flag_overrides(self, tmp_path):
        """Should take the seed from --seed."""
        path = write_config(tmp_path, flow_data())
        out = tmp_path / "results"
        main(["--config", str(path), "--seed", "123", "--out", str(out)])
        assert read_json(out / "manifest.json")["seed"] == 123

    def test_negative_step_writes_nothing(self, tmp_path, caplog):
        """Should exit 2 with a field diagnostic and no artifacts."""
        path = write_config(tmp_path, flow_data(step=-0.01))
        out = tmp_path / "results"
        assert main(["--config", str(path), "--out", str(out)]) == EXIT_CONFIG
        assert not out.exists()
        assert "flow.step" in caplog.text

    def test_missing_config_flag(self):
        """Should exit through argparse without --config."""
        with pytest.raises(SystemExit):
            main([])

    def test_non_positive_workers(self, tmp_path):
        """Should reject --workers 0."""
        path = write_config(tmp_path, flow_data())
        with pytest.raises(SystemExit):
            main(["--config", str(path), "--workers", "0"])

    def test_workers_from_environment(self, tmp_path):
        """Should fall back to BORDERLAB_WORKERS and produce the same outputs."""
        path = write_config(tmp_path, sde_data())
        with patch.dict("os.environ", {"BORDERLAB_WORKERS": "2"}):
            main(["--config", str(path), "--out", str(tmp_path / "env")])
        main(["--config", str(path), "--workers", "1", "--out", str(tmp_path / "flag")])
        env = read_json(tmp_path / "env" / "manifest.json")["outputs"]
        flag = read_json(tmp_path / "flag" / "manifest.json")["outputs"]
        assert env == flag


def _with_domain(data, domain):
    data["domain"] = domain
    return data


def _with_transition(transition):
    data = pdmp_data()
    data["pdmp"]["transition"] = transition
    return data


class TestInvalidGeometry:
    """Tests for domains and transition matrices rejected before any run."""

    @pytest.mark.parametrize(
        ("data", "field"),
        [
            (_with_domain(flow_data(), {"kind": "interval", "alpha": 1.0, "beta": 0.0}), "alpha < beta"),
            (_with_domain(flow_data(), {"kind": "interval", "alpha": 0.0, "beta": 1.0, "eps0": 0.9}), "eps0"),
            (_with_domain(flow_data(), {"kind": "ball", "center": [0.5], "radius": 0.5, "eps0": 0.5}), "eps0"),
            (
                _with_domain(
                    flow_data(x0=(0.75, 0.0)), {"kind": "annulus", "r_inner": 1.0, "r_outer": 0.5}
                ),
                "r_inner < r_outer",
            ),
            (
                _with_domain(
                    flow_data(x0=(0.75, 0.0)),
                    {"kind": "annulus", "r_inner": 0.5, "r_outer": 1.0, "eps0": 0.3},
                ),
                "eps0",
            ),
            (_with_transition([[0, 0.5], [1, 0]]), "sums to 0.5"),
            (_with_transition([[0.5, 0.5], [1, 0]]), "non-zero diagonal"),
        ],
    )
    def test_exits_config_without_artifacts(self, tmp_path, caplog, data, field):
        """Should exit 2 with a diagnostic and write nothing."""
        path = write_config(tmp_path, data)
        out = tmp_path / "results"
        assert main(["--config", str(path), "--out", str(out)]) == EXIT_CONFIG
        assert not out.exists()
        assert field in caplog.text
