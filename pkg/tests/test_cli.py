"""CLI tests: verb wiring, file outputs, exit codes."""

import yaml
import pytest

from safelb.cli import main


def run_ok(capsys, *argv):
    rc = main(list(argv))
    out = capsys.readouterr()
    assert rc == 0, out.err
    return out.out


class TestGenScenarios:
    def test_stdout_document(self, capsys):
        out = run_ok(capsys, "gen-scenarios", "--n", "3", "--count", "2",
                     "--seed", "5")
        doc = yaml.safe_load(out)
        assert doc["count"] == 2
        assert len(doc["scenarios"]) == 2
        assert doc["scenarios"][0]["n_queues"] == 3

    def test_out_writes_file(self, tmp_path, capsys):
        run_ok(capsys, "gen-scenarios", "--n", "3", "--count", "1",
               "--out", str(tmp_path))
        doc = yaml.safe_load((tmp_path / "scenarios.yaml").read_text())
        assert doc["spec"]["n_queues"] == 3


@pytest.fixture
def config_file(tmp_path, capsys):
    main(["gen-scenarios", "--n", "3", "--count", "2", "--seed", "5",
          "--out", str(tmp_path)])
    capsys.readouterr()
    return tmp_path / "scenarios.yaml"


class TestConfigPlumbing:
    def test_solve_rates_from_file(self, config_file, capsys):
        out = run_ok(capsys, "solve-rates", "--config", str(config_file),
                     "--index", "1")
        doc = yaml.safe_load(out)
        assert len(doc["rates"]["xi"]) == 3
        assert sum(doc["rates"]["xi"]) == pytest.approx(
            doc["config"]["arrival_rate"])

    def test_index_out_of_range(self, config_file):
        with pytest.raises(SystemExit):
            main(["solve-rates", "--config", str(config_file),
                  "--index", "7"])

    def test_missing_source_exits(self):
        with pytest.raises(SystemExit):
            main(["solve-rates"])


class TestSimulateVerb:
    def test_metrics_document_and_csv(self, config_file, tmp_path, capsys):
        out_dir = tmp_path / "run"
        out = run_ok(capsys, "simulate", "--config", str(config_file),
                     "--policy", "jsedk:k=25", "--horizon", "5000",
                     "--seed", "3", "--out", str(out_dir))
        doc = yaml.safe_load(out.split("\n", 1)[1])
        assert doc["policy"] == "jsedk:k=25"
        assert doc["n_epochs"] == 4500
        assert len(doc["khat"]) == 3
        csv = (out_dir / "run.csv").read_text().strip().split("\n")
        assert len(csv) == 2
        assert csv[0].startswith("seed,policy,load_ratio,occupancy")

    def test_bad_policy_tag_is_reported(self, config_file, capsys):
        rc = main(["simulate", "--config", str(config_file),
                   "--policy", "jsqd"])
        assert rc == 1
        assert "jsqd" in capsys.readouterr().err


class TestOracleVerb:
    def test_dominance_visible(self, capsys):
        out = run_ok(capsys, "oracle", "--n", "2", "--seed", "5",
                     "--buffer", "6", "--policy", "jsed")
        doc = yaml.safe_load(out)
        assert doc["n_states"] == 49
        assert doc["objective"] <= doc["policies"]["jsed"]["objective"] + 1e-9
        assert len(doc["budget_usage"]) == doc["config"]["n_constrained"]


class TestExperimentVerbs:
    def test_memory_sweep_writes_csv_and_manifest(self, config_file,
                                                  tmp_path, capsys):
        out_dir = tmp_path / "exp"
        out = run_ok(capsys, "exp-memory-sweep", "--config",
                     str(config_file), "--k-list", "1,5", "--horizon",
                     "5000", "--reps", "2", "--out", str(out_dir))
        assert (out_dir / "exp_memory_sweep.csv").exists()
        manifest = yaml.safe_load(
            (out_dir / "exp_memory_sweep.manifest.yaml").read_text())
        assert manifest["config"]["k_list"] == [1, 5]
        assert "aggregates:" in out

    def test_reruns_are_byte_identical(self, config_file, tmp_path,
                                       capsys):
        dirs = []
        for name in ("a", "b"):
            out_dir = tmp_path / name
            run_ok(capsys, "exp-memory-sweep", "--config",
                   str(config_file), "--k-list", "1,5", "--horizon",
                   "5000", "--reps", "2", "--out", str(out_dir))
            dirs.append(out_dir)
        for fname in ("exp_memory_sweep.csv",
                      "exp_memory_sweep.manifest.yaml"):
            assert (dirs[0] / fname).read_bytes() == \
                (dirs[1] / fname).read_bytes()

    def test_lagrange_smoke(self, tmp_path, capsys):
        out = run_ok(capsys, "exp-lagrange", "--n-list", "3", "--reps",
                     "2", "--cap", "3", "--horizon", "2000",
                     "--out", str(tmp_path))
        assert (tmp_path / "exp_lagrange_iterations.csv").exists()
        assert "mean_iterations" in out

    def test_compare_rejects_bad_ratio_grid(self, capsys):
        rc = main(["exp-compare", "--ratios", "0.99"])
        assert rc == 1
        assert "below 0.98" in capsys.readouterr().err


class TestBenchVerb:
    def test_reports_all_kernels(self, capsys):
        out = run_ok(capsys, "bench", "--n", "3", "--horizon", "20000",
                     "--policies", "jsed,jssq")
        doc = yaml.safe_load(out)
        kernels = {r["kernel"] for r in doc["runs"]}
        assert "pure" in kernels
        if doc["has_compiled"]:
            assert "compiled" in kernels
            assert set(doc["compiled_speedup"]) == {"jsed", "jssq"}
        policies = {r["policy"] for r in doc["runs"]}
        assert policies == {"jsed", "jssq"}
