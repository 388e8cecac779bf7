import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from pouformer import cli
from pouformer.construction import ConstructionError
from pouformer.targets import BUILTIN_TARGETS


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def small_net(tmp_path_factory):
    out = tmp_path_factory.mktemp("net")
    assert cli.main(["dump-params", "--target", "linear1d", "--eps", "0.35", "--out", str(out)]) == 0
    return out


class TestApprox:
    def test_sin1d(self, capsys, tmp_path):
        code, out, _ = run(capsys, "approx", "--target", "sin1d", "--eps", "0.2",
                           "--out", str(tmp_path), "--trace-attention")
        assert code == 0
        assert "P=20 params=1340" in out
        rows = list(csv.DictReader((tmp_path / "report.csv").open()))
        assert rows and all(r["pass"] == "true" for r in rows)
        net = {r["check"]: float(r["measured"]) for r in rows}["network_sup_error"]
        assert net <= 0.2
        for name in ("params.json", "meta.json", "trace.json"):
            assert (tmp_path / name).exists()
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert meta["P"] == 20 and set(meta["pou"]) == {"covering", "values", "M_g"}
        tr = json.loads((tmp_path / "trace.json").read_text())
        A = np.array(tr["blocks"][0]["attention"][0])
        np.testing.assert_allclose(A.sum(axis=0), 1.0, atol=1e-12)

    def test_eps_out_of_range(self, capsys, tmp_path):
        code, _, err = run(capsys, "approx", "--eps", "0.5", "--out", str(tmp_path))
        assert code == 2
        assert "invalid configuration: accuracy precondition violated: epsilon=0.5" in err

    def test_unknown_target(self, capsys, tmp_path):
        code, _, err = run(capsys, "approx", "--target", "nope", "--out", str(tmp_path))
        assert code == 2 and "invalid configuration" in err

    def test_domain_mismatch(self, capsys, tmp_path):
        code, _, err = run(capsys, "approx", "--target", "sin1d", "--domain", "circle",
                           "--out", str(tmp_path))
        assert code == 2 and "circle" in err

    def test_manifold_approx_needs_manifold(self, capsys, tmp_path):
        code, _, _ = run(capsys, "manifold-approx", "--target", "sin1d", "--out", str(tmp_path))
        assert code == 2

    def test_max_tokens_guard(self, capsys, tmp_path):
        code, _, err = run(capsys, "approx", "--eps", "0.2", "--max-tokens", "8",
                           "--out", str(tmp_path))
        assert code == 2 and "max-tokens" in err

    def test_construction_error_exit(self, capsys, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise ConstructionError("indicator restoration precondition violated")

        monkeypatch.setattr(cli, "assemble", boom)
        code, _, err = run(capsys, "approx", "--out", str(tmp_path))
        assert code == 1 and "restoration" in err


class TestConfig:
    def test_flags_override_file(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"target": "linear1d", "eps": 0.5}))
        code, _, err = run(capsys, "dump-params", "--config", str(cfg), "--out", str(tmp_path))
        assert code == 2 and "epsilon=0.5" in err
        code, out, _ = run(capsys, "dump-params", "--config", str(cfg), "--eps", "0.35",
                           "--out", str(tmp_path))
        assert code == 0
        assert json.loads((tmp_path / "meta.json").read_text())["notes"]["target"] == "linear1d"

    def test_unknown_key(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epsilon": 0.2}))
        code, _, err = run(capsys, "approx", "--config", str(cfg), "--out", str(tmp_path))
        assert code == 2 and "unknown config keys" in err

    def test_threads_env(self, monkeypatch):
        monkeypatch.setenv(cli.THREADS_ENV, "3")
        args = cli.build_parser().parse_args(["rates"])
        assert cli.resolve(args)["threads"] == 3
        args = cli.build_parser().parse_args(["rates", "--threads", "1"])
        assert cli.resolve(args)["threads"] == 1


class TestVerify:
    def test_clean_network(self, capsys, small_net):
        code, out, _ = run(capsys, "verify", "--params", str(small_net / "params.json"))
        assert code == 0 and "FAIL" not in out

    def test_perturbed_bias_names_restoration(self, capsys, small_net, tmp_path):
        p = json.loads((small_net / "params.json").read_text())
        d = p["dims"]["d"]
        p["blocks"][0]["ffn"]["b1"][d + 1] = 0.0
        (tmp_path / "params.json").write_text(json.dumps(p))
        (tmp_path / "meta.json").write_text((small_net / "meta.json").read_text())
        code, out, _ = run(capsys, "verify", "--params", str(tmp_path / "params.json"))
        assert code == 1
        assert "failed checks:" in out and "restoration" in out.split("failed checks:")[1]

    def test_missing_files(self, capsys, tmp_path):
        code, _, err = run(capsys, "verify", "--params", str(tmp_path / "params.json"))
        assert code == 2 and "cannot read" in err


class TestRates:
    def test_deterministic_csv(self, capsys, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        argv = ["rates", "--target", "sin1d", "--eps-list", "0.35,0.25,0.18,0.12"]
        code_a, _, _ = run(capsys, *argv, "--out", str(a), "--threads", "1")
        code_b, _, _ = run(capsys, *argv, "--out", str(b), "--threads", "4")
        assert code_a == code_b == 0
        assert (a / "rate.csv").read_bytes() == (b / "rate.csv").read_bytes()
        header = (a / "rate.csv").read_text().splitlines()[0].split(",")
        assert header == ["epsilon", "centers", "expected", "bound", "pass", "sup_error", "n_total"]
        assert json.loads((a / "rate.json").read_text())["passed"] is True

    def test_rejects_increasing_list(self, capsys, tmp_path):
        code, _, _ = run(capsys, "rates", "--eps-list", "0.1,0.2,0.3,0.35", "--out", str(tmp_path))
        assert code == 2


class TestDumpParams:
    def test_summary(self, capsys, small_net):
        code, out, _ = run(capsys, "dump-params", "--params", str(small_net / "params.json"))
        info = json.loads(out)
        assert code == 0
        assert info["D"] == 5 and info["L"] == 2
        assert info["param_count"] == 10 * info["P"] * 5 + 9 + 95 + 236

    def test_module_entry_point(self, small_net):
        res = subprocess.run([sys.executable, "-m", "pouformer", "dump-params", "--params",
                              str(small_net / "params.json")], capture_output=True, text=True)
        assert res.returncode == 0 and json.loads(res.stdout)["L"] == 2


def test_builtin_names_listed_in_help():
    text = cli.build_parser().format_help()
    assert "approx" in text and "generalize" in text
    assert "linear1d" in BUILTIN_TARGETS
