import json

import numpy as np
import pytest

from vcsplit import KernelSet, ThetaParam, ar1_eigen_kernel, gen_data
from vcsplit.cli import main
from vcsplit.io import (
    config_hash,
    load_kernel_set,
    read_kernel,
    read_resistor_csv,
    read_response,
    write_kernel_dense,
    write_kernel_diag,
    write_response,
)


@pytest.fixture
def diag_files(tmp_path):
    """Response + two diagonal kernel files for a small simulated dataset."""
    lam = np.column_stack([ar1_eigen_kernel(40, 0.9), ar1_eigen_kernel(40, 0.4)])
    ks = KernelSet.from_eigs(lam)
    y = gen_data(ThetaParam(h2=[0.4, 0.0], tau2=2.0), ks, seed=3)
    resp = tmp_path / "y.csv"
    write_response(y, resp)
    k1, k2 = tmp_path / "k1.csv", tmp_path / "k2.csv"
    write_kernel_diag(lam[:, 0], k1)
    write_kernel_diag(lam[:, 1], k2)
    return resp, [k1, k2], lam, y


class TestIoRoundTrips:
    def test_response(self, tmp_path, rng):
        y = rng.standard_normal(17)
        write_response(y, tmp_path / "y.csv")
        back = read_response(tmp_path / "y.csv")
        np.testing.assert_array_equal(back.y, y)

    def test_response_rejects_bad_header(self, tmp_path):
        (tmp_path / "bad.csv").write_text("value\n1.0\n")
        from vcsplit import InvalidParameterError

        with pytest.raises(InvalidParameterError):
            read_response(tmp_path / "bad.csv")

    def test_response_error_names_line(self, tmp_path):
        (tmp_path / "bad.csv").write_text("y\n1.0\nnope\n")
        from vcsplit import InvalidParameterError

        with pytest.raises(InvalidParameterError, match=":3"):
            read_response(tmp_path / "bad.csv")

    def test_kernel_sniffing(self, tmp_path, rng):
        from conftest import random_psd

        K = random_psd(rng, 5)
        write_kernel_dense(K, tmp_path / "k.csv")
        kind, data = read_kernel(tmp_path / "k.csv")
        assert kind == "dense"
        np.testing.assert_allclose(data, K, atol=1e-12)
        write_kernel_diag(np.arange(4.0), tmp_path / "d.csv")
        kind, data = read_kernel(tmp_path / "d.csv")
        assert kind == "diag"
        np.testing.assert_array_equal(data, np.arange(4.0))

    def test_mixed_kernels_expand_dense(self, tmp_path, rng):
        from conftest import random_psd

        K = random_psd(rng, 4)
        write_kernel_dense(K, tmp_path / "k.csv")
        write_kernel_diag(np.ones(4), tmp_path / "d.csv")
        ks = load_kernel_set([tmp_path / "k.csv", tmp_path / "d.csv"])
        assert not ks.is_diagonal and ks.n_components == 2

    def test_resistor_loader_shape(self, tmp_path):
        lines = ["unit,rater,rep,y"]
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    lines.append(f"u{i},r{j},{k},{i + 10 * j + 0.5 * k}")
        (tmp_path / "r.csv").write_text("\n".join(lines) + "\n")
        y, dims = read_resistor_csv(tmp_path / "r.csv")
        assert dims == (2, 2, 2)
        assert y[0] == 0.0 and y[1] == 0.5

    def test_config_hash_stable(self):
        a = config_hash({"b": 1, "a": [1, 2]})
        b = config_hash({"a": [1, 2], "b": 1})
        assert a == b
        assert a != config_hash({"a": [1, 2], "b": 2})


class TestCliCommands:
    def test_fit_and_determinism(self, diag_files, tmp_path, capsys):
        resp, kernels, lam, y = diag_files
        out = tmp_path / "out"
        argv = ["fit", "--response", str(resp), "--kernels", *map(str, kernels),
                "--out", str(out)]
        assert main(argv) == 0
        rec1 = (out / "fit.json").read_text()
        capsys.readouterr()
        assert main(argv) == 0
        rec2 = (out / "fit.json").read_text()
        assert rec1 == rec2  # byte-identical rerun
        rec = json.loads(rec1)
        assert rec["converged"]
        assert len(rec["sigma2"]) == 3
        assert rec["config_hash"]

    def test_fit_recovers_simulated_truth_loosely(self, diag_files, tmp_path):
        resp, kernels, lam, y = diag_files
        out = tmp_path / "o2"
        main(["fit", "--response", str(resp), "--kernels", *map(str, kernels),
              "--out", str(out)])
        rec = json.loads((out / "fit.json").read_text())
        assert 0.0 <= rec["h2"][0] <= 0.9  # single realization, loose band

    def test_test_command(self, diag_files, tmp_path):
        resp, kernels, _, _ = diag_files
        out = tmp_path / "t"
        code = main(["test", "--response", str(resp), "--kernels", *map(str, kernels),
                     "--null", "h2=0", "--k", "2", "--seed-split", "5",
                     "--seed-u", "6", "--out", str(out)])
        assert code == 0
        rec = json.loads((out / "test.json").read_text())
        assert rec["k"] == 2
        assert 0.0 <= rec["p_value"] <= 1.0
        assert rec["seeds"] == {"split": 5, "u": 6, "master": 20260810}

    def test_ci_command_with_curve(self, diag_files, tmp_path):
        resp, kernels, _, _ = diag_files
        out = tmp_path / "ci"
        code = main(["ci", "--response", str(resp), "--kernels", *map(str, kernels),
                     "--component", "1", "--grid", "0:0.9:8", "--out", str(out)])
        assert code in (0, 3)
        rec = json.loads((out / "ci.json").read_text())
        curve = (out / "ci_curve.tsv").read_text().splitlines()
        assert curve[0].split("\t") == ["value", "log_stat", "log_threshold"]
        assert len(curve) == 9
        if code == 0:
            assert rec["lower"] <= rec["upper"]

    def test_simulate_command(self, tmp_path):
        out = tmp_path / "sim"
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "scenario": "coverage", "n": 40, "replications": 5,
            "truth_grid": [[0.0, 0.0]], "out": str(out),
        }))
        assert main(["simulate", "--config", str(cfg)]) == 0
        table = (out / "coverage.tsv").read_text().splitlines()
        assert len(table) == 2
        manifest = json.loads((out / "coverage_manifest.json").read_text())
        assert manifest["rows"] == 1

    def test_diagnose_command(self, tmp_path):
        ks = KernelSet.from_crossed((5, 3, 2), n_factors=2)
        from vcsplit import Sigma2Param

        y = gen_data(Sigma2Param(np.array([1.0, 4.0, 2.0])), ks, seed=8)
        resp = tmp_path / "y.csv"
        write_response(y, resp)
        out = tmp_path / "diag"
        code = main(["diagnose", "--response", str(resp), "--dims", "5", "3", "2",
                     "--factors", "2", "--out", str(out)])
        assert code == 0
        qq = (out / "qq.tsv").read_text().splitlines()
        assert len(qq) == 31
        assert (out / "residual_vs_fitted.tsv").exists()

    def test_kernels_generators(self, tmp_path):
        out = tmp_path / "k"
        assert main(["kernels", "--generator", "ar1-eigen", "--param", "n=6",
                     "--param", "rho=0.5", "--out", str(out)]) == 0
        kind, lam = read_kernel(out / "ar1_eigen.csv")
        assert kind == "diag" and lam.size == 6
        assert main(["kernels", "--generator", "crossed", "--param", "dims=[3,2]",
                     "--out", str(out)]) == 0
        assert main(["kernels", "--generator", "spiked-pair", "--param", "n=20",
                     "--param", "q1=4", "--param", "q2=6", "--out", str(out)]) == 0
        assert main(["kernels", "--generator", "disjoint-support", "--param", "n=12",
                     "--param", "m=2", "--out", str(out)]) == 0

    def test_spiked_pair_rejects_equal_q(self, tmp_path):
        out = tmp_path / "bad"
        code = main(["kernels", "--generator", "spiked-pair", "--param", "n=20",
                     "--param", "q1=5", "--param", "q2=5", "--out", str(out)])
        assert code == 2  # numerical/design failure


class TestCliErrors:
    def test_usage_error_exit_1(self):
        assert main(["fit"]) == 1  # missing response

    def test_unknown_command_exit_1(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_length_mismatch_exit_1(self, diag_files, tmp_path):
        resp, kernels, _, _ = diag_files
        short = tmp_path / "short.csv"
        write_response(np.ones(3), short)
        code = main(["fit", "--response", str(short),
                     "--kernels", *map(str, kernels), "--out", str(tmp_path)])
        assert code == 1

    def test_empty_ci_exit_3(self, tmp_path):
        lam = np.linspace(30, 0.1, 120)[:, None]
        ks = KernelSet.from_eigs(lam)
        y = gen_data(ThetaParam(h2=[0.05], tau2=1.0), ks, seed=8)
        resp = tmp_path / "y.csv"
        write_response(y, resp)
        k1 = tmp_path / "k1.csv"
        write_kernel_diag(lam[:, 0], k1)
        codes = set()
        for seed in range(6):
            code = main(["ci", "--response", str(resp), "--kernels", str(k1),
                         "--component", "1", "--grid", "0.97:0.985:3",
                         "--seed-split", str(seed), "--out", str(tmp_path / f"e{seed}")])
            codes.add(code)
        assert 3 in codes  # at least one empty acceptance set over seeds
