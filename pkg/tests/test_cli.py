import json
import math
import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose

from assocmodel import DataFormatError, read_table_csv
from assocmodel.cli import ingest_conditional_csv, main

FIXTURE_CSV = "stratum,v1,z1,weight\n0,0,0,10\n0,0,1,30\n1,1,0,20\n1,1,1,40\n"


def write(path, text):
    path.write_text(text)
    return str(path)


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


class TestIngest:
    def test_fixture_strata_sizes(self, tmp_path):
        d = ingest_conditional_csv(write(tmp_path / "d.csv", FIXTURE_CSV))
        assert_allclose(d.n_vec, [40, 60])

    def test_duplicates_collapse(self, tmp_path):
        rows = "stratum,v1,z1\n" + "0,0,0\n" * 3 + "0,0,1\n" + "1,1,1\n" * 2
        d = ingest_conditional_csv(write(tmp_path / "d.csv", rows))
        assert d.z.shape[0] == 3
        assert_allclose(sorted(d.weights), [1, 2, 3])

    @pytest.mark.parametrize("text,match", [
        ("", "empty"),
        ("stratum,v1,z1\n0,1,0\n1,1,1\n", "row 2: reference"),
        ("stratum,v1,z1\n1,1,0\n1,1,1\n", "stratum 0"),
        ("stratum,v1,z1\n0,0,0\n1,1,0\n1,2,1\n", "row 4: v differs"),
        ("stratum,v1,z1\n0,0,0\n1,1,abc\n", "row 3: non-numeric"),
        ("stratum,v1,z1\n0,0,0\n1,1\n", "row 3"),
        ("k,v1,z1\n0,0,0\n", "stratum"),
    ])
    def test_errors(self, tmp_path, text, match):
        with pytest.raises(DataFormatError, match=match):
            ingest_conditional_csv(write(tmp_path / "d.csv", text))


class TestCommands:
    def test_fit_report(self, tmp_path):
        data = write(tmp_path / "d.csv", FIXTURE_CSV)
        assert main(["fit", "--data", data, "--out", str(tmp_path / "o")]) == 0
        rep = json.loads((tmp_path / "o" / "report.json").read_text())
        assert_allclose(rep["theta_hat"], [math.log(2 / 3)], atol=1e-8)
        assert_allclose(rep["se"], [0.456435], atol=1e-6)
        assert rep["theta_layout"] == {"order": "row-major", "shape": [1, 1],
                                       "names": ["theta[0,0]"]}
        assert rep["wald_tests"][0]["df"] == 1
        assert "theta[0,0]" in (tmp_path / "o" / "summary.txt").read_text()

    def test_flags_override_config(self, tmp_path):
        data = write(tmp_path / "d.csv", FIXTURE_CSV)
        cfg = write(tmp_path / "c.toml", "[fit]\nlevel = 0.5\n")
        main(["fit", "--data", data, "--config", cfg, "--out", str(tmp_path / "a")])
        main(["fit", "--data", data, "--config", cfg, "--level", "0.9",
              "--out", str(tmp_path / "b")])
        a = json.loads((tmp_path / "a" / "report.json").read_text())
        b = json.loads((tmp_path / "b" / "report.json").read_text())
        assert a["level"] == 0.5 and b["level"] == 0.9

    def test_fit_reverse(self, tmp_path):
        table = write(tmp_path / "t.csv", "z\\v,0,1\n0,10,20\n1,30,40\n")
        assert main(["fit-reverse", "--data", table, "--out", str(tmp_path / "o")]) == 0
        rep = json.loads((tmp_path / "o" / "report.json").read_text())
        assert rep["conditioning"] == "x"
        assert_allclose(rep["theta_hat"], [math.log(2 / 3)], atol=1e-8)

    def test_construct(self, tmp_path):
        cfg = write(tmp_path / "c.toml",
                    "[construct]\npi_x = [0.6, 0.4]\npi_y = [0.5, 0.5]\npsi = [[0.6931471805599453]]\n")
        assert main(["construct", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        P, Z, V = read_table_csv(tmp_path / "o" / "joint.csv")
        assert_allclose(P.sum(axis=1), [0.6, 0.4], atol=1e-12)
        assert_allclose(np.log(P[0, 0] * P[1, 1] / (P[0, 1] * P[1, 0])), math.log(2), atol=1e-10)

    def test_construct_from_theta(self, tmp_path):
        cfg = write(tmp_path / "c.toml", """
[construct]
pi_x = [0.5, 0.25, 0.25]
pi_y = [0.5, 0.5]
z_support = [[0.0], [1.0], [2.0]]
v_support = [[0.0], [1.0]]
theta = [0.4]
""")
        assert main(["construct", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        P, Z, _ = read_table_csv(tmp_path / "o" / "joint.csv")
        L = np.log(P)
        assert_allclose(L[1:, 1] - L[1:, 0] - L[0, 1] + L[0, 0], [0.4, 0.8], atol=1e-10)

    def test_simulate_is_byte_identical(self, tmp_path):
        cfg = write(tmp_path / "c.toml", "[simulate]\nkind = \"coverage\"\nn = 300\n")
        for name in ("a", "b"):
            assert main(["simulate", "--config", cfg, "--seed", "11", "--replicates", "25",
                         "--out", str(tmp_path / name)]) == 0
        for f in ("summary.json", "mc.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        main(["simulate", "--config", cfg, "--seed", "12", "--replicates", "25",
              "--out", str(tmp_path / "c")])
        assert (tmp_path / "a" / "summary.json").read_bytes() != \
            (tmp_path / "c" / "summary.json").read_bytes()

    def test_fit_is_byte_identical(self, tmp_path):
        data = write(tmp_path / "d.csv", FIXTURE_CSV)
        for name in ("a", "b"):
            main(["fit", "--data", data, "--out", str(tmp_path / name)])
        assert (tmp_path / "a" / "report.json").read_bytes() == \
            (tmp_path / "b" / "report.json").read_bytes()

    def test_verify(self, tmp_path, capsys):
        assert main(["verify", "--out", str(tmp_path / "v")]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") >= 6
        assert json.loads((tmp_path / "v" / "verify.json").read_text())["all_passed"]


class TestExitCodes:
    def test_separated_table_is_convergence_error(self, tmp_path, capsys):
        table = write(tmp_path / "t.csv", "z\\v,0,1\n0,10,0\n1,0,10\n")
        out = tmp_path / "o"
        assert main(["fit-reverse", "--data", table, "--out", str(out)]) == 4
        assert error_of(capsys)["category"] == "convergence"
        assert not out.exists()

    def test_separated_strata_file_is_convergence_error(self, tmp_path, capsys):
        data = write(tmp_path / "d.csv", "stratum,v1,z1,weight\n0,0,0,10\n1,1,1,10\n")
        assert main(["fit", "--data", data]) == 4

    def test_rank_deficient_v_is_identifiability_error(self, tmp_path, capsys):
        rows = ["stratum,v1,v2,z1,weight"]
        for k, (a, b) in enumerate([(0, 0), (1, 2), (2, 4)]):
            rows += [f"{k},{a},{b},0,5", f"{k},{a},{b},1,{7 + k}"]
        data = write(tmp_path / "d.csv", "\n".join(rows) + "\n")
        cfg = write(tmp_path / "c.toml", "[model]\nkind = \"log_bilinear\"\nk_x = 1\nk_y = 2\n")
        assert main(["fit", "--data", data, "--config", cfg]) == 5
        assert error_of(capsys)["category"] == "identifiability"

    def test_malformed_config_writes_nothing(self, tmp_path, capsys):
        data = write(tmp_path / "d.csv", FIXTURE_CSV)
        cfg = write(tmp_path / "c.toml", "[model\nkind = ")
        out = tmp_path / "o"
        assert main(["fit", "--data", data, "--config", cfg, "--out", str(out)]) == 2
        assert error_of(capsys)["category"] == "config"
        assert not out.exists()

    @pytest.mark.parametrize("argv", [
        ["fit"],
        ["fit", "--data", "/nonexistent.csv"],
        ["construct"],
        ["bogus"],
        ["fit", "--level", "abc"],
    ])
    def test_config_errors(self, argv, capsys):
        assert main(argv) == 2

    def test_model_dimension_mismatch(self, tmp_path, capsys):
        data = write(tmp_path / "d.csv", FIXTURE_CSV)
        cfg = write(tmp_path / "c.toml", "[model]\nkind = \"log_bilinear\"\nk_x = 2\nk_y = 1\n")
        assert main(["fit", "--data", data, "--config", cfg]) == 2

    def test_data_error(self, tmp_path, capsys):
        data = write(tmp_path / "d.csv", "stratum,v1,z1\n0,0,x\n1,1,1\n")
        assert main(["fit", "--data", data]) == 3
        assert error_of(capsys)["category"] == "data"

    def test_module_entry_point(self, tmp_path):
        data = write(tmp_path / "d.csv", "stratum,v1,z1,weight\n0,0,0,10\n1,1,1,10\n")
        proc = subprocess.run([sys.executable, "-m", "assocmodel", "fit", "--data", data],
                              capture_output=True, text=True)
        assert proc.returncode == 4
        assert json.loads(proc.stderr)["category"] == "convergence"
