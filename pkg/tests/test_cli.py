"""CLI subcommands, exit codes, output files, and manifest reruns."""

import json
from pathlib import Path

import pytest

from sdaekit.cli import main


@pytest.fixture()
def paper_file(tmp_path):
    assert main(["builtin", "paper-example", "--emit",
                 "--out", str(tmp_path / "paper-example.sdae")]) == 0
    return tmp_path / "paper-example.sdae"


@pytest.fixture()
def linear_file(tmp_path):
    assert main(["builtin", "linear-index1", "--emit",
                 "--out", str(tmp_path / "linear.sdae")]) == 0
    return tmp_path / "linear.sdae"


class TestClassify:
    def test_paper_example(self, paper_file, capsys):
        assert main(["classify", str(paper_file)]) == 0
        out = capsys.readouterr().out
        assert "high-index" in out
        assert "UNSDAE" in out
        assert "ill-posed" in out
        assert "4.0" in out and "e-01" in out  # max residual 4.0e-01 at the origin

    def test_emitted_file_matches_builtin(self, paper_file, capsys):
        main(["classify", str(paper_file)])
        from_file = capsys.readouterr().out
        from sdaekit.problem import builtin, classify

        assert classify(builtin("paper-example")).summary() == from_file.strip()

    def test_missing_file_is_exit_2(self, capsys):
        assert main(["classify", "no-such-file.sdae"]) == 2

    def test_invalid_file_is_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.sdae"
        bad.write_text("[dims]\nn=1 m=1 p=1 d=1\n")
        assert main(["classify", str(bad)]) == 2


class TestCheck:
    def test_ill_posed_box(self, paper_file, capsys):
        assert main(["check", str(paper_file), "--box", "-2:2,-5:5", "--grid", "21"]) == 0
        assert "ill-posed" in capsys.readouterr().out

    def test_contraction_flag(self, linear_file, capsys):
        rc = main(["check", str(linear_file), "--box=-1:1,-1:1", "--contraction"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "M = " in out and "horizon" in out

    def test_bad_box_usage(self, paper_file):
        assert main(["check", str(paper_file), "--box", "oops"]) == 1


class TestReduce:
    def test_paper_example_rows_printed(self, paper_file, capsys):
        assert main(["reduce", str(paper_file), "--steps", "1"]) == 0
        out = capsys.readouterr().out
        assert "p = 3 rows" in out
        assert "cos(4*x2)" in out
        assert "not determined" in out  # m = 1 != 3

    def test_index1_input_is_exit_3(self, linear_file):
        assert main(["reduce", str(linear_file), "--steps", "1"]) == 3


class TestSolve:
    def test_index1_on_high_index_exit_3(self, paper_file, tmp_path, capsys):
        rc = main(["solve", str(paper_file), "--method", "index1",
                   "--dt", "1e-3", "--t-end", "0.1", "--out", str(tmp_path / "r")])
        assert rc == 3
        assert "D_u g" in capsys.readouterr().err

    def test_bounded_run_writes_outputs(self, paper_file, tmp_path, capsys):
        out_dir = tmp_path / "run1"
        rc = main([
            "solve", str(paper_file), "--method", "bounded",
            "--epsilon", "0.5", "--alpha", "0.8", "--box", "-2:2,-5:5",
            "--dt", "1e-3", "--t-end", "0.2", "--paths", "20", "--seed", "42",
            "--out", str(out_dir),
        ])
        assert rc == 0
        text = capsys.readouterr().out
        assert "threshold" in text and "10" in text
        assert (out_dir / "manifest.json").is_file()
        assert (out_dir / "report.csv").is_file()
        assert (out_dir / "problem.sdae").is_file()
        assert (out_dir / "paths" / "path_00000.csv").is_file()
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["base_seed"] == 42
        assert "report.csv" in manifest["outputs"]

    def test_rerun_reproduces_bitwise(self, paper_file, tmp_path):
        out1 = tmp_path / "a"
        out2 = tmp_path / "b"
        argv = [
            "solve", str(paper_file), "--method", "bounded",
            "--epsilon", "0.5", "--alpha", "0.8", "--box=-2:2,-5:5",
            "--dt", "1e-3", "--t-end", "0.2", "--paths", "8", "--seed", "7",
            "--out", str(out1),
        ]
        assert main(argv) == 0
        assert main(["rerun", str(out1 / "manifest.json"), "--out", str(out2)]) == 0
        for rel in json.loads((out1 / "manifest.json").read_text())["outputs"]:
            assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes(), rel

    def test_index1_solve_and_rerun(self, linear_file, tmp_path):
        out1 = tmp_path / "x"
        out2 = tmp_path / "y"
        argv = ["solve", str(linear_file), "--method", "index1",
                "--dt", "1e-3", "--t-end", "0.5", "--paths", "4", "--seed", "3",
                "--out", str(out1)]
        assert main(argv) == 0
        assert main(["rerun", str(out1 / "manifest.json"), "--out", str(out2)]) == 0
        for rel in json.loads((out1 / "manifest.json").read_text())["outputs"]:
            assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes(), rel

    def test_picard_method(self, tmp_path, capsys):
        # contraction example as a file
        src = tmp_path / "c.sdae"
        src.write_text(
            "[dims]\nn=1 m=1 p=1 d=1\n[drift]\nx1\n[diffusion]\n0.1\n"
            "[constraint]\n0.25*x1 + 0.5*u1\n[constraint_noise]\n0\n"
            "[initial]\nx = 0\nu = 0\n"
        )
        rc = main(["solve", str(src), "--method", "picard", "--dt", "1e-3",
                   "--t-end", "0.3", "--paths", "2", "--seed", "1",
                   "--out", str(tmp_path / "p")])
        assert rc == 0

    def test_unit_prob_method(self, paper_file, tmp_path):
        from sdaekit.unit_prob import paper_example_spec
        from sdaekit.expr import to_text

        spec = paper_example_spec(0.25)
        y_file = tmp_path / "y.txt"
        y_file.write_text("\n".join(to_text(e) for e in spec.y) + "\n")
        rc = main(["solve", str(paper_file), "--method", "unit-prob",
                   "--epsilon", "0.25", "--y-file", str(y_file),
                   "--dt", "1e-4", "--t-end", "0.05", "--paths", "2", "--seed", "5",
                   "--out", str(tmp_path / "u")])
        assert rc == 0

    def test_missing_required_flags_exit_3(self, paper_file, tmp_path):
        rc = main(["solve", str(paper_file), "--method", "bounded",
                   "--dt", "1e-3", "--t-end", "0.1", "--out", str(tmp_path / "z")])
        assert rc == 3


class TestVerifyBound:
    def test_verify_after_solve(self, paper_file, tmp_path, capsys):
        out_dir = tmp_path / "run"
        main(["solve", str(paper_file), "--method", "bounded",
              "--epsilon", "0.5", "--alpha", "0.8", "--box=-2:2,-5:5",
              "--dt", "1e-3", "--t-end", "0.2", "--paths", "20", "--seed", "2",
              "--out", str(out_dir)])
        capsys.readouterr()
        rc = main(["verify-bound", str(out_dir), "--epsilon", "0.5", "--alpha", "0.8"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "satisfied" in out
        assert (out_dir / "verify_report.csv").is_file()


class TestBuiltin:
    def test_unknown_name_exit_2(self, capsys):
        assert main(["builtin", "bogus"]) == 2
        assert "available" in capsys.readouterr().err

    def test_stdout_without_emit(self, capsys):
        assert main(["builtin", "cooling"]) == 0
        assert "[dims]" in capsys.readouterr().out

    def test_usage_error_exit_1(self):
        assert main(["solve"]) == 1
        assert main([]) == 1
