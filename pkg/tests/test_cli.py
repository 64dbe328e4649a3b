"""End-to-end tests of the batch front end."""

import hashlib
import json
import textwrap

import pytest

from chainlab.cli import ConfigError, main, parse_config
from chainlab.sde import load_paths


@pytest.fixture(autouse=True)
def _clean_thread_env(monkeypatch):
    monkeypatch.delenv("CHAINLAB_THREADS", raising=False)


def _write(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(text), encoding="utf-8")
    return str(path)


FAST_SIMULATE = """\
    [model]
    kind = overdamped
    epsilon = 0.01
    sigma = 0.001

    [ensemble]
    n_paths = 20
    seed = 5
    h_rel = 0.1
    """


class TestParseConfig:

    def test_sections_keys_and_lines(self):
        text = "# top\n[alpha]\nx = 1\n\n[beta]\n; note\ny = two words\n"
        out = parse_config(text, "f.ini")
        assert set(out) == {"alpha", "beta"}
        lineno, items = out["alpha"]
        assert lineno == 2 and items["x"] == ("1", 3)
        assert out["beta"][1]["y"] == ("two words", 7)

    @pytest.mark.parametrize("text,fragment", [
        ("[a]\n[a]\n", "f.ini:2: duplicate section"),
        ("[a]\nk = 1\nk = 2\n", "f.ini:3: duplicate key"),
        ("[a\nk = 1\n", "f.ini:1: malformed section header"),
        ("k = 1\n", "f.ini:1: key before any"),
        ("[a]\njust words\n", "f.ini:2: expected"),
        ("[a]\n= 1\n", "f.ini:2: empty key"),
    ])
    def test_rejects_with_line_numbers(self, text, fragment):
        with pytest.raises(ConfigError, match=fragment.replace("[", "\\[")):
            parse_config(text, "f.ini")


class TestConfigErrors:

    def _rc(self, tmp_path, capsys, text, sub="simulate"):
        rc = main([sub, "--config", _write(tmp_path, text),
                   "--out", str(tmp_path / "out")])
        return rc, capsys.readouterr().err

    def test_unknown_key_is_line_anchored(self, tmp_path, capsys):
        rc, err = self._rc(tmp_path, capsys, """\
            [model]
            epsilon = 0.01
            sigma = 0.001
            bogus = 3

            [ensemble]
            n_paths = 4
            """)
        assert rc == 2
        assert ":4: unknown key 'bogus' in [model]" in err

    def test_unknown_section(self, tmp_path, capsys):
        rc, err = self._rc(tmp_path, capsys, "[mystery]\nx = 1\n")
        assert rc == 2 and "unknown section [mystery]" in err

    def test_missing_required_section(self, tmp_path, capsys):
        rc, err = self._rc(tmp_path, capsys, "[model]\nepsilon = 0.01\nsigma = 0.001\n")
        assert rc == 2 and "missing required section [ensemble]" in err

    def test_missing_required_key(self, tmp_path, capsys):
        rc, err = self._rc(tmp_path, capsys,
                           "[model]\nsigma = 0.001\n\n[ensemble]\nn_paths = 4\n")
        assert rc == 2 and "missing required key 'epsilon'" in err

    def test_bad_value_cites_line(self, tmp_path, capsys):
        rc, err = self._rc(tmp_path, capsys, """\
            [model]
            epsilon = 0.01
            sigma = 0.001

            [ensemble]
            n_paths = much
            """)
        assert rc == 2 and ":6: bad value for 'n_paths'" in err

    def test_domain_validation_is_anchored(self, tmp_path, capsys):
        rc, err = self._rc(tmp_path, capsys, """\
            [model]
            epsilon = 2.0
            sigma = 0.001

            [ensemble]
            n_paths = 4
            """)
        assert rc == 2 and ":1: invalid [model]" in err and "epsilon" in err

    def test_chain_kind_on_simulate(self, tmp_path, capsys):
        rc, err = self._rc(tmp_path, capsys, """\
            [model]
            kind = chain
            epsilon = 0.01
            sigma = 0.001

            [ensemble]
            n_paths = 4
            """)
        assert rc == 2 and "chain subcommand" in err

    def test_missing_config_file(self, tmp_path, capsys):
        rc = main(["simulate", "--config", str(tmp_path / "nope.ini")])
        assert rc == 2
        assert "cannot read config" in capsys.readouterr().err

    def test_config_required_except_airy_check(self, tmp_path, capsys):
        assert main(["simulate", "--out", str(tmp_path)]) == 2
        assert "requires --config" in capsys.readouterr().err
        assert main(["airy-check", "--out", str(tmp_path)]) == 0

    def test_dump_paths_rejected_where_meaningless(self, tmp_path, capsys):
        cfg = _write(tmp_path, """\
            [linear-stats]
            epsilon = 0.05
            """)
        rc = main(["linear-stats", "--config", cfg, "--out", str(tmp_path),
                   "--dump-paths"])
        assert rc == 2
        assert "not meaningful" in capsys.readouterr().err

    def test_bad_thread_env(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("CHAINLAB_THREADS", "zero")
        rc = main(["airy-check", "--out", str(tmp_path)])
        assert rc == 2
        assert "CHAINLAB_THREADS" in capsys.readouterr().err


class TestSimulate:

    def test_byte_identical_reruns(self, tmp_path, capsys):
        cfg = _write(tmp_path, FAST_SIMULATE)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--config", cfg, "--out", str(out_a)]) == 0
        assert main(["simulate", "--config", cfg, "--out", str(out_b)]) == 0
        capsys.readouterr()
        a = (out_a / "simulate.csv").read_bytes()
        assert a == (out_b / "simulate.csv").read_bytes()
        assert a.startswith(b"# chainlab simulate v1\r\n")
        header = a.split(b"\r\n")[1].decode()
        assert header.startswith("model,n_paths,seed,")

    def test_seed_flag_overrides_config(self, tmp_path, capsys):
        cfg = _write(tmp_path, FAST_SIMULATE)
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "a"),
                     "--format", "json"]) == 0
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"),
                     "--format", "json", "--seed", "99"]) == 0
        capsys.readouterr()
        a = json.loads((tmp_path / "a" / "simulate.json").read_text())
        b = json.loads((tmp_path / "b" / "simulate.json").read_text())
        assert a["provenance"]["seed"] == 5
        assert b["provenance"]["seed"] == 99
        assert b["rows"][0]["seed"] == 99

    def test_json_provenance(self, tmp_path, capsys):
        cfg = _write(tmp_path, FAST_SIMULATE)
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o"),
                     "--format", "json"]) == 0
        capsys.readouterr()
        doc = json.loads((tmp_path / "o" / "simulate.json").read_text())
        digest = hashlib.sha256(open(cfg, "rb").read()).hexdigest()
        assert doc["provenance"]["config_sha256"] == digest
        assert doc["provenance"]["version"]
        assert doc["format"] == "chainlab simulate v1"
        row = doc["rows"][0]
        assert set(row) == set(doc["columns"])
        assert row["n_right"] + row["n_left"] + row["n_undecided"] == 20

    def test_threads_do_not_change_results(self, tmp_path, capsys, monkeypatch):
        cfg = _write(tmp_path, FAST_SIMULATE)
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        monkeypatch.setenv("CHAINLAB_THREADS", "3")
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        capsys.readouterr()
        assert (tmp_path / "a" / "simulate.csv").read_bytes() == \
            (tmp_path / "b" / "simulate.csv").read_bytes()

    def test_output_name_override(self, tmp_path, capsys):
        cfg = _write(tmp_path, FAST_SIMULATE + "\n[output]\nname = myrun\n")
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        capsys.readouterr()
        assert (tmp_path / "o" / "myrun.csv").exists()

    def test_dump_paths_round_trip(self, tmp_path, capsys):
        cfg = _write(tmp_path, FAST_SIMULATE)
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o"),
                     "--dump-paths"]) == 0
        capsys.readouterr()
        paths = load_paths(str(tmp_path / "o" / "simulate_paths.clpd"))
        assert len(paths) == 20
        assert all(p.grid == paths[0].grid for p in paths)

    def test_linear_kind_simulate_and_dump(self, tmp_path, capsys):
        cfg = _write(tmp_path, """\
            [model]
            kind = linear
            epsilon = 0.1
            sigma = 0.31622776601683794
            T = 1
            t2 = 0.2

            [ensemble]
            n_paths = 6
            seed = 42
            """)
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o"),
                     "--dump-paths"]) == 0
        capsys.readouterr()
        paths = load_paths(str(tmp_path / "o" / "simulate_paths.clpd"))
        assert len(paths) == 6
        assert all(p.p is not None for p in paths)


class TestSweep:

    CFG = """\
        [sweep]
        sigma = 0.02
        n_paths = 40
        seed = 2718
        values = 0.0004 0.02
        """

    def test_csv_layout_and_determinism(self, tmp_path, capsys):
        cfg = _write(tmp_path, self.CFG)
        assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        capsys.readouterr()
        a = (tmp_path / "a" / "sweep.csv").read_bytes()
        assert a == (tmp_path / "b" / "sweep.csv").read_bytes()
        lines = a.decode().split("\r\n")
        assert lines[0] == "# chainlab sweep v1"
        assert lines[1] == "epsilon,p_right,ci_lo,ci_hi,n_undecided"
        assert len([ln for ln in lines[2:] if ln]) == 2

    def test_threads_invariant_and_monotone_field(self, tmp_path, capsys):
        cfg = _write(tmp_path, self.CFG)
        assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "a"),
                     "--format", "json"]) == 0
        assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "b"),
                     "--format", "json", "--threads", "2"]) == 0
        capsys.readouterr()
        a = json.loads((tmp_path / "a" / "sweep.json").read_text())
        b = json.loads((tmp_path / "b" / "sweep.json").read_text())
        assert a["rows"] == b["rows"]
        assert isinstance(a["monotone"], bool)
        eps = [r["epsilon"] for r in a["rows"]]
        assert eps == sorted(eps)


class TestLinearStats:

    def test_scaling_across_epsilon(self, tmp_path, capsys):
        cfg = _write(tmp_path, """\
            [linear-stats]
            epsilon = 0.05 0.0125
            alpha = 0
            beta = 1
            """)
        assert main(["linear-stats", "--config", cfg,
                     "--out", str(tmp_path / "o"), "--format", "json"]) == 0
        capsys.readouterr()
        doc = json.loads((tmp_path / "o" / "linear_stats.json").read_text())
        rows = {r["epsilon"]: r for r in doc["rows"]}
        assert set(rows) == {0.05, 0.0125}
        measured = rows[0.05]["ratio"] / rows[0.0125]["ratio"]
        assert measured == pytest.approx(4.0 ** 0.25, rel=0.03)


class TestAiryCheck:

    def test_report_statuses(self, tmp_path, capsys):
        assert main(["airy-check", "--out", str(tmp_path / "o"),
                     "--format", "json"]) == 0
        capsys.readouterr()
        doc = json.loads((tmp_path / "o" / "airy_check.json").read_text())
        status = {r["check"]: r["status"] for r in doc["rows"]}
        assert status["wronskian_max_defect"] == "pass"
        assert status["laplace_max_rel_error"] == "pass"
        assert status["j_small_p_constant"] == "pass"
        # the documented large-p reference constant is off by sqrt(2);
        # the front end reports the measurement honestly
        assert status["j_large_p_constant"] == "fail"
        by = {r["check"]: r for r in doc["rows"]}
        assert by["j_large_p_constant"]["defect"] == pytest.approx(
            2.0 ** 0.5 - 1.0, rel=1e-4)


class TestCompare:

    def _cfg(self, tmp_path, x0, dt="0.0002"):
        return _write(tmp_path, f"""\
            [model]
            epsilon = 0.05
            sigma = 0.001
            T = 1

            [compare]
            x0 = {x0}
            n_paths = 6
            dt = {dt}
            t_end = 0.5
            """)

    @pytest.mark.parametrize("x0", ["0.5", "-0.5"])
    def test_orderings_hold(self, tmp_path, capsys, x0):
        cfg = self._cfg(tmp_path, x0)
        assert main(["compare", "--config", cfg, "--out", str(tmp_path / "o"),
                     "--format", "json"]) == 0
        capsys.readouterr()
        doc = json.loads((tmp_path / "o" / "compare.json").read_text())
        for row in doc["rows"]:
            assert row["n_paths_violating"] == 0
            assert row["max_violation"] <= 1e-8
            assert row["first_violation_time"] is None

    def test_dump_paths_pairs(self, tmp_path, capsys):
        cfg = self._cfg(tmp_path, "0.5")
        assert main(["compare", "--config", cfg, "--out", str(tmp_path / "o"),
                     "--dump-paths"]) == 0
        capsys.readouterr()
        paths = load_paths(str(tmp_path / "o" / "compare_paths.clpd"))
        assert len(paths) == 12   # biased and unbiased per member

    def test_module_error_leaves_no_artifacts(self, tmp_path, capsys):
        # dt far above the stability cap: integrator refuses, exit 1, no files
        cfg = self._cfg(tmp_path, "0.5", dt="0.01")
        out = tmp_path / "o"
        rc = main(["compare", "--config", cfg, "--out", str(out)])
        assert rc == 1
        assert "chainlab:" in capsys.readouterr().err
        assert not out.exists() or not list(out.iterdir())


class TestChain:

    def test_runs_and_reports(self, tmp_path, capsys):
        cfg = _write(tmp_path, """\
            [model]
            epsilon = 0.01
            sigma = 0.1

            [ensemble]
            n_paths = 10
            seed = 3
            h_rel = 0.05
            t_end = 1.6

            [chain]
            b = 2.5
            """)
        assert main(["chain", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        capsys.readouterr()
        text = (tmp_path / "o" / "chain.csv").read_bytes().decode()
        row = text.split("\r\n")[2].split(",")
        assert row[0] == "chain"
        assert int(row[3]) + int(row[4]) + int(row[5]) == 10
