import json

import numpy as np
import pytest

from towerlimits.cli import (
    ConfigError,
    build_observable,
    build_system,
    config_file_hash,
    evaluate_rules,
    main,
    parse_config,
)
from towerlimits.seq_algebra import CAUSAL, WeightedSeq, save_seq
from towerlimits.tower_core import save_tower, two_cell_tower


@pytest.fixture()
def tower_file(tmp_path):
    path = tmp_path / "two_cell.tw"
    save_tower(two_cell_tower(0.5), path)
    return path


def write_config(tmp_path, text) -> str:
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")
    return str(path)


CLT_CONFIG = """
# CLT on the shipped two-cell tower
[system]
kind = tower
two_cell_p = 0.5

[observable]
name = cellwise
values = 1, -1, 0.5
center = true

[experiment]
kind = clt
n_grid = 4, 16
samples = 2000
seed = 11

[acceptance]
degenerate = == false
sigma2 = >= 0
"""


class TestConfigParsing:
    def test_sections_and_comments(self, tmp_path):
        cfg = write_config(tmp_path, "[a]\nx = 1 # trailing\n\n[b]\ny = two words\n")
        sections = parse_config(cfg)
        assert sections == {"a": {"x": "1"}, "b": {"y": "two words"}}

    def test_key_outside_section(self, tmp_path):
        cfg = write_config(tmp_path, "x = 1\n")
        with pytest.raises(ConfigError, match=":1:"):
            parse_config(cfg)

    def test_bare_line_rejected(self, tmp_path):
        cfg = write_config(tmp_path, "[a]\nnot a pair\n")
        with pytest.raises(ConfigError, match=":2:"):
            parse_config(cfg)

    def test_duplicate_key(self, tmp_path):
        cfg = write_config(tmp_path, "[a]\nx = 1\nx = 2\n")
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config(cfg)

    def test_unknown_system_key(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown keys"):
            build_system({"kind": "iid", "bogus": "1"}, tmp_path)

    def test_unknown_observable_name(self):
        with pytest.raises(ConfigError, match="unknown observable"):
            build_observable({"name": "mystery"}, None)

    def test_tower_from_file(self, tower_file):
        tower = build_system({"kind": "tower", "tower_file": tower_file.name},
                             tower_file.parent)
        assert tower.n_cells == 2


class TestRules:
    def test_operators(self):
        summary = {"a": 0.3, "flag": True}
        rules = {"a": "in 0.2,0.4", "flag": "== true"}
        assert all(ok for _, ok, _ in evaluate_rules(rules, summary))
        assert not evaluate_rules({"a": "within 0.5,0.1"}, summary)[0][1]

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="no report field"):
            evaluate_rules({"nope": "<= 1"}, {"a": 1})

    def test_bad_operator(self):
        with pytest.raises(ConfigError, match="unknown operator"):
            evaluate_rules({"a": "~= 1"}, {"a": 1})


class TestAlgebraCommands:
    @pytest.fixture()
    def seq_file(self, tmp_path):
        coeffs = np.zeros(16)
        coeffs[0] = 1.0
        coeffs[1:] = 0.25 / (np.arange(1, 16) + 1.0) ** 3
        path = tmp_path / "a.seq"
        save_seq(WeightedSeq(0, 15, coeffs, 3.0, CAUSAL), path)
        return path

    def test_invert_writes_inverse_and_report(self, tmp_path, seq_file, capsys):
        status = main(["--out-dir", str(tmp_path), "algebra", "invert",
                       "--input", str(seq_file), "--n-out", "64"])
        assert status == 0
        assert (tmp_path / "a.inv.seq").exists()
        report = json.loads((tmp_path / "a.inv.report.json").read_text())
        assert report["residual"] < 1e-10
        assert "residual" in capsys.readouterr().out

    def test_norm_prints_value(self, seq_file, capsys):
        assert main(["algebra", "norm", "--input", str(seq_file)]) == 0
        assert "ogamma_norm" in capsys.readouterr().out

    def test_envelope_csv(self, tmp_path, capsys):
        status = main(["--out-dir", str(tmp_path), "algebra", "envelope",
                       "--gamma", "1.5", "--d", "1.0", "--t", "0.3"])
        assert status == 0
        lines = (tmp_path / "envelope.csv").read_text().splitlines()
        assert lines[0] == "field,value"
        assert any(line.startswith("c_fit,") for line in lines)

    def test_missing_input_is_usage_error(self, tmp_path):
        status = main(["algebra", "invert", "--input", str(tmp_path / "no.seq")])
        assert status == 2


class TestTowerRenewalCommands:
    def test_tower_roundtrip(self, tmp_path, capsys):
        status = main(["--out-dir", str(tmp_path), "tower",
                       "--two-cell", "0.5", "--out", "t.tw"])
        assert status == 0
        assert (tmp_path / "t.tw").exists()
        status = main(["tower", "--input", str(tmp_path / "t.tw")])
        assert status == 0
        assert "2 cells, 3 states" in capsys.readouterr().out

    def test_renewal_residual(self, tower_file, capsys):
        status = main(["renewal", "--tower", str(tower_file),
                       "--n", "10", "--t", "0.37"])
        assert status == 0
        out = capsys.readouterr().out
        assert "residual" in out
        assert float(out.rsplit(None, 1)[-1]) < 1e-12


class TestVerifyCommand:
    def test_clt_run_with_rules(self, tmp_path, capsys):
        cfg = write_config(tmp_path, CLT_CONFIG)
        status = main(["--out-dir", str(tmp_path / "out"), "verify",
                       "--config", cfg])
        assert status == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 2 and "FAIL" not in out
        csv_text = (tmp_path / "out" / "clt.csv").read_text()
        assert csv_text.startswith("# config_hash=")
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["config_hash"] == config_file_hash(cfg)
        assert manifest["seed"] == 11

    def test_failed_rule_exits_one(self, tmp_path, capsys):
        cfg = write_config(tmp_path,
                           CLT_CONFIG.replace("sigma2 = >= 0", "sigma2 = <= -1"))
        status = main(["--out-dir", str(tmp_path / "out"), "verify",
                       "--config", cfg])
        assert status == 1
        assert "FAIL sigma2" in capsys.readouterr().out

    def test_seed_override_and_reproducibility(self, tmp_path):
        cfg = write_config(tmp_path, CLT_CONFIG)
        for sub in ("o1", "o2"):
            assert main(["--out-dir", str(tmp_path / sub), "--seed", "99",
                         "verify", "--config", cfg]) == 0
        a = (tmp_path / "o1" / "clt.csv").read_bytes()
        assert a == (tmp_path / "o2" / "clt.csv").read_bytes()
        assert json.loads((tmp_path / "o1" / "manifest.json").read_text())["seed"] == 99

    def test_lattice_with_plot(self, tmp_path):
        cfg = write_config(tmp_path, """
[system]
kind = tower
two_cell_p = 0.5

[observable]
name = cellwise
values = 1, -1, 0

[experiment]
kind = lattice
n_grid = 16, 64
samples = 1000
seed = 0

[acceptance]
mass_defect = <= 1e-14
""")
        status = main(["--out-dir", str(tmp_path / "out"), "verify",
                       "--config", cfg, "--plot"])
        assert status == 0
        assert (tmp_path / "out" / "lattice.svg").exists()

    def test_identities_kind(self, tmp_path, capsys):
        cfg = write_config(tmp_path, """
[system]
kind = tower
two_cell_p = 0.5

[experiment]
kind = identities
n_cap = 10

[acceptance]
max_decomposition_residual = <= 1e-12
max_A_error = <= 1e-14
max_B_error = <= 1e-14
""")
        status = main(["--out-dir", str(tmp_path / "out"), "verify",
                       "--config", cfg])
        assert status == 0
        assert capsys.readouterr().out.count("PASS") == 3

    def test_unknown_kind_is_usage_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "[experiment]\nkind = mystery\n")
        status = main(["verify", "--config", cfg])
        assert status == 2
        assert "kind" in capsys.readouterr().err

    def test_missing_config_is_usage_error(self, tmp_path):
        assert main(["verify", "--config", str(tmp_path / "nope.cfg")]) == 2

    def test_refused_llt_exits_one(self, tmp_path, capsys):
        cfg = write_config(tmp_path, """
[system]
kind = lsv
alpha = 0.25

[observable]
name = zero

[experiment]
kind = llt
n_grid = 16
samples = 1000
seed = 0
sigma2_value = 1.0
scan_t_grid = 1.0
K = 256
""")
        status = main(["--out-dir", str(tmp_path / "out"), "verify",
                       "--config", cfg])
        assert status == 1
        assert "refused" in capsys.readouterr().err


class TestOperatorCommand:
    def test_scan_writes_report(self, tmp_path, capsys):
        status = main(["--out-dir", str(tmp_path), "operator", "scan",
                       "--alpha", "0.25", "--f", "identity",
                       "--t", "2:3:2", "--K", "256"])
        assert status == 0
        assert (tmp_path / "scan.csv").exists()
        assert (tmp_path / "scan.json").exists()
        assert "group" in capsys.readouterr().out
