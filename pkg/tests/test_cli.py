from __future__ import annotations

import csv
import hashlib
import json
import xml.etree.ElementTree as ET

import pytest

from qphj import cli
from qphj.errors import ConfigError


def write_ini(path, text):
    path.write_text(text)
    return str(path)


def run(tmp_path, command, ini=None, *flags, out="out"):
    args = [command, "--out", str(tmp_path / out)]
    if ini is not None:
        args += ["--config", write_ini(tmp_path / f"{command}.ini", ini)]
    return cli.main(args + list(flags))


EFFECTIVE = """
[potential]
kind = A1
gamma = 2
[grids]
p_offsets = geometric 1e-2 2 6
"""

HOMOGENIZE = """
[potential]
gamma = 1
[experiment]
points = 0, 0.5
eps = 0.5
"""


def test_parse_grid():
    assert cli.parse_grid("geometric 1 1000 4", "T") == pytest.approx((1.0, 10.0, 100.0, 1000.0))
    assert cli.parse_grid("1, 2, 4, 8", "T") == (1.0, 2.0, 4.0, 8.0)
    for bad in ("geometric 1 100", "1, 2, 4", "1, 2, 3, 4", "-1, -2, -4, -8", "a, b"):
        with pytest.raises(ConfigError):
            cli.parse_grid(bad, "T")


def test_resonant_frequency_is_a_config_error(tmp_path, capsys):
    assert run(tmp_path, "effective", "[potential]\nxi = 1, 2\n") == cli.EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


@pytest.mark.parametrize("ini", [
    "[nonsense]\na = 1\n",
    "[experiment]\nkind = sweep\n",
    "[potential]\ngamma = -1\n",
    "[potential]\nkind = A1\nxi = 1, 1.4142135623730951, 1.7320508075688772\n",
    "[initial]\nkind = cone\nradius = 0\n",
])
def test_bad_configs_exit_with_config_status(tmp_path, ini):
    code = run(tmp_path, "homogenize" if "initial" in ini else "effective", ini)
    assert code == cli.EXIT_CONFIG


def test_outputs_and_manifest(tmp_path):
    assert run(tmp_path, "effective", EFFECTIVE, "--plot") == cli.EXIT_OK
    out = tmp_path / "out"
    rows = list(csv.reader((out / "effective.csv").open()))
    assert rows[0] == ["p", "Hbar", "Hbar_prime", "inversion_error"] and len(rows) == 7
    man = json.loads((out / "effective.manifest.json").read_text())
    assert man["config"]["potential"]["gamma"] == "2"
    assert man["csv_sha256"] == hashlib.sha256((out / "effective.csv").read_bytes()).hexdigest()
    assert "effective.svg" in man["outputs"]
    root = ET.parse(out / "effective.svg").getroot()
    assert root.tag.endswith("svg") and len(list(root.iter())) > 5


def test_assert_thresholds(tmp_path):
    assert run(tmp_path, "effective", EFFECTIVE, "--assert") == cli.EXIT_OK
    strict = EFFECTIVE + "[assert]\nmin_error = 1\n"
    assert run(tmp_path, "effective", strict, "--assert", out="strict") == cli.EXIT_ASSERT
    # without --assert the miss is only reported
    assert run(tmp_path, "effective", strict, out="strict") == cli.EXIT_OK


def test_model_cache_reuse_is_bit_identical(tmp_path):
    assert run(tmp_path, "homogenize", HOMOGENIZE) == cli.EXIT_OK
    out = tmp_path / "out"
    cached = list((out / "cache").glob("model-*.csv"))
    assert len(cached) == 1
    first = (out / "homogenize.csv").read_bytes()
    stamp = cached[0].stat().st_mtime_ns
    assert run(tmp_path, "homogenize", HOMOGENIZE) == cli.EXIT_OK
    assert cached[0].stat().st_mtime_ns == stamp
    assert (out / "homogenize.csv").read_bytes() == first
    # a cold run without the cache yields the same numbers
    cold = HOMOGENIZE + "[output]\ncache = no\n"
    assert run(tmp_path, "homogenize", cold, out="cold") == cli.EXIT_OK
    assert (tmp_path / "cold" / "homogenize.csv").read_bytes() == first


def test_runs_are_deterministic(tmp_path):
    ini = "[potential]\ngamma = 6\n[grids]\nT = geometric 1e2 1e4 5\n"
    assert run(tmp_path, "birkhoff", ini, out="a") == cli.EXIT_OK
    assert run(tmp_path, "birkhoff", ini, out="b") == cli.EXIT_OK
    assert (tmp_path / "a" / "birkhoff.csv").read_bytes() == (tmp_path / "b" / "birkhoff.csv").read_bytes()


def test_validate_rows(tmp_path):
    assert run(tmp_path, "validate", "[potential]\ngamma = 6\n", out="g6") == cli.EXIT_OK
    diag = json.loads((tmp_path / "g6" / "validate.manifest.json").read_text())["diagnostics"]
    assert diag["applicable_row"] == "P1" and diag["predicted_lower_exponent"] == 1.0
    assert diag["predicted_upper_exponent"] == pytest.approx(0.25)
    assert run(tmp_path, "validate", "[potential]\ngamma = 1\n", out="g1") == cli.EXIT_OK
    diag = json.loads((tmp_path / "g1" / "validate.manifest.json").read_text())["diagnostics"]
    assert diag["applicable_row"] == "P4" and diag["predicted_lower_exponent"] == pytest.approx(0.5)


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["effective", "--out", str(blocker / "sub")]) == cli.EXIT_CONFIG
