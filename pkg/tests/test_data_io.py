import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbteleport.data_io import (
    ConfigError,
    format_value,
    load_config,
    parse_config,
    read_csv,
    read_timetags,
    write_csv,
    write_timetags,
)
from tbteleport.errors import DomainError
from tbteleport.sequence import Timetags

GOOD = """\
nv:
  p_nv: 5.76e-4
  g2: 0.011
wcs:
  x: 1.19
eta: 0.895
noise:
  p_noise: 3.51e-7
sequence:
  cr_pass_prob: 0.9
seed: 7
shots: 1000
"""


def test_good_config(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(GOOD)
    cfg = load_config(p)
    assert cfg.mu == pytest.approx(1.19 * 5.76e-4)
    assert cfg.nv_params().p_de == pytest.approx(0.011 * 5.76e-4 / 2)
    assert cfg.sequence_config().cr_pass_prob == 0.9
    assert cfg.sequence_config().bins_per_train == 10
    assert cfg.seed == 7


def test_json_config(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps({"nv": {"p_nv": 4.5e-4}, "wcs": {"mu": 5.4e-4, "leak_epsilon": 0.04}, "eta": 0.895}))
    cfg = load_config(p)
    assert cfg.wcs_params().leak_epsilon == 0.04
    assert cfg.seed is None


def test_empty_file_lists_missing_fields(tmp_path):
    p = tmp_path / "empty.yaml"
    p.write_text("")
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    errs = exc.value.errors
    for field in ("nv", "wcs", "eta"):
        assert any(e.startswith(f"{field}: missing") for e in errs), errs


def test_eta_out_of_range_names_field():
    with pytest.raises(ConfigError) as exc:
        parse_config(GOOD.replace("eta: 0.895", "eta: 1.2"))
    (err,) = exc.value.errors
    assert err.startswith("line 6: eta:")
    assert "1" in err


def test_unknown_keys_rejected_with_lines():
    text = GOOD + "colour: blue\n"
    text = text.replace("  g2: 0.011", "  g2: 0.011\n  gee2: 0.1")
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    errs = exc.value.errors
    assert "line 4: nv.gee2: unknown key" in errs
    assert any(e.endswith("colour: unknown key") for e in errs)


def test_multiple_errors_itemized():
    text = GOOD.replace("p_nv: 5.76e-4", "p_nv: -1").replace("cr_pass_prob: 0.9", "cr_pass_prob: 0")
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    paths = [e.split(": ")[1] for e in exc.value.errors]
    assert paths == ["nv.p_nv", "sequence.cr_pass_prob"]


def test_mu_and_x_exclusive():
    with pytest.raises(ConfigError):
        parse_config(GOOD.replace("  x: 1.19", "  x: 1.19\n  mu: 1e-3"))


def test_cross_field_sequence_invariant():
    with pytest.raises(ConfigError) as exc:
        parse_config(GOOD.replace("  cr_pass_prob: 0.9", "  herald_window_analysis: 80"))
    assert "window" in exc.value.errors[0]


def test_unparseable_yaml():
    with pytest.raises(ConfigError):
        parse_config("nv: [unclosed")
    with pytest.raises(ConfigError):
        parse_config("- just\n- a list\n")


# --- CSV ----------------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(allow_nan=False), min_size=1, max_size=20), st.lists(st.integers(-2**62, 2**62), min_size=1, max_size=20))
def test_csv_round_trip_exact(tmp_path_factory, floats, ints):
    n = min(len(floats), len(ints))
    path = tmp_path_factory.mktemp("csv") / "t.csv"
    write_csv({"f": floats[:n], "i": ints[:n], "s": ["+Z"] * n}, path)
    back = read_csv(path)
    assert back["f"] == floats[:n]
    assert all(type(v) is float for v in back["f"])
    assert back["i"] == ints[:n]
    assert back["s"] == ["+Z"] * n


def test_csv_format_details(tmp_path):
    path = tmp_path / "t.csv"
    write_csv({"a": [0.1, 1e-300, math.inf], "b": [1, 2, 3]}, path)
    raw = path.read_bytes()
    assert b"\r" not in raw
    assert raw == b"a,b\n0.1,1\n1e-300,2\ninf,3\n"


def test_csv_nan(tmp_path):
    path = tmp_path / "t.csv"
    write_csv({"a": [math.nan]}, path)
    assert math.isnan(read_csv(path)["a"][0])


def test_csv_rejects_bad_cells(tmp_path):
    with pytest.raises(DomainError):
        write_csv({"a": ["x,y"]}, tmp_path / "t.csv")
    with pytest.raises(DomainError):
        write_csv({"a": [1, 2], "b": [1]}, tmp_path / "t.csv")


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    path = tmp_path / "t.csv"
    write_csv({"a": [1.0]}, path)

    class Boom:
        def __str__(self):
            raise RuntimeError("no")

    with pytest.raises(RuntimeError):
        write_csv({"a": [Boom()]}, path)
    assert read_csv(path) == {"a": [1.0]}
    assert os.listdir(tmp_path) == ["t.csv"]


def test_format_value():
    assert format_value(np.float64(0.1) + np.float64(0.2)) == "0.30000000000000004"
    assert format_value(np.int64(5)) == "5"
    assert format_value(True) == "true"
    assert format_value(None) == ""


def test_timetag_round_trip(tmp_path):
    tags = Timetags(np.array([0, 0, 5]), np.array([1, 2, 1], np.int8), np.array([10.5, 11.25, 7003.1]))
    path = tmp_path / "tags.csv"
    write_timetags(tags, path)
    assert path.read_text().splitlines()[0] == "shot,detector,time_ns"
    back = read_timetags(path)
    assert np.array_equal(back.shot, tags.shot)
    assert np.array_equal(back.detector, tags.detector)
    assert np.array_equal(back.time_ns, tags.time_ns)


def test_timetag_header_checked(tmp_path):
    path = tmp_path / "tags.csv"
    write_csv({"a": [1]}, path)
    with pytest.raises(DomainError):
        read_timetags(path)


def test_documented_example_config_parses():
    import pathlib
    import re

    doc = (pathlib.Path(__file__).parents[1] / "docs" / "formats.md").read_text()
    cfg = parse_config(re.search(r"```yaml\n(.*?)```", doc, re.S).group(1))
    assert cfg.mu == pytest.approx(1.2 * 4.5e-4)
    assert cfg.output.prefix == "run1_"
