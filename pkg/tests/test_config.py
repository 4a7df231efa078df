import numpy as np
import pytest

from splitjko.config import ConfigError, compile_expression, parse_config, parse_text


def test_minimal_config_gets_defaults():
    cfg = parse_text("[run]\nscenario = heat\n[scheme]\nh = 0.01\nT = 0.05\n")
    assert cfg.scenario == "heat" and cfg.mode == "single"
    assert cfg.scheme["h"] == 0.01 and cfg.scheme["backend"] == "auto"
    assert cfg.checks["mass_tolerance"] > 0
    d = cfg.as_dict()
    assert d["scheme"]["T"] == 0.05


def test_misspelled_key_points_at_line():
    with pytest.raises(ConfigError) as err:
        parse_text("[run]\nscenario = heat\n\n[scheme]\nh = 0.01\nepsilonn = 0.1\n", path="bad.ini")
    e = err.value
    assert e.key == "epsilonn" and e.line == 6
    assert "did you mean 'epsilon'" in str(e)


@pytest.mark.parametrize("text,key", [
    ("[scheme]\nh = -0.01\n", "h"),
    ("[scheme]\nh = 0.01\nT = 0\n", "T"),
    ("[run]\nscenario = heta\n[scheme]\nh = 0.1\n", "scenario"),
    ("[run]\nscenario = heat\n[scheme]\nh = 0.1\nbackend = simplex\n", "backend"),
    ("[run]\nscenario = heat\n[scheme]\nh = abc\n", "h"),
    ("[run]\nscenario = heat\nmode = sweep\n[sweep]\nhs = [0.1, 0.05]\n", "hs"),
    ("[run]\nscenario = heat\n[scheme]\nh = 0.1\n[scenario]\ncellz = 10\n", "cellz"),
    ("[run]\nscenario = heat\n[scheme]\nh = 0.3\nsemiconvexity = 2.0\n", "h"),
    ("[run]\nscenario = custom\n[custom]\ndensity = __import__('os')\n[scheme]\nh = 0.1\n", "density"),
])
def test_invalid_values_are_reported(text, key):
    with pytest.raises(ConfigError) as err:
        parse_text(text)
    assert err.value.key == key
    assert err.value.line is not None


def test_unknown_section_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_text("[solver]\nh = 0.1\n")
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.ini")
    with pytest.raises(ConfigError):
        parse_text("not an ini file")


def test_case_and_comments_are_preserved():
    cfg = parse_text("[run]\nscenario = heat  # the preset\n[scheme]\nh = 0.01 ; step\nT = 0.1\n")
    assert cfg.scheme["h"] == 0.01 and cfg.scheme["T"] == 0.1


def test_expressions_are_sandboxed():
    f = compile_expression("exp(-(x - 1)**2) + 0.5 * abs(sin(pi * x))")
    x = np.linspace(-1, 1, 5)
    assert np.allclose(f(x), np.exp(-(x - 1) ** 2) + 0.5 * np.abs(np.sin(np.pi * x)))
    g = compile_expression("x * y", ("x", "y"))
    assert g(2.0, 3.0) == 6.0
    for bad in ("__import__('os')", "x.__class__", "open('f')", "z + 1", "[x for x in y]", "lambda: 1", "x +"):
        with pytest.raises(ValueError):
            compile_expression(bad, ("x", "y"))
