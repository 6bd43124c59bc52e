import json
from pathlib import Path

import numpy as np
import pytest

from cmdis import ConfigError
from cmdis.config import load_config, parse_config

BASE = {
    "prior": {"preset": "toy"},
    "schedule": {"kind": "karras", "steps": 40},
    "operator": {"kind": "linear"},
    "target": [1.0, 1.0],
    "solvers": [{"solver": "dps", "zeta": 0.5}, {"solver": "proposed1", "zeta": 0.05, "label": "p1"}],
    "seeds": {"master": 3, "runs": 4},
}


def text(**changes):
    return json.dumps({**BASE, **changes}, indent=2)


def test_round_trip():
    cfg = parse_config(text())
    assert list(cfg.solvers) == ["dps", "p1"]
    assert cfg.master_seed == 3 and cfg.runs == 4
    np.testing.assert_array_equal(cfg.targets(range(2)), [[1.0, 1.0], [1.0, 1.0]])


def test_digest_ignores_formatting():
    assert parse_config(text()).digest == parse_config(json.dumps({**BASE})).digest
    assert parse_config(text()).digest != parse_config(text(seeds={"master": 4, "runs": 4})).digest


@pytest.mark.parametrize("doc, key", [
    ({**BASE, "bogus": 1}, "bogus"),
    ({**BASE, "schedule": {"kind": "karras", "stepz": 4}}, "stepz"),
    ({**BASE, "solvers": [{"solver": "dps", "zetta": 1.0}]}, "zetta"),
])
def test_unknown_keys_name_their_line(doc, key):
    src = json.dumps(doc, indent=2)
    line = next(i + 1 for i, s in enumerate(src.splitlines()) if f'"{key}"' in s)
    with pytest.raises(ConfigError, match=f"cfg.json:{line}: .*{key}"):
        parse_config(src, "cfg.json")


def test_malformed_json_names_its_line():
    src = text().replace('"runs": 4', '"runs": 4,,')
    line = next(i + 1 for i, s in enumerate(src.splitlines()) if ",," in s)
    with pytest.raises(ConfigError, match=f"cfg.json:{line}: malformed"):
        parse_config(src, "cfg.json")


@pytest.mark.parametrize("changes", [
    {"solvers": []},
    {"solvers": [{"solver": "nope"}]},
    {"solvers": [{"solver": "dps", "zeta": -1}]},
    {"solvers": [{"solver": "dps"}, {"solver": "dps"}]},
    {"solvers": [{"solver": "proposed2", "ts": [0.3, 1.0]}]},
    {"solvers": [{"solver": "freedom", "travel_range": [0, 500]}]},
    {"seeds": {"runs": 0}},
    {"schedule": {"kind": "karras", "sigma_min": 2.0, "sigma_max": 1.0}},
    {"target": [1.0]},
    {"operator": {"kind": "linear", "matrix": [[1.0, 0.0, 0.0]]}},
    {"operator": {"kind": "conv"}},
    {"prior": {"preset": "toy", "sigma": 2}},
    {"integrator_steps": 1},
])
def test_rejects_bad_values(changes):
    with pytest.raises(ConfigError):
        parse_config(text(**changes))


def test_solver_override():
    cfg = parse_config(text())
    assert list(cfg.with_overrides(solver="p1").solvers) == ["p1"]
    assert list(cfg.with_overrides(solver="proposed1").solvers) == ["p1"]
    swapped = cfg.with_overrides(solver="mpgd").solvers
    assert swapped["mpgd"].solver == "mpgd" and swapped["mpgd"].zeta == 0.5
    with pytest.raises(ConfigError):
        cfg.with_overrides(solver="nope")
    assert cfg.with_overrides(seed=9).master_seed == 9


def test_sampled_targets_are_seeded():
    cfg = parse_config(text(target="sampled"))
    a, b = cfg.targets(range(3)), cfg.targets(range(3))
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a[0], a[1])


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")


def test_shipped_configs_parse():
    for name in ("linear_demo.json", "classification_bench.json"):
        cfg = load_config(Path(__file__).parents[1] / "configs" / name)
        assert cfg.solvers
