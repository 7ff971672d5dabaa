import copy
import json
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from mmvlab.config import ConfigError, ExperimentConfig

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

BASE = {
    "name": "base",
    "market": {"horizon": 1.0, "rate": 0.03,
               "coefficients": {"type": "deterministic", "mu": [0.08, 0.05],
                                "sigma": [[0.2, 0.05, 0.0], [0.0, 0.25, 0.1]]}},
    "insurance": {"intensity": 2.0, "loading": 0.2, "reinsurer_loading": 0.3},
    "claims": {"atoms": [[0.5, 0.5], [1.5, 0.5]]},
    "cone": {"type": "orthant", "nonnegative": [True, True]},
    "theta": 1.0,
    "x": 1.0,
}


def doc(**patch):
    d = copy.deepcopy(BASE)
    for path, value in patch.items():
        node = d
        keys = path.split("__")
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
    return d


def errors_of(d):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict(d)
    return info.value.errors


def test_defaults_are_filled():
    cfg = ExperimentConfig.from_dict(BASE)
    assert cfg.solver.dt == pytest.approx(1e-3)
    assert cfg.verification.dt == pytest.approx(1 / 2000)
    assert cfg.verification.n_paths == 100_000
    assert cfg.insurance.y_max == 1.5


def test_canonical_round_trip():
    cfg = ExperimentConfig.from_dict(BASE)
    again = ExperimentConfig.from_json(cfg.to_json())
    assert again == cfg
    assert again.sha256() == cfg.sha256()


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_parse_and_round_trip(path):
    cfg = ExperimentConfig.load(path)
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg
    cfg.build_market(), cfg.build_insurance(), cfg.build_cone()


@given(st.floats(0.01, 0.2), st.floats(0.0, 0.1), st.floats(0.1, 3.0), st.floats(0.05, 1.0),
       st.floats(0.0, 1.0), st.floats(0.1, 5.0), st.floats(-2.0, 2.0))
def test_round_trip_property(mu, r, lam, eta, extra, theta, x):
    d = doc(market__rate=r, market__coefficients__mu=[mu, mu / 2], insurance__intensity=lam,
            insurance__loading=eta, insurance__reinsurer_loading=eta + extra, theta=theta, x=x)
    cfg = ExperimentConfig.from_dict(d)
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg


def test_hash_ignores_formatting_and_key_order():
    a = ExperimentConfig.from_json(json.dumps(BASE))
    b = ExperimentConfig.from_json(json.dumps(BASE, indent=4, sort_keys=True))
    assert a.sha256() == b.sha256()
    c = ExperimentConfig.from_dict(doc(theta=2.0))
    assert c.sha256() != a.sha256()


def test_scalar_and_schedule_forms_agree():
    a = ExperimentConfig.from_dict(BASE)
    b = ExperimentConfig.from_dict(doc(market__rate={"times": [0.0, 1.0], "values": [0.03]}))
    assert a == b


def test_schema_errors_are_listed():
    d = doc(theta="big")
    del d["x"]
    errs = errors_of(d)
    paths = {e["path"] for e in errs}
    assert "/" in paths or any("x" in e["message"] for e in errs)
    assert any(e["path"] == "/theta" for e in errs)


@pytest.mark.parametrize("patch, path", [
    ({"insurance__reinsurer_loading": 0.1}, "/insurance/reinsurer_loading"),
    ({"insurance__intensity": -1.0}, "/insurance/intensity"),
    ({"theta": 0.0}, "/theta"),
    ({"market__coefficients__sigma": [[0.2], [0.3]]}, "/market/coefficients"),
    ({"cone": {"type": "orthant", "nonnegative": [True]}}, "/cone"),
    ({"solver": {"dt": 0.3}}, "/solver/dt"),
    ({"verification": {"dt": 0.001, "identity_levels": 10}}, "/verification/identity_levels"),
    ({"claims": {"atoms": [[1.0, 0.4], [2.0, 0.4]]}}, "/claims"),
])
def test_cross_field_rules(patch, path):
    errs = errors_of(doc(**patch))
    assert any(e["path"] == path for e in errs), errs


def test_error_payload_shape():
    errs = errors_of(doc(theta=-1.0))
    payload = ConfigError(errs).to_dict()
    assert payload["error"] == "validation"
    assert all(set(e) == {"path", "message"} for e in payload["errors"])


def test_invalid_json_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "absent.json")


def test_unknown_field_rejected():
    errs = errors_of(doc(extra_field=1))
    assert errs


def test_with_seed_shifts_all_seeds():
    cfg = ExperimentConfig.from_dict(doc(verification={"seeds": [3, 4, 7]}))
    assert cfg.with_seed(10).verification.seeds == (10, 11, 14)
    assert cfg.with_seed(10).sha256() != cfg.sha256()


def test_factor_config_builds_random_market():
    cfg = ExperimentConfig.load(CONFIGS / "factor_ou.json")
    assert cfg.build_market().is_random
    assert cfg.solver.lsmc.n_paths == 10000
