import json
import warnings

import numpy as np
import pytest

from slp_smpc.model import (ConstraintSpec, LinearGaussianSystem, ScenarioParseError, StageCost,
                            ValidationError, bundled_scenario_path, constraint_output_set_bounded,
                            dump_scenario, is_stabilizable, load_scenario, scenario_from_dict,
                            scenario_to_dict, scenarios_equal, stage_cost_eval)

from conftest import toy_scenario


def test_bundled_hvac_loads(hvac):
    assert hvac.n == 3 and hvac.m == 1 and hvac.c == 1
    assert hvac.horizon == 6
    np.testing.assert_allclose(hvac.x0, [0.5, 0.0, 0.0])
    # sigma_w is given through its factor E with sigma_w = E' E
    E = np.array([[0.0222170, 0.0017912, 0.0422123],
                  [0.0015376, 0.0006944, 0.0029214],
                  [0.1031813, 0.0001032, 0.1960444]])
    np.testing.assert_allclose(hvac.system.sigma_w, E.T @ E)
    np.testing.assert_allclose(hvac.cost.r, [7.0])


def test_p_tilde_is_chi2_quantile(hvac):
    # (Phi^{-1}(0.7))^2 with Phi^{-1}(0.7) = 0.52440051
    assert hvac.constraints.p_tilde[0] == pytest.approx(0.52440051 ** 2, abs=1e-7)
    assert hvac.constraints.p_tilde[0] == pytest.approx(0.274996, abs=1e-6)


def test_hvac_file_warns_about_singular_noise_and_unbounded_output_set():
    with pytest.warns(UserWarning) as rec:
        load_scenario(bundled_scenario_path())
    text = " ".join(str(w.message) for w in rec)
    assert "singular" in text
    assert "unbounded" in text


def test_roundtrip_toml_and_json(tmp_path, toy):
    for name in ("s.toml", "s.json"):
        path = dump_scenario(toy, tmp_path / name)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            back = load_scenario(path)
        assert scenarios_equal(back, toy)


def test_sigma_from_factor_matches_explicit(toy):
    d = scenario_to_dict(toy)
    d["system"]["E"] = (0.2 * np.eye(2)).tolist()
    del d["system"]["sigma_w"]
    cfg = scenario_from_dict(d)
    np.testing.assert_allclose(cfg.system.sigma_w, toy.system.sigma_w)


@pytest.mark.parametrize("field,value", [
    (("constraints", "p"), [0.5, 0.8]),
    (("constraints", "p"), [1.0, 0.8]),
    (("constraints", "b"), [0.0, 1.0]),
    (("system", "sigma_w"), [[0.04, 0.01], [0.0, 0.04]]),
    (("system", "sigma_w"), [[0.04, 0.0], [0.0, -0.01]]),
])
def test_invalid_fields_rejected(toy, field, value):
    d = scenario_to_dict(toy)
    d[field[0]][field[1]] = value
    with pytest.raises(ValidationError):
        scenario_from_dict(d)


def test_missing_field_named(toy):
    d = scenario_to_dict(toy)
    del d["constraints"]["G"]
    with pytest.raises(ValidationError, match="constraints.G"):
        scenario_from_dict(d)


def test_horizon_must_be_positive_integer(toy):
    d = scenario_to_dict(toy)
    for bad in (0, 2.5, True):
        d["horizon"] = bad
        with pytest.raises(ValidationError):
            scenario_from_dict(d)


def test_unparseable_file(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("horizon = [")
    with pytest.raises(ScenarioParseError):
        load_scenario(path)
    with pytest.raises(ScenarioParseError):
        load_scenario(tmp_path / "missing.toml")


def test_unstabilizable_pair_rejected():
    A = np.diag([1.2, 0.5])
    B = np.array([[0.0], [1.0]])
    assert not is_stabilizable(A, B)
    with pytest.raises(ValidationError, match="stabilizable"):
        LinearGaussianSystem(A, B, np.eye(2))
    # an unstable but controllable mode is fine
    assert is_stabilizable(np.diag([1.2, 0.5]), np.array([[1.0], [0.0]]))


def test_decomposition_defaults_and_mismatch():
    cons = ConstraintSpec([[1.0, 0.0]], [[0.5]], [1.0], [0.9])
    np.testing.assert_array_equal(cons.L, np.eye(1))
    np.testing.assert_array_equal(cons.C, cons.G)
    with pytest.raises(ValidationError, match="decomposition"):
        ConstraintSpec([[1.0, 0.0]], [[0.5]], [1.0], [0.9], L=[[2.0]], C=[[1.0, 0.0]], D=[[0.5]])
    with pytest.raises(ValidationError, match="together"):
        ConstraintSpec([[1.0, 0.0]], [[0.5]], [1.0], [0.9], L=[[1.0]])


def test_output_set_boundedness():
    assert constraint_output_set_bounded(np.array([[1.0], [-1.0]]), np.array([1.0, 1.0]))
    assert not constraint_output_set_bounded(np.array([[1.0]]), np.array([1.0]))
    box = np.vstack([np.eye(2), -np.eye(2)])
    assert constraint_output_set_bounded(box, np.ones(4))


def test_stage_cost_eval():
    cost = StageCost(np.diag([1.0, 2.0]), [[3.0]], q=[1.0, 0.0], r=[7.0])
    assert stage_cost_eval(cost, [1.0, 1.0], [2.0]) == pytest.approx(1 + 2 + 1 + 12 + 14)
    with pytest.raises(ValueError):
        stage_cost_eval(cost, [1.0], [2.0])


def test_with_probability_recomputes_p_tilde(toy):
    cfg = toy.with_probability(0.6)
    np.testing.assert_allclose(cfg.constraints.p, [0.6, 0.6])
    assert cfg.constraints.p_tilde[0] == pytest.approx(0.2533471 ** 2, abs=1e-7)


def test_scenario_dict_is_json_serializable(toy):
    json.dumps(scenario_to_dict(toy_scenario(p=0.75)))
