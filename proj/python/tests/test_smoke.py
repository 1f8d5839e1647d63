import json

import numpy as np
import pytest

import pisml


def test_equilibrium_is_stationary():
    x = pisml.equilibrium(1.0)
    assert np.max(np.abs(pisml.gfm_derivative(x, 1.0))) <= 1e-10


def test_scenario_shape_and_input():
    tr = pisml.simulate_scenario()
    assert tr.x.shape == (401, 13)
    assert tr.u[0] == 1.0 and tr.u[-1] == 0.4
    assert tr.to_csv().splitlines()[0] == "t," + ",".join(f"x{i}" for i in range(13)) + ",u"


def test_truth_spectrum_is_stable():
    eig = pisml.truth_spectrum(0.8)
    assert len(eig) == 13
    assert max(re for re, _ in eig) < 0.0
    assert pisml.wasserstein(eig, eig) == 0.0


def test_mod_sindy_fit_and_roundtrip():
    data = pisml.generate_dataset(json.dumps({"n_traj": 2, "seed": 3, "perturbations_per_traj": 2}))
    assert len(data.trajectories) == 2
    model, report = pisml.fit_method("mod-sindy", data)
    assert model.mode == "mod_sindy"
    again = pisml.Model.from_json(model.to_json())
    x = pisml.equilibrium(1.0)
    np.testing.assert_array_equal(model.derivative(x, 1.0), again.derivative(x, 1.0))
    assert model.equations().count("\n") == 13


def test_bad_config_raises_value_error():
    with pytest.raises(ValueError):
        pisml.generate_dataset(json.dumps({"n_trajectories": 2}))
