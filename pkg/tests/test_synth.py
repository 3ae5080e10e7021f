"""Synthetic stream generator and the portable RNG behind it."""

import numpy as np
import pytest

from driftcast.rng import PortableRng
from driftcast.synth import DriftEvent, SynthSpec, generate_synthetic


def test_portable_rng_deterministic_and_reasonable():
    a = PortableRng(42).uniform(1000)
    b = PortableRng(42).uniform(1000)
    assert np.array_equal(a, b)
    assert np.all((a >= 0) & (a < 1))
    assert abs(a.mean() - 0.5) < 0.05
    c = PortableRng(43).uniform(1000)
    assert not np.array_equal(a, c)
    n = PortableRng(1).normal(10000)
    assert abs(n.mean()) < 0.05 and abs(n.std() - 1.0) < 0.05


def test_portable_rng_streams_independent():
    a = PortableRng(7, stream=0).uniform(100)
    b = PortableRng(7, stream=1).uniform(100)
    assert not np.array_equal(a, b)


def test_known_rng_values_frozen():
    # pinned values guard cross-platform / cross-version stability
    vals = PortableRng(0).uniform(3)
    expected = [0.13870941014555427, 0.18436667429957676, 0.6974532717895354]
    assert np.array_equal(vals, np.array(expected))
    import hashlib
    digest = hashlib.sha256(vals.tobytes()).hexdigest()
    assert digest == "30a0a8c8b84fcff8e04cfe3a603c744bf28be72b055ccd4168f893ce5ff5f81a"


def test_pure_sinusoid_when_noise_free():
    spec = SynthSpec(sites=1, length=96, period=24.0, noise=0.0, coupling=0.0, seed=1)
    ds, events = generate_synthetic(spec)
    assert events == []
    y = ds.targets[:, 0]
    assert np.allclose(y[:24], y[24:48], atol=1e-12)  # exactly periodic
    assert np.allclose(y[:48], y[48:], atol=1e-12)
    # pure sinusoid around the base level (site phase is seed-dependent)
    assert y.mean() == pytest.approx(spec.base, abs=1e-6)
    # sampling may straddle the true peak: ptp in [2a*cos(pi/24), 2a]
    assert y.max() - y.min() == pytest.approx(2 * spec.amplitude, abs=0.01)


def test_abrupt_shift_moves_mean_by_magnitude():
    ev = DriftEvent(start=240, type="abrupt", magnitude=0.4)
    spec = SynthSpec(sites=3, length=480, period=24.0, noise=0.02, coupling=0.3,
                     seed=5, drift=[ev])
    ds, events = generate_synthetic(spec)
    assert events[0]["start"] == 240
    pre = ds.targets[:240].mean()
    post = ds.targets[240:].mean()
    assert post - pre == pytest.approx(0.4, abs=0.05)


def test_gradual_ramp_reaches_magnitude():
    ev = DriftEvent(start=100, type="gradual", magnitude=0.3, duration=50)
    spec = SynthSpec(sites=2, length=300, period=24.0, noise=0.0, coupling=0.0, seed=2, drift=[ev])
    ds, _ = generate_synthetic(spec)
    y = ds.targets[:, 0]
    base = SynthSpec(sites=2, length=300, period=24.0, noise=0.0, coupling=0.0, seed=2)
    y0 = generate_synthetic(base)[0].targets[:, 0]
    delta = y - y0
    assert delta[99] == pytest.approx(0.0, abs=1e-12)
    assert delta[125] == pytest.approx(0.15, abs=0.01)
    assert np.allclose(delta[150:], 0.3)


def test_full_coupling_makes_sites_identical_up_to_noise():
    spec = SynthSpec(sites=4, length=200, period=24.0, noise=0.0, coupling=1.0, seed=3)
    ds, _ = generate_synthetic(spec)
    assert np.allclose(ds.targets, ds.targets[:, :1], atol=1e-12)


def test_generator_bit_identical_per_seed():
    spec = SynthSpec(sites=3, length=128, seed=11, drift=[DriftEvent(60, "abrupt", 0.2)])
    a, _ = generate_synthetic(spec)
    b, _ = generate_synthetic(spec)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.targets, b.targets)
    c, _ = generate_synthetic(SynthSpec(sites=3, length=128, seed=12))
    assert not np.array_equal(a.targets, c.targets)


def test_spec_validation_and_json_roundtrip(tmp_path):
    with pytest.raises(Exception):
        SynthSpec(sites=0, length=10).validate()
    with pytest.raises(Exception):
        SynthSpec(sites=1, length=10, drift=[DriftEvent(50, "abrupt", 1.0)]).validate()
    with pytest.raises(Exception):
        SynthSpec(sites=1, length=10, drift=[DriftEvent(5, "weird", 1.0)]).validate()
    spec = SynthSpec(sites=2, length=64, drift=[DriftEvent(10, "gradual", 0.5, 20)])
    path = tmp_path / "spec.json"
    import json
    path.write_text(json.dumps(spec.to_dict()))
    loaded = SynthSpec.from_json(path)
    assert loaded == spec


def test_extra_features_padding():
    spec = SynthSpec(sites=2, length=32, extra_features=2, seed=0)
    ds, _ = generate_synthetic(spec)
    assert ds.n_features == 6
    assert ds.feature_names[-1] == "extra1"
