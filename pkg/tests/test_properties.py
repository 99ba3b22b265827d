import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import random_filter, random_network, random_params, random_sigma
from kcfattack.detector import DetectorConfig, DetectorState, detector_step
from kcfattack.dynamics import StepContext, spectral_radius
from kcfattack.lgcore import covariance_step, symmetrize
from kcfattack.online import OptimizerState
from kcfattack.spsa import SpsaIterate

seeds = st.integers(0, 2 ** 32 - 1)
finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_covariance_step_keeps_symmetric_psd(seed):
    gen = np.random.default_rng(seed)
    net = random_network(gen, 1)
    L = gen.standard_normal((2, 2))
    R = L @ L.T
    for _ in range(5):
        _, R = covariance_step(R, net.process, net.sensors[0].H, net.sensors[0].R)
        assert np.allclose(R, R.T, atol=1e-12)
        assert np.linalg.eigvalsh(symmetrize(R)).min() >= -1e-12


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_moments_are_non_negative(seed):
    gen = np.random.default_rng(seed)
    net = random_network(gen, 4, kind="line")
    x_star = np.array([2.0, 2.0])
    ctx = StepContext.build(gen.standard_normal((4, 2)), random_filter(gen, 2, x_star), net, random_sigma(gen, net))
    rep = ctx.report(random_params(gen, net, x_star), 0.3, 0.5)
    assert np.all(rep.theta_sq >= 0) and np.all(rep.z_quad >= 0)
    assert rep.f_reg >= rep.f_t


@settings(max_examples=40, deadline=None)
@given(arrays(float, (3, 3, 2), elements=finite), arrays(float, (3, 3), elements=finite), st.floats(0.1, 100))
def test_clamp_is_a_projection(M, d, bound):
    it = SpsaIterate(np.tile(np.eye(3), (3, 1, 1)), M, d, bound=bound)
    assert np.abs(it.M).max() <= bound and np.abs(it.d).max() <= bound
    again = it.copy().clamp()
    assert np.array_equal(again.M, it.M) and np.array_equal(again.d, it.d)
    inside = np.abs(M) <= bound
    assert np.array_equal(it.M[inside], M[inside])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=60), st.booleans())
def test_multiplier_stays_in_box(violations, adam):
    opt = OptimizerState(lam=4.0, A0=10.0, adam=adam)
    for v in violations:
        opt.update(v)
        assert 0.0 <= opt.lam <= 10.0


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 6), st.integers(1, 40))
def test_window_holds_last_scores(seed, J, steps):
    gen = np.random.default_rng(seed)
    cfg = DetectorConfig([np.eye(2), 2.0 * np.eye(2)], eta=5.0, J=J)
    state = DetectorState.initial(2, J)
    history = []
    for _ in range(steps):
        z = gen.standard_normal((2, 2))
        history.append([z[0] @ z[0], z[1] @ z[1] / 2.0])
        state, alarms, It = detector_step(state, z, cfg)
        window = np.array(history[-J:]).sum(axis=0)
        assert np.allclose(state.statistic, window)
        assert np.array_equal(alarms, window >= 5.0) and It == bool(alarms.any())
        assert state.count == min(len(history), J)


@settings(max_examples=40, deadline=None)
@given(seeds, st.floats(0.01, 100.0))
def test_spectral_radius_is_homogeneous(seed, scale):
    M = np.random.default_rng(seed).standard_normal((6, 6))
    assert np.isclose(spectral_radius(scale * M), scale * spectral_radius(M), rtol=1e-9)
    assert np.isclose(spectral_radius(M, "power", tol=1e-13), spectral_radius(M), rtol=1e-6)
