import numpy as np
import pytest

from helpers import reference_kkt_path
from kcfattack import engine as E
from kcfattack.errors import ConfigurationError
from kcfattack.kernels import available_backends, get_backend
from kcfattack.spsa import SpsaSchedules

FIELDS = ("dev", "It", "score_sum", "scores", "exp_theta", "exp_zq", "x", "xhat", "z", "ztil", "window", "alarms")


def _policies(inst, gen):
    N, p, q = inst.N, inst.p, inst.q
    sched = SpsaSchedules.from_constants(a0=0.3, a_offset=100.0)
    T = np.tile(np.eye(p), (N, 1, 1)) + 0.05 * gen.standard_normal((N, p, p))
    return {
        "none": lambda: E.no_attack_policy(),
        "static": lambda: E.static_policy(T.copy(), 0.2 * np.tile(np.eye(p), (N, 1, 1)),
                                          0.1 * np.ones((N, p, q)), np.ones((N, p))),
        "kkt": lambda: E.kkt_policy(inst, 0.05),
        "kkt0": lambda: E.kkt_policy(inst, 0.0),
        "spsa": lambda: E.spsa_policy(T.copy(), np.zeros((N, p, q)), np.zeros((N, p)), 0.5, 0.5,
                                      sched.a, sched.c),
        "spsaT": lambda: E.spsa_policy(T.copy(), np.zeros((N, p, q)), np.zeros((N, p)), 0.5, 0.5,
                                       sched.a, sched.c, update_T=True),
    }


def _run(inst, make, backend, blocks, seed=5):
    state = E.PathState.start(inst, seed)
    policy = make()
    out = []
    for n in blocks:
        out.append(E.run_block(inst, state, policy, n, record=True, moments=True, backend=backend))
    return {f: np.concatenate([getattr(r, f) for r in out]) for f in FIELDS}, state, policy


@pytest.mark.skipif(len(available_backends()) < 2, reason="compiled kernel not built")
@pytest.mark.parametrize("mode", ["none", "static", "kkt", "kkt0", "spsa", "spsaT"])
def test_backends_agree(hexagon, gen, mode):
    make = _policies(hexagon.inst, gen)[mode]
    a, sa, pa = _run(hexagon.inst, make, "compiled", [300])
    b, sb, pb = _run(hexagon.inst, make, "python", [300])
    for f in FIELDS:
        assert np.allclose(a[f], b[f], rtol=1e-9, atol=1e-9), f
    assert np.array_equal(a["It"], b["It"])
    assert np.allclose(sa.xatt, sb.xatt, rtol=1e-10, atol=1e-10)
    if pa.M is not None:
        assert np.allclose(pa.M, pb.M, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("mode", ["static", "kkt", "spsa"])
def test_block_size_independence(hexagon, gen, mode):
    make = _policies(hexagon.inst, gen)[mode]
    a, sa, _ = _run(hexagon.inst, make, None, [240])
    b, sb, _ = _run(hexagon.inst, make, None, [1, 17, 100, 2, 120])
    for f in FIELDS:
        assert np.array_equal(a[f], b[f]), f
    assert np.array_equal(sa.ring, sb.ring) and sa.t == sb.t == 240


def test_deterministic_for_a_seed(hexagon, gen):
    make = _policies(hexagon.inst, gen)["kkt"]
    a, _, _ = _run(hexagon.inst, make, None, [200], seed=11)
    b, _, _ = _run(hexagon.inst, make, None, [200], seed=11)
    c, _, _ = _run(hexagon.inst, make, None, [200], seed=12)
    assert np.array_equal(a["xhat"], b["xhat"])
    assert not np.array_equal(a["xhat"], c["xhat"])


@pytest.mark.parametrize("backend", available_backends())
def test_fused_kkt_matches_operation_reference(hexagon, backend):
    inst, net = hexagon.inst, hexagon.net
    ref_xhat, ref_att, ref_mom = reference_kkt_path(inst, net, 21, 60, 0.05)
    state = E.PathState.start(inst, 21)
    res = E.run_block(inst, state, E.kkt_policy(inst, 0.05), 60, record=True, moments=True, backend=backend)
    assert np.allclose(res.xhat, ref_xhat, rtol=1e-10, atol=1e-10)
    assert np.allclose(state.xatt, ref_att[-1], rtol=1e-10, atol=1e-10)
    assert np.allclose(res.exp_theta, ref_mom[:, 0], rtol=1e-10)
    assert np.allclose(res.exp_zq, ref_mom[:, 1], rtol=1e-10)


def test_fused_kkt_at_zero_multiplier_matches_reference_state(hexagon):
    # at lam = 0 the minimizer is not unique, so only theta-side quantities coincide
    inst, net = hexagon.inst, hexagon.net
    ref_xhat, _, ref_mom = reference_kkt_path(inst, net, 22, 40, 0.0)
    res = E.run_block(inst, E.PathState.start(inst, 22), E.kkt_policy(inst, 0.0), 40, record=True,
                      moments=True)
    assert np.allclose(res.xhat, ref_xhat, rtol=1e-9, atol=1e-9)
    assert np.allclose(res.exp_theta, ref_mom[:, 0], rtol=1e-9)


def test_divergence_is_detected(hexagon):
    inst = hexagon.inst
    N, p, q = inst.N, inst.p, inst.q
    policy = E.static_policy(50.0 * np.tile(np.eye(p), (N, 1, 1)))
    res = E.run_block(inst, E.PathState.start(inst, 1), policy, 500, diverge_at=1e6)
    assert res.diverged and res.steps < 500
    assert res.diverged_at == res.steps


def test_no_attack_instance_rejects_attacker_modes(hexagon):
    plain = E.SimInstance.from_network(hexagon.net, hexagon.inst.x_star, hexagon.Sigma, attacker_filter=False)
    state = E.PathState.start(plain, 0)
    E.run_block(plain, state, E.no_attack_policy(), 10)
    with pytest.raises(ConfigurationError):
        E.run_block(plain, state, E.kkt_policy(plain, 0.1), 10)
    with pytest.raises(ConfigurationError):
        E.run_block(plain, state, E.no_attack_policy(), 10, moments=True)


def test_negative_steps_rejected(hexagon):
    with pytest.raises(ConfigurationError):
        E.run_block(hexagon.inst, E.PathState.start(hexagon.inst, 0), E.no_attack_policy(), -1)


def test_unknown_backend_rejected():
    with pytest.raises(ConfigurationError):
        get_backend("fortran")


def test_attack_set_restricts_injection(hexagon):
    inst = E.SimInstance.from_network(hexagon.net, hexagon.inst.x_star, hexagon.Sigma, attacked=[0, 3])
    res = E.run_block(inst, E.PathState.start(inst, 2), E.kkt_policy(inst, 0.1), 50, record=True)
    untouched = [1, 2, 4, 5]
    assert np.array_equal(res.ztil[:, untouched], res.z[:, untouched])
    assert not np.allclose(res.ztil[:, [0, 3]], res.z[:, [0, 3]])
