"""Random instances and an operation-by-operation reference simulator shared by the tests."""
from __future__ import annotations

import numpy as np

from kcfattack.dynamics import AttackParams, StepContext, apply_attack
from kcfattack.engine import PathState
from kcfattack.harness.instance import random_plant, random_sensor
from kcfattack.kkt import solve_kkt_fixed_T
from kcfattack.lgcore import AttackerFilterState, initial_state, kalman_predict_update, observe, process_step
from kcfattack.network import NetworkModel, Topology, build_topology, compute_kcf_gains, kcf_step
from kcfattack.rng import INITIAL_STATE, PLANT_NOISE, SENSOR_NOISE, RngStream


def random_network(gen, N=6, q=2, p=3, kind=None, consensus_weight=1.0) -> NetworkModel:
    if N == 1:
        topology = Topology(np.zeros((1, 1), dtype=bool))
    else:
        topology = build_topology(kind or ("regular3-hexagon" if N == 6 else "line"), N)
    process = random_plant(q, gen)
    sensors = [random_sensor(p, q, gen) for _ in range(N)]
    return NetworkModel(process, sensors, topology,
                        compute_kcf_gains(process, sensors, topology, consensus_weight))


def random_filter(gen, q, x_star, scale=1.0):
    L = gen.standard_normal((q, q)) * 0.5
    return AttackerFilterState(scale * gen.standard_normal(q), L @ L.T + 0.1 * np.eye(q),
                               np.asarray(x_star, dtype=float))


def random_params(gen, net, x_star, scale=1.0, attacked=None) -> AttackParams:
    q = net.q
    T, U, M, d = [], [], [], []
    for s in net.sensors:
        p = s.p
        T.append(np.eye(p) + 0.3 * scale * gen.standard_normal((p, p)))
        U.append(0.5 * scale * gen.standard_normal((p, p)))
        M.append(0.3 * scale * gen.standard_normal((p, q)))
        d.append(scale * gen.standard_normal(p))
    return AttackParams(T, U, M, d, x_star, attacked)


def random_sigma(gen, net):
    out = []
    for s in net.sensors:
        L = gen.standard_normal((s.p, s.p)) * 0.3
        out.append(L @ L.T + np.eye(s.p))
    return out


def reference_kkt_path(inst, net, seed, steps, lam, xi=0.5):
    """KKT-attacked path built only from the per-operation functions.

    Uses the same RNG streams as the fused simulator, so both must agree up
    to rounding.  Returns per-step node estimates, attacker estimates and the
    one-step expected moments ``(sum theta_sq, sum z_quad)``.
    """
    x_star = inst.x_star
    plant, sensor = RngStream(seed, PLANT_NOISE), RngStream(seed, SENSOR_NOISE)
    x = initial_state(net.q, RngStream(seed, INITIAL_STATE), inst.sigma0)
    filt = AttackerFilterState.initial(net.q, x_star, inst.sigma0)
    xhat = np.zeros((net.N, net.q))
    Sigma = [np.linalg.inv(S) for S in inst.Sinv]
    out_xhat, out_att, out_mom = [], [], []
    for _ in range(steps):
        theta = xhat - x_star
        ctx = StepContext.build(theta, filt, net, Sigma)
        sol = solve_kkt_fixed_T(lam, theta, filt, net, xi, Sigma)
        params = sol.params(x_star)
        rep = ctx.report(params, lam, xi)
        out_mom.append((rep.theta_sq.sum(), rep.z_quad.sum()))
        x = process_step(x, net.process, plant)
        ys = [observe(x, s, sensor) for s in net.sensors]
        inputs = []
        for k, s in enumerate(net.sensors):
            pred = s.H @ net.process.A @ xhat[k]
            _, y_tilde = apply_attack(ys[k] - pred, theta[k], params, k, prediction=pred)
            inputs.append(y_tilde)
        filt = kalman_predict_update(filt, ys, net.process, net.sensors)
        xhat = np.array([st.xhat for st in kcf_step(xhat, inputs, net, x_star)])
        out_xhat.append(xhat)
        out_att.append(filt.xhat)
    return np.array(out_xhat), np.array(out_att), np.array(out_mom)


def fresh_state(inst, seed=0):
    return PathState.start(inst, seed)
