import numpy as np
import pytest
from numpy.random import default_rng
from scipy.linalg import solve_discrete_are

from lpckit.barriers import quadratic_upper_bound
from lpckit.drmpc import (
    ControllerConfig,
    barrier_cost,
    design_feedback_gain,
    solve_dare,
    solve_drmpc,
    solve_qp,
    terminal_penalty,
    tube_control,
)
from lpckit.errors import Infeasible, NotSchur
from lpckit.geometry import Ellipsoid, box


class _Model:
    def __init__(self, A, B):
        self.A = np.atleast_2d(np.asarray(A, float))
        self.B = np.atleast_2d(np.asarray(B, float))


def _small_cfg(mu=0.0, N=10):
    A = np.array([[0.9, 0.2], [0.0, 0.8]])
    B = np.array([[0.0], [1.0]])
    Q = np.eye(2)
    R = np.array([[0.1]])
    K = design_feedback_gain(A, B, Q, R)
    F = A + B @ K
    S = box(np.array([5.0, 5.0]))
    U = box(np.array([4.0]))
    H = quadratic_upper_bound(S, 0.1) + K.T @ quadratic_upper_bound(U, 0.1) @ K
    P = terminal_penalty(F, Q, R, K, mu, H if mu else None)
    cfg = ControllerConfig(
        Q=Q, R=R, N=N, mu=mu, mu_bar=0.0, kappa=0.1, K=K, P=P, Q_bar=Q,
        S=S, U_hat=U, S_f=Ellipsoid(np.eye(2), 50.0), Z_tube=box(np.array([1.0, 1.0])),
        H=H,
    )
    return _Model(A, B), cfg


def test_dare_matches_scipy():
    A = np.array([[1.1, 0.3], [0.0, 0.9]])
    B = np.array([[0.0], [1.0]])
    Q = np.diag([1.0, 2.0])
    R = np.array([[0.5]])
    P = solve_dare(A, B, Q, R)
    P_ref = solve_discrete_are(A, B, Q, R)
    assert np.allclose(P, P_ref, atol=1e-8)


def test_feedback_gain_is_schur():
    A = np.array([[1.2, 0.1], [0.0, 1.05]])
    B = np.eye(2)
    K = design_feedback_gain(A, B, np.eye(2), 0.1 * np.eye(2))
    assert np.max(np.abs(np.linalg.eigvals(A + B @ K))) < 1.0


def test_terminal_penalty_lyapunov_residual():
    model, cfg = _small_cfg()
    F = model.A + model.B @ np.atleast_2d(cfg.K)
    res = F.T @ cfg.P @ F - cfg.P + cfg.Q_bar + np.atleast_2d(cfg.K).T @ cfg.R @ np.atleast_2d(cfg.K)
    assert np.linalg.norm(res) < 1e-10
    with pytest.raises(NotSchur):
        terminal_penalty(np.eye(2) * 1.01, np.eye(2), np.eye(1), np.zeros((1, 2)))


def test_qp_active_set_against_kkt_enumeration():
    rng = default_rng(0)
    for _ in range(20):
        L = rng.standard_normal((3, 3))
        G = L @ L.T + 3.0 * np.eye(3)
        c = rng.standard_normal(3)
        A_in = np.vstack([np.eye(3), -np.eye(3)])
        b_in = np.full(6, 1.0)
        x = solve_qp(G, c, A_in, b_in)
        # brute force over active sets
        best = None
        for mask in range(64):
            act = [i for i in range(6) if mask >> i & 1]
            Aw = A_in[act]
            KKT = np.block([[G, Aw.T], [Aw, np.zeros((len(act), len(act)))]])
            rhs = np.concatenate([-c, b_in[act]])
            try:
                sol = np.linalg.solve(KKT, rhs)
            except np.linalg.LinAlgError:
                continue
            z, lam = sol[:3], sol[3:]
            if np.all(A_in @ z <= b_in + 1e-9) and np.all(lam >= -1e-9):
                v = 0.5 * z @ G @ z + c @ z
                if best is None or v < best[0]:
                    best = (v, z)
        assert best is not None
        assert np.allclose(x, best[1], atol=1e-7)


def test_qp_infeasible_raises():
    with pytest.raises(Infeasible):
        solve_qp(
            np.eye(1), np.zeros(1),
            np.array([[1.0], [-1.0]]), np.array([-2.0, 1.0]),
        )


def _backward_riccati_gain(model, cfg):
    P = cfg.P
    Kj = None
    for _ in range(cfg.N):
        BtP = model.B.T @ P
        Kj = -np.linalg.solve(cfg.R + BtP @ model.B, BtP @ model.A)
        P = cfg.Q_bar + model.A.T @ P @ model.A + model.A.T @ P @ model.B @ Kj
        P = 0.5 * (P + P.T)
    return Kj


def test_drmpc_free_anchor_rests_at_origin_inside_tube():
    # when the measured state fits inside the tube around the origin, the
    # cheapest nominal plan is the zero plan and all control is tube feedback
    model, cfg = _small_cfg()
    s = np.array([0.2, -0.1])
    s0, u_seq, V = solve_drmpc(model, s, None, cfg)
    assert np.allclose(s0, 0.0, atol=1e-8)
    assert np.allclose(u_seq, 0.0, atol=1e-8)
    u, _ = tube_control(u_seq[0], cfg.K, s, s0)
    assert np.allclose(u, np.atleast_2d(cfg.K) @ s)


def test_drmpc_tight_tube_follows_finite_horizon_lq():
    model, cfg = _small_cfg()
    cfg.Z_tube = box(np.array([0.01, 0.01]))
    s = np.array([1.5, -0.8])
    s0, u_seq, _ = solve_drmpc(model, s, None, cfg)
    assert np.max(np.abs(s0 - s)) <= 0.01 + 1e-8
    # with state/input constraints loose, the inputs are the backward-Riccati
    # policy from the chosen anchor
    assert np.allclose(u_seq[0], _backward_riccati_gain(model, cfg) @ s0, atol=1e-6)


def test_drmpc_respects_input_bounds():
    model, cfg = _small_cfg()
    s = np.array([4.0, 4.0])
    _, u_seq, _ = solve_drmpc(model, s, None, cfg)
    assert np.all(np.abs(u_seq) <= cfg.U_hat.offsets[0] + 1e-8)


def test_drmpc_terminal_constraint_enforced():
    model, cfg = _small_cfg()
    cfg.S_f = Ellipsoid(np.eye(2), 0.01)
    cfg.Z_tube = box(np.array([0.01, 0.01]))
    A, B = model.A, model.B
    s = np.array([2.0, -1.0])
    s0, u_seq, _ = solve_drmpc(model, s, None, cfg)
    ss = s0.copy()
    for u in u_seq:
        ss = A @ ss + (B @ u).ravel()
    assert cfg.S_f.contains(ss, tol=1e-6)


def test_barrier_mode_matches_riccati_when_barriers_vanish():
    # barrier mode anchors at the measured state; with mu = 0 its solution is
    # the exact finite-horizon feedback
    model, cfg = _small_cfg(mu=0.0)
    s = np.array([0.1, 0.05])
    s0, u_soft, _ = solve_drmpc(model, s, None, cfg, barrier_mode=True)
    assert np.allclose(s0, s)
    assert np.allclose(u_soft[0], _backward_riccati_gain(model, cfg) @ s, atol=1e-7)


def test_barrier_cost_consistency():
    model, cfg = _small_cfg(mu=0.001)
    rng = default_rng(1)
    s0 = rng.uniform(-1, 1, 2)
    u = rng.uniform(-1, 1, (cfg.N, 1))
    # explicit rollout equals the recomputed-path value
    ss = np.zeros((cfg.N + 1, 2))
    ss[0] = s0
    for j in range(cfg.N):
        ss[j + 1] = model.A @ ss[j] + (model.B @ u[j]).ravel()
    v1 = barrier_cost(s0, u, model.A, model.B, cfg)
    v2 = barrier_cost(s0, u, model.A, model.B, cfg, ss)
    assert v1 == pytest.approx(v2, rel=1e-12)


def test_tube_control_flags_violation():
    K = np.array([[-1.0, 0.0]])
    u, bad = tube_control(np.array([0.5]), K, np.array([0.2, 0.0]), np.zeros(2), box(np.array([1.0])))
    assert u[0] == pytest.approx(0.3)
    assert not bad
    _, bad = tube_control(np.array([5.0]), K, np.zeros(2), np.zeros(2), box(np.array([1.0])))
    assert bad
