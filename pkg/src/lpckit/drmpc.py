"""Tube-based robust MPC on the lifted model: feedback gain design, terminal
penalty, condensed finite-horizon solve (hard-constrained QP or relaxed
barrier mode) and the tube feedback law."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_lyapunov
from scipy.optimize import linprog

from .barriers import RelaxedBarrier
from .errors import (
    Infeasible,
    MaxIterations,
    NotSchur,
    NotStabilizable,
)
from .geometry import Ellipsoid, Polytope


def solve_dare(
    A: np.ndarray,
    B: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 200000,
) -> np.ndarray:
    """Discrete algebraic Riccati equation by fixed-point iteration."""
    A, B = np.asarray(A, float), np.atleast_2d(np.asarray(B, float))
    Q, R = np.atleast_2d(np.asarray(Q, float)), np.atleast_2d(np.asarray(R, float))
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        Pn = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)
        Pn = 0.5 * (Pn + Pn.T)
        delta = np.max(np.abs(Pn - P))
        P = Pn
        if not np.isfinite(delta) or np.max(np.abs(P)) > 1e14:
            raise NotStabilizable("Riccati iteration diverged")
        if delta < tol:
            return P
    raise NotStabilizable("Riccati iteration did not converge")


def design_feedback_gain(
    A: np.ndarray, B: np.ndarray, Q_bar: np.ndarray, R: np.ndarray
) -> np.ndarray:
    """Stabilizing tube feedback from the Riccati fixed point."""
    A, B = np.asarray(A, float), np.atleast_2d(np.asarray(B, float))
    R = np.atleast_2d(np.asarray(R, float))
    Pd = solve_dare(A, B, Q_bar, R)
    K = -np.linalg.solve(R + B.T @ Pd @ B, B.T @ Pd @ A)
    F = A + B @ K
    if np.max(np.abs(np.linalg.eigvals(F))) >= 1.0:
        raise NotStabilizable("closed-loop matrix is not Schur stable")
    return K


def terminal_penalty(
    F: np.ndarray,
    Q_bar: np.ndarray,
    R: np.ndarray,
    K: np.ndarray,
    mu: float = 0.0,
    H: np.ndarray | None = None,
) -> np.ndarray:
    """Discrete Lyapunov solve F'PF - P = -(Q_bar + K'RK + mu*H)."""
    F = np.asarray(F, float)
    if np.max(np.abs(np.linalg.eigvals(F))) >= 1.0:
        raise NotSchur("terminal penalty requires a Schur matrix")
    K = np.atleast_2d(np.asarray(K, float))
    R = np.atleast_2d(np.asarray(R, float))
    rhs = Q_bar + K.T @ R @ K
    if mu and H is not None:
        rhs = rhs + mu * H
    rhs = 0.5 * (rhs + rhs.T)
    P = solve_discrete_lyapunov(F.T, rhs)
    return 0.5 * (P + P.T)


def solve_qp(
    G: np.ndarray,
    c: np.ndarray,
    A_in: np.ndarray,
    b_in: np.ndarray,
    max_iter: int = 500,
    tol: float = 1e-10,
) -> np.ndarray:
    """Primal active-set method for a strictly convex QP
    min 0.5 x'Gx + c'x  s.t.  A_in x <= b_in."""
    n = G.shape[0]
    p = A_in.shape[0]
    # phase 1: max-margin feasible point
    res = linprog(
        np.concatenate([np.zeros(n), [-1.0]]),
        A_ub=np.hstack([A_in, np.ones((p, 1))]),
        b_ub=b_in,
        bounds=[(None, None)] * n + [(None, 10.0)],
        method="highs",
    )
    if not res.success or -res.fun < -1e-9:
        raise Infeasible("QP constraints infeasible")
    x = res.x[:n]
    work: list[int] = []
    for it in range(max_iter):
        if it and it % 150 == 0:
            tol *= 10.0  # degenerate working sets can cycle at the tightest tol
        g = G @ x + c
        if work:
            Aw = A_in[work]
            KKT = np.block([[G, Aw.T], [Aw, np.zeros((len(work), len(work)))]])
            rhs = np.concatenate([-g, np.zeros(len(work))])
            sol, *_ = np.linalg.lstsq(KKT, rhs, rcond=None)
            step, lam = sol[:n], sol[n:]
        else:
            step = np.linalg.solve(G, -g)
            lam = np.empty(0)
        if np.max(np.abs(step)) < tol:
            if lam.size == 0 or np.min(lam) >= -tol:
                return x
            work.pop(int(np.argmin(lam)))
            continue
        # ratio test against inactive constraints
        alpha = 1.0
        block = -1
        for i in range(p):
            if i in work:
                continue
            ap = A_in[i] @ step
            if ap > tol:
                a_max = (b_in[i] - A_in[i] @ x) / ap
                if a_max < alpha - 1e-14:
                    alpha = max(a_max, 0.0)
                    block = i
        x = x + alpha * step
        if block >= 0:
            work.append(block)
    raise MaxIterations("active-set QP did not terminate")


@dataclass
class ControllerConfig:
    """Weights, horizon, gains and the constraint sets shared by both the
    robust MPC and the learning controller."""

    Q: np.ndarray
    R: np.ndarray
    N: int
    mu: float
    mu_bar: float
    kappa: float
    K: np.ndarray
    P: np.ndarray
    Q_bar: np.ndarray
    S: Polytope
    U_hat: Polytope
    S_f: Ellipsoid
    Z_tube: Polytope
    H: np.ndarray | None = None
    lam_barriers: list | None = None
    state_barrier: RelaxedBarrier | None = None
    input_barrier: RelaxedBarrier | None = None
    terminal_barrier: RelaxedBarrier | None = None

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, float))
        self.R = np.atleast_2d(np.asarray(self.R, float))
        if self.state_barrier is None:
            self.state_barrier = RelaxedBarrier(self.S, self.kappa)
        if self.input_barrier is None:
            self.input_barrier = RelaxedBarrier(self.U_hat, self.kappa)
        if self.terminal_barrier is None:
            self.terminal_barrier = RelaxedBarrier(
                self.S_f, self.kappa, recentered=True, relaxed=True
            )


def _prediction_matrices(A, B, N):
    n = A.shape[0]
    m = B.shape[1]
    Sx = np.zeros(((N + 1) * n, n))
    Su = np.zeros(((N + 1) * n, N * m))
    Ai = np.eye(n)
    Sx[:n] = Ai
    for i in range(1, N + 1):
        Ai = A @ Ai
        Sx[i * n : (i + 1) * n] = Ai
    for j in range(N):
        AB = B.copy()
        for i in range(j + 1, N + 1):
            Su[i * n : (i + 1) * n, j * m : (j + 1) * m] = AB
            AB = A @ AB
    return Sx, Su


def _condensed_cost(cfg: ControllerConfig, A, B):
    n, m, N = A.shape[0], B.shape[1], cfg.N
    Sx, Su = _prediction_matrices(A, B, N)
    Wbig = np.zeros(((N + 1) * n, (N + 1) * n))
    for i in range(N):
        Wbig[i * n : (i + 1) * n, i * n : (i + 1) * n] = cfg.Q_bar
    Wbig[N * n :, N * n :] = cfg.P
    M = np.hstack([Sx, Su])
    G = 2.0 * (M.T @ Wbig @ M)
    Ru = np.kron(np.eye(N), cfg.R)
    G[n:, n:] += 2.0 * Ru
    return G, M, Sx, Su


def solve_drmpc(
    model,
    s_now: np.ndarray,
    s_hat_prev: np.ndarray | None,
    cfg: ControllerConfig,
    barrier_mode: bool = False,
):
    """Finite-horizon constrained solve. Hard-constraint mode optimizes the
    nominal initial state freely inside the tube; barrier mode minimizes the
    relaxed-barrier cost for each initial-state candidate by damped Newton.

    Returns (s_hat0, u_sequence, optimal cost)."""
    A, B = model.A, np.atleast_2d(model.B)
    if barrier_mode:
        return _solve_barrier(model, s_now, s_hat_prev, cfg)
    n, m, N = A.shape[0], B.shape[1], cfg.N
    G, M, Sx, Su = _condensed_cost(cfg, A, B)
    c = np.zeros(n + N * m)
    rows, offs = [], []
    for i in range(N):
        blk = M[i * n : (i + 1) * n]
        rows.append(cfg.S.normals @ blk)
        offs.append(cfg.S.offsets)
    for j in range(N):
        r = np.zeros((cfg.U_hat.normals.shape[0], n + N * m))
        r[:, n + j * m : n + (j + 1) * m] = cfg.U_hat.normals
        rows.append(r)
        offs.append(cfg.U_hat.offsets)
    tube = np.zeros((cfg.Z_tube.normals.shape[0], n + N * m))
    tube[:, :n] = -cfg.Z_tube.normals
    rows.append(tube)
    offs.append(cfg.Z_tube.offsets - cfg.Z_tube.normals @ s_now)
    A_in = np.vstack(rows)
    b_in = np.concatenate(offs)
    term_blk = M[N * n :]
    Zf, lev = cfg.S_f.shape, cfg.S_f.level
    for _ in range(20):
        x = solve_qp(G, c, A_in, b_in)
        sN = term_blk @ x
        q = float(sN @ Zf @ sN)
        if q <= lev * (1.0 + 1e-8) + 1e-12:
            s0 = x[:n]
            u_seq = x[n:].reshape(N, m)
            V = 0.5 * float(x @ G @ x)
            return s0, u_seq, V
        sb = sN * np.sqrt(lev / q)
        grad = 2.0 * Zf @ sb
        A_in = np.vstack([A_in, grad @ term_blk])
        b_in = np.concatenate([b_in, [float(grad @ sb)]])
    raise MaxIterations("terminal-ellipsoid linearization did not converge")


def _solve_barrier(model, s_now, s_hat_prev, cfg: ControllerConfig):
    A, B = model.A, np.atleast_2d(model.B)
    n, m, N = A.shape[0], B.shape[1], cfg.N
    candidates = [np.asarray(s_now, float)]
    if s_hat_prev is not None:
        candidates.append(np.asarray(s_hat_prev, float))
    best = None
    for s0 in candidates:
        u, V = _newton_horizon(s0, A, B, cfg)
        if best is None or V < best[2] - 1e-12:
            best = (s0, u, V)
    return best


def barrier_cost(
    s0, u_seq, A, B, cfg: ControllerConfig, s_seq: np.ndarray | None = None
) -> float:
    """Relaxed-barrier finite-horizon cost of a given plan. The state sequence
    is recomputed unless supplied."""
    m = np.atleast_2d(B).shape[1]
    u_seq = np.asarray(u_seq, float).reshape(-1, m)
    N = u_seq.shape[0]
    if s_seq is None:
        s_seq = np.empty((N + 1, np.asarray(s0, float).size))
        s_seq[0] = s0
        for j in range(N):
            s_seq[j + 1] = A @ s_seq[j] + B @ u_seq[j]
    ss = s_seq[:N]
    total = float(np.einsum("ij,jk,ik->", ss, cfg.Q_bar, ss))
    total += float(np.einsum("ij,jk,ik->", u_seq, cfg.R, u_seq))
    total += cfg.mu * (
        cfg.state_barrier.value_batch(ss) + cfg.input_barrier.value_batch(u_seq)
    )
    sN = s_seq[N]
    total += float(sN @ cfg.P @ sN) + cfg.mu * cfg.terminal_barrier.value(sN)
    return total


def _newton_horizon(s0, A, B, cfg: ControllerConfig, max_iter: int = 80):
    n, m, N = A.shape[0], B.shape[1], cfg.N
    Sx, Su = _prediction_matrices(A, B, N)
    base = Sx @ s0

    def states(u):
        return (base + Su @ u).reshape(N + 1, n)

    def value(u):
        return barrier_cost(s0, u, A, B, cfg)

    def grad_hess(u):
        ss = states(u)
        g = np.zeros(N * m)
        Hm = np.zeros((N * m, N * m))
        for i in range(N):
            blk = Su[i * n : (i + 1) * n]
            gs = 2.0 * cfg.Q_bar @ ss[i] + cfg.mu * cfg.state_barrier.gradient(ss[i])
            Hs = 2.0 * cfg.Q_bar + cfg.mu * cfg.state_barrier.hessian(ss[i])
            g += blk.T @ gs
            Hm += blk.T @ Hs @ blk
            ui = u[i * m : (i + 1) * m]
            g[i * m : (i + 1) * m] += 2.0 * cfg.R @ ui + cfg.mu * cfg.input_barrier.gradient(ui)
            Hm[i * m : (i + 1) * m, i * m : (i + 1) * m] += (
                2.0 * cfg.R + cfg.mu * cfg.input_barrier.hessian(ui)
            )
        blk = Su[N * n :]
        g += blk.T @ (2.0 * cfg.P @ ss[N] + cfg.mu * cfg.terminal_barrier.gradient(ss[N]))
        Hm += blk.T @ (2.0 * cfg.P + cfg.mu * cfg.terminal_barrier.hessian(ss[N])) @ blk
        return g, Hm

    u = np.zeros(N * m)
    V = value(u)
    for _ in range(max_iter):
        g, Hm = grad_hess(u)
        if np.linalg.norm(g) < 1e-9:
            break
        step = np.linalg.solve(Hm + 1e-12 * np.eye(N * m), -g)
        t = 1.0
        while t > 1e-12:
            Vn = value(u + t * step)
            if Vn <= V + 1e-4 * t * float(g @ step):
                u = u + t * step
                V = Vn
                break
            t *= 0.5
        else:
            break
    return u.reshape(N, m), V


def tube_control(
    u_hat0: np.ndarray,
    K: np.ndarray,
    s_now: np.ndarray,
    s_hat0: np.ndarray,
    input_box: Polytope | None = None,
) -> tuple[np.ndarray, bool]:
    """Tube feedback u = u_hat + K (s - s_hat); the second return flags an
    input-box violation (recorded, never clamped)."""
    u = np.atleast_1d(np.asarray(u_hat0, float)) + np.atleast_2d(K) @ (
        np.asarray(s_now, float) - np.asarray(s_hat0, float)
    )
    violated = input_box is not None and not input_box.contains(u)
    return u, violated
