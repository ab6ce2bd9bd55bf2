"""Experiment orchestration: configuration, the offline design pipeline,
closed-loop episode execution for all three controllers, metrics, multi-seed
campaigns, persistent learning and the time-scaling sweep."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import drlpc as L
from .barriers import RelaxedBarrier, quadratic_upper_bound
from .drmpc import (
    ControllerConfig,
    design_feedback_gain,
    solve_drmpc,
    terminal_penalty,
    tube_control,
)
from .errors import (
    DesignInfeasible,
    DivergenceDetected,
    Infeasible,
    NoSafePolicy,
)
from .geometry import (
    Ellipsoid,
    Polytope,
    SupportSet,
    direction_template,
    linear_image,
    minkowski_sum,
    pontryagin_diff,
    inflate_ellipsoid,
    invariant_ball_tube,
    terminal_set,
    feasible_and_costate_sets,
)
from .koopman import (
    LiftedLinearModel,
    SnapshotSet,
    collect_snapshots,
    fit_model,
    gaussian_dictionary,
    identity_dictionary,
    validate_residual_bounds,
    vdp_dictionary,
)
from .plants import get_plant, sample_disturbance, step_discrete

_PLANT_DEFAULTS = {
    "vdp": dict(
        M=50_000, theta=100.0, N=10, N_sim=320, nu=0.01, R=0.01,
        mu=0.001, mu_bar=0.001, x0=[0.1, -0.1],
        env_state=0.3, env_input=0.15, val_fraction=0.4,
        pretrain=2500, pretrain_scale=0.55, pretrain_decay=0.9992,
        eps_W=0.02, rate_decay=0.997,
    ),
    "pendulum": dict(
        M=10_000, theta=1.0, N=20, N_sim=200, nu=0.01, R=0.02,
        mu=0.01, mu_bar=0.001, x0=[0.1, 0.0, 0.0, 0.0], n_centers=7,
        pretrain=0, beta=0.0, gamma=0.0,
    ),
    "linear-test": dict(
        M=2_000, theta=0.0, N=10, N_sim=100, nu=0.01, R=1.0,
        mu=0.0, mu_bar=0.0, x0=[1.0],
    ),
}

_PAPER_SCALE = {"vdp": 400_000, "pendulum": 20_000, "linear-test": 2_000}


@dataclass
class ExperimentConfig:
    plant: str = "vdp"
    controller: str = "drlpc"
    M: int = 50_000
    theta: float = 100.0
    N: int = 10
    N_sim: int = 320
    seeds: list = field(default_factory=lambda: list(range(10)))
    nu: float = 0.01
    Q: list | None = None
    R: float = 0.01
    mu: float = 0.001
    mu_bar: float = 0.001
    kappa: float = 0.1
    beta: float = 0.01
    gamma: float = 0.01
    eps_W: float = 1e-4
    i_bar: int = 10
    rate_decay: float = 0.999
    runs: int = 5
    varrho: float = 0.9
    d_margin: float = 0.1
    env_state: float = 0.5
    env_input: float = 0.25
    val_fraction: float = 0.2
    delta_r: float = 0.01
    target_risk: float = 0.1
    n_centers: int = 7
    pretrain: int = 200
    pretrain_scale: float = 0.45
    pretrain_decay: float = 1.0
    x0: list = field(default_factory=lambda: [0.1, -0.1])
    paper_scale: bool = False

    def __post_init__(self):
        if self.M < 1 or self.N < 1 or self.N_sim < 1:
            raise ValueError("M, N and N_sim must be positive")
        if self.controller not in ("drlpc", "drmpc", "dhp-baseline"):
            raise ValueError(f"unknown controller {self.controller!r}")

    @classmethod
    def for_plant(cls, plant: str, **overrides) -> "ExperimentConfig":
        base = dict(_PLANT_DEFAULTS[plant])
        base["plant"] = plant
        base.update(overrides)
        cfg = cls(**base)
        if cfg.paper_scale:
            cfg.M = _PAPER_SCALE[plant]
            cfg.seeds = list(range(50))
        return cfg

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        plant = d.get("plant", "vdp")
        return cls.for_plant(plant, **{k: v for k, v in d.items() if k != "plant"})

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _dictionary_for(cfg: ExperimentConfig, spec):
    if cfg.plant == "vdp":
        return vdp_dictionary()
    if cfg.plant == "pendulum":
        half = spec.state_box.offsets[: spec.state_dim]
        return gaussian_dictionary(half, cfg.n_centers)
    return identity_dictionary(spec.state_dim)


def _split(data: SnapshotSet, fraction: float) -> tuple[SnapshotSet, SnapshotSet]:
    cut = data.count - max(1, int(round(fraction * data.count)))
    tr = SnapshotSet(data.X[:cut], data.U[:cut], data.W[:cut], data.Xp[:cut])
    va = SnapshotSet(data.X[cut:], data.U[cut:], data.W[cut:], data.Xp[cut:])
    return tr, va


@dataclass
class DesignBundle:
    """Everything the online controllers consume, produced offline."""

    plant: str
    model: LiftedLinearModel
    cfg_mpc: ControllerConfig
    cfg_lpc: ControllerConfig
    basis: L.BasisSpec
    report: object
    varrho: float
    Z_norm: np.ndarray
    S_stage: list = field(default_factory=list)
    tube_mode: str = "worst-case"

    def to_dict(self) -> dict:
        def cfg_dict(c: ControllerConfig) -> dict:
            return {
                "Q": c.Q.tolist(), "R": c.R.tolist(), "N": c.N,
                "mu": c.mu, "mu_bar": c.mu_bar, "kappa": c.kappa,
                "K": np.atleast_2d(c.K).tolist(), "P": c.P.tolist(),
                "Q_bar": c.Q_bar.tolist(),
                "S": c.S.to_dict(), "U_hat": c.U_hat.to_dict(),
                "S_f": c.S_f.to_dict(), "Z_tube": c.Z_tube.to_dict(),
                "H": c.H.tolist() if c.H is not None else None,
                "lam": [b.base_set.to_dict() for b in c.lam_barriers[1:]]
                if c.lam_barriers else None,
            }

        return {
            "plant": self.plant,
            "model": self.model.to_dict(),
            "cfg_mpc": cfg_dict(self.cfg_mpc),
            "cfg_lpc": cfg_dict(self.cfg_lpc),
            "nu": self.basis.nu,
            "varrho": self.varrho,
            "tube_mode": self.tube_mode,
            "Z_norm": self.Z_norm.tolist(),
            "validation": {
                "empirical_risk": self.report.empirical_risk,
                "epsilon": self.report.epsilon,
                "passed": self.report.passed,
                "observed_bounds": list(self.report.observed_bounds),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DesignBundle":
        from .geometry import set_from_dict

        def cfg_from(c: dict) -> ControllerConfig:
            lam = c.get("lam")
            bars = None
            if lam:
                bars = [None] + [RelaxedBarrier(set_from_dict(s)) for s in lam]
            return ControllerConfig(
                Q=np.array(c["Q"]), R=np.array(c["R"]), N=c["N"], mu=c["mu"],
                mu_bar=c["mu_bar"], kappa=c["kappa"], K=np.array(c["K"]),
                P=np.array(c["P"]), Q_bar=np.array(c["Q_bar"]),
                S=Polytope.from_dict(c["S"]), U_hat=Polytope.from_dict(c["U_hat"]),
                S_f=Ellipsoid.from_dict(c["S_f"]),
                Z_tube=Polytope.from_dict(c["Z_tube"]),
                H=np.array(c["H"]) if c["H"] is not None else None,
                lam_barriers=bars,
            )

        model = LiftedLinearModel.from_dict(d["model"])

        class _Rep:
            empirical_risk = d["validation"]["empirical_risk"]
            epsilon = d["validation"]["epsilon"]
            passed = d["validation"]["passed"]
            observed_bounds = tuple(d["validation"]["observed_bounds"])

        return cls(
            plant=d["plant"],
            model=model,
            cfg_mpc=cfg_from(d["cfg_mpc"]),
            cfg_lpc=cfg_from(d["cfg_lpc"]),
            basis=L.BasisSpec(model.dictionary.lifted_dim, d["nu"]),
            report=_Rep(),
            varrho=d["varrho"],
            Z_norm=np.array(d["Z_norm"]),
            tube_mode=d.get("tube_mode", "worst-case"),
        )


def _sampled_tube(F, Dm, rho_o, rw_box, C, K, V_tmpl, u_tmpl, rng,
                  n_roll=64, n_steps=4000, burn=200, headroom=1.25):
    """Operating tube for the lifted error e+ = F e + D w + w_hat, taken as
    running support maxima of sampled rollouts over the directions the
    tightening actually queries, inflated by a fixed headroom factor."""
    nbar = F.shape[0]
    dirs = np.vstack([V_tmpl @ C, u_tmpl @ K, direction_template(nbar)])
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = np.unique(np.round(dirs, 12), axis=0)
    E = np.zeros((n_roll, nbar))
    sup = np.zeros(len(dirs))
    for t in range(n_steps):
        w = rng.uniform(-rho_o, rho_o, (n_roll, Dm.shape[1]))
        wh = rng.uniform(-rw_box, rw_box, (n_roll, nbar))
        E = E @ F.T + w @ Dm.T + wh
        if t >= burn:
            sup = np.maximum(sup, (E @ dirs.T).max(axis=0))
    return Polytope(dirs, headroom * sup)


def offline_design(cfg: ExperimentConfig, rng: np.random.Generator) -> DesignBundle:
    """Offline pipeline: fit the lifted model, bound its residuals, design the
    tube gain, invariant tube and tightened sets, the terminal pair (set and
    penalty) and the per-stage costate bound ellipsoids."""
    spec = get_plant(cfg.plant)
    dictionary = _dictionary_for(cfg, spec)
    data = collect_snapshots(spec, cfg.M, rng)
    train, val = _split(data, cfg.val_fraction)
    model = fit_model(
        train, dictionary, cfg.theta, fit_disturbance=spec.disturbance_bound > 0
    )
    nbar = dictionary.lifted_dim
    n, m = spec.state_dim, spec.input_dim

    # Residual bounds per lifted coordinate over the operating envelope
    # (inner fractions of the state and input boxes): the bound is taken from
    # the training split and certified on the held-out split. Worst-case
    # bounds over the full box are useless here: the bilinear input effect on
    # the quadratic observables makes far-field residuals orders of magnitude
    # larger than anything seen in closed loop, and the near-unit lifted
    # modes would amplify them into a tube larger than the state box.
    from .koopman import model_residuals

    x_half = spec.state_box.offsets[:n]
    u_half = spec.input_box.offsets[:m]

    def _envelope(ds: SnapshotSet) -> np.ndarray:
        ok_x = np.all(np.abs(ds.X) <= cfg.env_state * x_half, axis=1)
        ok_u = np.all(
            np.abs(ds.U.reshape(ds.count, -1)) <= cfg.env_input * u_half, axis=1
        )
        return ok_x & ok_u

    w_tr, _ = model_residuals(model, train)
    mask_tr = _envelope(train)
    if not np.any(mask_tr):
        mask_tr = np.ones(train.count, bool)
    rw_box = 1.1 * np.abs(w_tr[mask_tr]).max(axis=0)
    rho_w = float(np.linalg.norm(rw_box))

    mask_va = _envelope(val)
    val_env = SnapshotSet(
        val.X[mask_va], val.U[mask_va], val.W[mask_va], val.Xp[mask_va]
    ) if np.any(mask_va) else val
    _, v_res = model_residuals(model, val)
    rho_v = 1.1 * float(np.max(np.linalg.norm(v_res, axis=1))) + 1e-12
    report = validate_residual_bounds(
        model, val_env, rho_w, rho_v, cfg.delta_r, cfg.target_risk
    )

    Q = np.eye(n) if cfg.Q is None else np.atleast_2d(np.asarray(cfg.Q, float))
    R = np.atleast_2d(np.asarray(cfg.R, float))
    Q_bar = model.C.T @ Q @ model.C
    # regularize so the Riccati design sees a definite state weight
    Q_bar = Q_bar + 1e-9 * np.eye(nbar)
    K = design_feedback_gain(model.A, model.B, Q_bar, R)
    F = model.A + np.atleast_2d(model.B) @ np.atleast_2d(K)

    template = direction_template(nbar)
    # lifted process disturbance: D * (physical noise box) + fit residual ball,
    # inflated by the safety margin; exact closed-form support
    rho_o = spec.disturbance_bound
    Dm = model.D

    def _dist_support(d):
        return (1.0 + cfg.d_margin) * (
            rho_o * np.abs(Dm.T @ d).sum() + float(np.abs(d) @ rw_box)
        )

    D_infl = SupportSet(nbar, _dist_support)
    Z_exact = invariant_ball_tube(F, D_infl)
    Z_tube = Z_exact.inner_polytope()

    V_tmpl = direction_template(n) if n > 1 else np.array([[1.0], [-1.0]])
    V_set = Polytope(V_tmpl, np.full(V_tmpl.shape[0], rho_v))
    u_tmpl = np.array([[1.0], [-1.0]]) if m == 1 else direction_template(m)

    def _tighten(Z_set):
        O_bar = minkowski_sum(linear_image(model.C, Z_set, V_tmpl), V_set, V_tmpl)
        X_tight = pontryagin_diff(spec.state_box, O_bar)
        KZ = linear_image(np.atleast_2d(K), Z_set, u_tmpl)
        U_hat = pontryagin_diff(spec.input_box, KZ)
        ok = (
            X_tight.check_nonempty() and np.all(X_tight.offsets > 0)
            and U_hat.check_nonempty() and np.all(U_hat.offsets > 0)
        )
        return ok, X_tight, U_hat

    tube_mode = "worst-case"
    ok, X_tight, U_hat = _tighten(Z_exact)
    if not ok:
        # The worst-case tube can exceed the constraint boxes outright when
        # slowly decaying closed-loop modes integrate the disturbance bound
        # (pendulum cart dynamics). Fall back to an operating tube taken from
        # long error-dynamics rollouts under the actual noise distribution,
        # with headroom over the sampled maxima.
        tube_mode = "sampled"
        Z_samp = _sampled_tube(
            F, Dm, rho_o, rw_box, model.C, np.atleast_2d(K), V_tmpl, u_tmpl, rng
        )
        Z_tube = Z_samp
        ok, X_tight, U_hat = _tighten(Z_samp)
    if not ok:
        raise DesignInfeasible("tightened sets lost the origin")
    S_bar = Polytope(X_tight.normals @ model.C, X_tight.offsets)

    S_f = terminal_set(F, S_bar, U_hat, K, cfg.varrho)
    Z_norm = S_f.shape * (cfg.varrho / S_f.level)

    H = quadratic_upper_bound(S_bar, cfg.kappa) + np.atleast_2d(K).T @ (
        quadratic_upper_bound(U_hat, cfg.kappa)
    ) @ np.atleast_2d(K)
    P_hard = terminal_penalty(F, Q_bar, R, K)
    P_soft = terminal_penalty(F, Q_bar, R, K, cfg.mu, H)

    S_stage, lam_list = feasible_and_costate_sets(
        model.A, model.B, S_bar, U_hat, S_f, P_soft, Q_bar, cfg.N, template
    )
    lam_barriers = [None] + [
        RelaxedBarrier(inflate_ellipsoid(e), cfg.kappa) for e in lam_list[1:]
    ]

    cfg_mpc = ControllerConfig(
        Q=Q, R=R, N=cfg.N, mu=0.0, mu_bar=0.0, kappa=cfg.kappa, K=K, P=P_hard,
        Q_bar=Q_bar, S=S_bar, U_hat=U_hat, S_f=S_f, Z_tube=Z_tube,
    )
    cfg_lpc = ControllerConfig(
        Q=Q, R=R, N=cfg.N, mu=cfg.mu, mu_bar=cfg.mu_bar, kappa=cfg.kappa, K=K,
        P=P_soft, Q_bar=Q_bar, S=S_bar, U_hat=U_hat, S_f=S_f, Z_tube=Z_tube,
        H=H, lam_barriers=lam_barriers,
    )
    basis = L.BasisSpec(nbar, cfg.nu)
    return DesignBundle(
        plant=cfg.plant, model=model, cfg_mpc=cfg_mpc, cfg_lpc=cfg_lpc,
        basis=basis, report=report, varrho=cfg.varrho, Z_norm=Z_norm,
        S_stage=S_stage, tube_mode=tube_mode,
    )


@dataclass
class EpisodeTrace:
    seed: int
    controller: str
    rows: list = field(default_factory=list)
    status: str = "success"
    final_weights: dict | None = None

    @property
    def success(self) -> bool:
        return self.status == "success" and not any(r["violation"] for r in self.rows)

    def sums(self, Q: np.ndarray, R: np.ndarray) -> tuple[float, float, float]:
        jx = ju = j = 0.0
        for r in self.rows:
            x, u = np.asarray(r["x"]), np.asarray(r["u"])
            jx += float(x @ x)
            ju += float(u @ u)
            j += float(x @ Q @ x) + float(u @ R @ u)
        return j, jx, ju

    def mean_step_time(self) -> float:
        if not self.rows:
            return 0.0
        return float(np.mean([r["step_time_s"] for r in self.rows]))


def _dhp_update(ac: L.ActorCriticState, s, model, cfg: ControllerConfig, basis):
    """One incremental infinite-horizon critic/actor update (no barriers, no
    horizon reset); returns the actor input used for the update."""
    A, B = model.A, np.atleast_2d(model.B)
    h = basis.features(s, 0)
    u_hat = ac.W_a.T @ h
    s_next = A @ s + B @ u_hat
    h_plus = basis.features(s_next, 0)
    lam_next = ac.W_c.T @ h_plus
    lam_hat = ac.W_c.T @ h
    lam_d = 2.0 * cfg.Q_bar @ s + A.T @ lam_next
    eps_c = lam_d - lam_hat
    g_c = 2.0 * np.outer(h_plus, A @ eps_c) - 2.0 * np.outer(h, eps_c)
    beta = ac.beta * ac.rate_decay**ac.decay_steps
    gamma = ac.gamma * ac.rate_decay**ac.decay_steps
    ac.W_c = ac.W_c - beta * g_c
    u_d = -0.5 * np.linalg.solve(cfg.R, B.T @ lam_next)
    eps_a = 2.0 * cfg.R @ (u_d - ac.W_a.T @ h)
    g_a = -2.0 * np.outer(h, 2.0 * cfg.R @ eps_a)
    ac.W_a = ac.W_a - gamma * g_a
    ac.decay_steps += 1
    ac.check_finite()
    return u_hat


def dhp_baseline_step(ac: L.ActorCriticState, s, model, cfg, basis):
    return _dhp_update(ac, s, model, cfg, basis)


def pretrain_actor_critic(
    ac: "L.ActorCriticState", bundle: DesignBundle, cfg: ExperimentConfig
):
    """Warm-start the actor-critic on nominal-model rollouts before the first
    plant interaction. Only the fitted lifted model is simulated, so this is
    part of controller setup, like the offline tube design for the MPC."""
    model = bundle.model
    ccfg = bundle.cfg_lpc
    spec = get_plant(bundle.plant)
    if cfg.pretrain == 0:
        # no rollout budget: seed the actor with the tube gain and the
        # critic with the costate field of the terminal penalty, then hand
        # the episode the constrained nominal plan from the campaign start
        # state as its initial backup
        nb = bundle.basis.lifted_dim
        ac.W_a[:nb] = np.atleast_2d(ccfg.K).T
        ac.W_a[nb:] = 0.0
        ac.W_c[:nb] = 2.0 * ccfg.P
        ac.W_c[nb:] = 0.0
        s0 = model.lift(np.asarray(cfg.x0, float))
        s_ref, u_ref, _ = solve_drmpc(model, s0, None, ccfg, barrier_mode=True)
        A, B = model.A, np.atleast_2d(model.B)
        u_seq = np.atleast_2d(u_ref)
        s_seq = np.zeros((ccfg.N + 1, nb))
        s_seq[0] = s_ref
        for j in range(ccfg.N):
            s_seq[j + 1] = A @ s_seq[j] + B @ u_seq[j]
        V_b = L.barrier_cost(s_ref, u_seq, A, B, ccfg, s_seq)
        plan = L.HorizonPlan(s_ref, u_seq, s_seq, V_b, False, source="backup")
        plan.safe = L.safety_check(plan, ccfg)
        return plan
    x_half = np.array(
        [spec.state_box.support(e) for e in np.eye(spec.state_dim)]
    )
    rates = (ac.beta, ac.gamma, ac.rate_decay, ac.decay_steps, ac.eps_W)
    # aggressive annealed normalized rates while no plant is in the loop
    ac.beta = ac.gamma = 0.5
    ac.rate_decay = cfg.pretrain_decay
    ac.eps_W = 0.0
    for _ in range(cfg.pretrain):
        x = ac.rng.uniform(-1.0, 1.0, spec.state_dim) * cfg.pretrain_scale * x_half
        L.horizon_rollout(ac, model.lift(x), model, ccfg, bundle.basis)
    ac.beta, ac.gamma, ac.rate_decay, ac.decay_steps, ac.eps_W = rates
    ac.last_motion = 0.0


def run_episode(
    bundle: DesignBundle,
    cfg: ExperimentConfig,
    x0: np.ndarray,
    seed: int,
    controller: str | None = None,
    init_weights: tuple[np.ndarray, np.ndarray] | None = None,
) -> EpisodeTrace:
    """Closed loop of the true plant and one controller for N_sim steps with
    seeded disturbances. Deterministic given (bundle, cfg, x0, seed)."""
    controller = controller or cfg.controller
    spec = get_plant(bundle.plant)
    model = bundle.model
    rng_noise = np.random.default_rng(seed)
    trace = EpisodeTrace(seed=seed, controller=controller)
    x = np.asarray(x0, float)

    ccfg = bundle.cfg_mpc if controller == "drmpc" else bundle.cfg_lpc
    ac = None
    prev_plan = None
    prev_mpc = None
    if controller in ("drlpc", "dhp-baseline"):
        rng_w = np.random.default_rng(1_000_003 + seed)
        if init_weights is not None:
            W_c, W_a = init_weights[0].copy(), init_weights[1].copy()
        else:
            W_c, W_a = L.init_weights(bundle.basis, spec.input_dim, rng_w)
        ac = L.ActorCriticState(
            W_c=W_c, W_a=W_a, beta=cfg.beta, gamma=cfg.gamma, eps_W=cfg.eps_W,
            i_bar=cfg.i_bar, rate_decay=cfg.rate_decay,
            rng=np.random.default_rng(7_777 + seed),
        )
        if controller == "dhp-baseline":
            ac.weight_cap = 1e4
        elif init_weights is None:
            pretrain_actor_critic(ac, bundle, cfg)

    for k in range(1, cfg.N_sim + 1):
        s = model.lift(x)
        t0 = time.perf_counter()
        branch = controller
        V_b = 0.0
        safe = True
        try:
            if controller == "drmpc":
                try:
                    s0, useq, V_b = solve_drmpc(model, s, None, ccfg)
                    prev_mpc = (s0, useq)
                except Infeasible:
                    if prev_mpc is None:
                        raise
                    s0_p, useq_p = prev_mpc
                    A, B = model.A, np.atleast_2d(model.B)
                    s0 = A @ s0_p + B @ useq_p[0]
                    tail = (np.atleast_2d(ccfg.K) @ s0).reshape(1, -1)
                    useq = np.vstack([useq_p[1:], tail])
                    prev_mpc = (s0, useq)
                    branch = "backup"
                u, _viol = tube_control(useq[0], ccfg.K, s, s0, spec.input_box)
            elif controller == "drlpc":
                u, prev_plan, diag = L.step_drlpc(
                    ac, s, prev_plan, model, ccfg, bundle.basis, k
                )
                branch, V_b, safe = diag["branch"], diag["V_b"], diag["safe"]
            else:
                u = dhp_baseline_step(ac, s, model, ccfg, bundle.basis)
        except (DivergenceDetected, NoSafePolicy, Infeasible) as exc:
            trace.status = "divergence"
            trace.rows.append(
                dict(k=k, x=x.copy(), u=np.zeros(spec.input_dim), V_b=0.0,
                     branch=type(exc).__name__, safe=False, violation=True,
                     step_time_s=time.perf_counter() - t0)
            )
            break
        dt = time.perf_counter() - t0
        u = np.atleast_1d(np.asarray(u, float)).ravel()[: spec.input_dim]
        violation = not spec.state_box.contains(x) or not spec.input_box.contains(u)
        trace.rows.append(
            dict(k=k, x=x.copy(), u=u.copy(), V_b=float(V_b), branch=branch,
                 safe=bool(safe), violation=bool(violation), step_time_s=dt)
        )
        w_o = sample_disturbance(spec, rng_noise)
        x = step_discrete(spec, x, u[0] if spec.input_dim == 1 else u, w_o)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > 1e3:
            trace.status = "divergence"
            break
    if ac is not None:
        trace.final_weights = {"W_c": ac.W_c.copy(), "W_a": ac.W_a.copy()}
    return trace


def metrics(traces: list, Q: np.ndarray, R: np.ndarray) -> dict:
    """Campaign aggregates. Cost averages exclude diverged trials (which have
    no meaningful running cost); the success rate additionally requires zero
    constraint violations."""
    if not traces:
        raise ValueError("need at least one trace")
    done = [t for t in traces if t.status == "success"]
    ok = [t for t in traces if t.success]
    if done:
        sums = np.array([t.sums(Q, np.atleast_2d(R)) for t in done])
        J, Jx, Ju = (float(v) for v in sums.mean(axis=0))
    else:
        J = Jx = Ju = float("nan")
    step = float(np.mean([t.mean_step_time() for t in traces]))
    return {
        "J": J, "Jx": Jx, "Ju": Ju,
        "success_rate": len(ok) / len(traces),
        "mean_step_time": step,
        "n_traces": len(traces),
    }


def campaign(
    bundle: DesignBundle,
    cfg: ExperimentConfig,
    controller: str | None = None,
    x0: np.ndarray | None = None,
    weights_by_seed: dict | None = None,
) -> tuple[list, dict]:
    controller = controller or cfg.controller
    x0 = np.asarray(cfg.x0 if x0 is None else x0, float)
    Q = np.eye(x0.size) if cfg.Q is None else np.atleast_2d(np.asarray(cfg.Q, float))
    traces = []
    for seed in cfg.seeds:
        iw = weights_by_seed.get(seed) if weights_by_seed else None
        traces.append(run_episode(bundle, cfg, x0, seed, controller, iw))
    return traces, metrics(traces, Q, np.atleast_2d(np.asarray(cfg.R, float)))


def persistent_learning_campaign(
    bundle: DesignBundle, cfg: ExperimentConfig
) -> list[dict]:
    """Sequential runs carrying each seed's converged weights into the next
    run's initialization; returns per-run metric dicts."""
    weights: dict = {}
    out = []
    for run in range(cfg.runs):
        traces, mets = campaign(bundle, cfg, "drlpc", weights_by_seed=weights)
        for t in traces:
            if t.final_weights is not None:
                weights[t.seed] = (t.final_weights["W_c"], t.final_weights["W_a"])
        mets["run"] = run + 1
        out.append(mets)
    return out


def nu_sweep(
    bundle: DesignBundle, cfg: ExperimentConfig, nu_values: list
) -> list[dict]:
    if not nu_values:
        raise ValueError("nu_values must be nonempty")
    rows = []
    saved = bundle.basis
    for nu in nu_values:
        bundle.basis = L.BasisSpec(saved.lifted_dim, nu)
        _, mets = campaign(bundle, cfg, "drlpc")
        rows.append({"nu": nu, **mets})
    bundle.basis = saved
    return rows


def write_trace_csv(trace: EpisodeTrace, path) -> None:
    n = len(trace.rows[0]["x"]) if trace.rows else 0
    m = len(trace.rows[0]["u"]) if trace.rows else 0
    hdr = (
        ["k"]
        + [f"x{i+1}" for i in range(n)]
        + [f"u{i+1}" for i in range(m)]
        + ["V_b", "branch", "safe", "violation", "step_time_s"]
    )
    lines = [",".join(hdr)]
    for r in trace.rows:
        vals = (
            [str(r["k"])]
            + [repr(float(v)) for v in r["x"]]
            + [repr(float(v)) for v in r["u"]]
            + [repr(float(r["V_b"])), r["branch"], str(int(r["safe"])),
               str(int(r["violation"])), repr(float(r["step_time_s"]))]
        )
        lines.append(",".join(vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_metrics_json(mets: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(mets, fh, indent=2, sort_keys=True)
        fh.write("\n")
