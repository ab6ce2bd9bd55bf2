"""Polytope and ellipsoid arithmetic on a fixed direction template.

All outer approximations use support functions evaluated on a template of
directions (axis directions plus seeded random ones), which keeps every set
operation conservative, deterministic and cheap. Exact vertex enumeration is
deliberately out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_lyapunov
from scipy.optimize import linprog

from .errors import (
    Degenerate,
    DimensionMismatch,
    EmptyFeasibleSet,
    NoConvergence,
    NotSchur,
    SingularMap,
)

TEMPLATE_SEED = 20260824


@dataclass
class Polytope:
    """H-representation {z : normals @ z <= offsets}."""

    normals: np.ndarray
    offsets: np.ndarray
    empty: bool = False

    def __post_init__(self):
        self.normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
        self.offsets = np.asarray(self.offsets, dtype=float).ravel()
        if self.normals.shape[0] != self.offsets.shape[0]:
            raise DimensionMismatch("normals/offsets row count mismatch")

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    def contains(self, z: np.ndarray, tol: float = 1e-9) -> bool:
        if self.empty:
            return False
        z = np.asarray(z, dtype=float)
        return bool(np.all(self.normals @ z <= self.offsets + tol))

    def support(self, d: np.ndarray) -> float:
        """max d'z over the polytope (LP); +inf if unbounded in direction d."""
        if self.empty:
            return -np.inf
        d = np.asarray(d, dtype=float)
        res = linprog(
            -d,
            A_ub=self.normals,
            b_ub=self.offsets,
            bounds=[(None, None)] * self.dim,
            method="highs",
        )
        if res.status == 3:
            return np.inf
        if res.status == 2:
            self.empty = True
            return -np.inf
        if not res.success:
            raise NoConvergence(f"support LP failed: {res.message}")
        return float(-res.fun)

    def support_many(self, dirs: np.ndarray) -> np.ndarray:
        return np.array([self.support(d) for d in dirs])

    def intersect(self, other: "Polytope") -> "Polytope":
        if self.dim != other.dim:
            raise DimensionMismatch("intersection dimension mismatch")
        return Polytope(
            np.vstack([self.normals, other.normals]),
            np.concatenate([self.offsets, other.offsets]),
            empty=self.empty or other.empty,
        )

    def check_nonempty(self, tol: float = 1e-10) -> bool:
        """Feasibility via a max-margin LP: max t s.t. Az + t <= b."""
        if self.empty:
            return False
        p, d = self.normals.shape
        res = linprog(
            np.concatenate([np.zeros(d), [-1.0]]),
            A_ub=np.hstack([self.normals, np.ones((p, 1))]),
            b_ub=self.offsets,
            bounds=[(None, None)] * d + [(None, None)],
            method="highs",
        )
        if not res.success:
            self.empty = True
            return False
        if -res.fun < -tol:
            self.empty = True
            return False
        return True

    def scale(self, factor: float) -> "Polytope":
        return Polytope(self.normals.copy(), self.offsets * factor, self.empty)

    def to_dict(self) -> dict:
        return {
            "type": "polytope",
            "normals": self.normals.tolist(),
            "offsets": self.offsets.tolist(),
            "empty": self.empty,
        }

    @staticmethod
    def from_dict(d: dict) -> "Polytope":
        return Polytope(np.array(d["normals"]), np.array(d["offsets"]), d["empty"])


@dataclass
class Ellipsoid:
    """{z : z' shape z <= level} with shape symmetric positive definite."""

    shape: np.ndarray
    level: float = 1.0

    def __post_init__(self):
        self.shape = np.asarray(self.shape, dtype=float)
        if not np.allclose(self.shape, self.shape.T, atol=1e-12):
            raise ValueError("ellipsoid shape matrix must be symmetric")
        if np.min(np.linalg.eigvalsh(self.shape)) <= 0:
            raise ValueError("ellipsoid shape matrix must be positive definite")
        self.level = float(self.level)
        if self.level <= 0:
            raise ValueError("ellipsoid level must be positive")

    @property
    def dim(self) -> int:
        return self.shape.shape[0]

    def quad(self, z: np.ndarray) -> float:
        z = np.asarray(z, dtype=float)
        return float(z @ self.shape @ z)

    def contains(self, z: np.ndarray, tol: float = 1e-9) -> bool:
        return self.quad(z) <= self.level + tol

    def support(self, d: np.ndarray) -> float:
        d = np.asarray(d, dtype=float)
        val = d @ np.linalg.solve(self.shape, d)
        return float(np.sqrt(max(self.level * val, 0.0)))

    def normalized(self) -> "Ellipsoid":
        """Same set with level rescaled to 1."""
        return Ellipsoid(self.shape / self.level, 1.0)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform draw from the ellipsoid volume."""
        y = rng.standard_normal(self.dim)
        y /= np.linalg.norm(y)
        y *= rng.uniform() ** (1.0 / self.dim)
        L = np.linalg.cholesky(self.shape)
        return np.sqrt(self.level) * np.linalg.solve(L.T, y)

    def to_dict(self) -> dict:
        return {"type": "ellipsoid", "shape": self.shape.tolist(), "level": self.level}

    @staticmethod
    def from_dict(d: dict) -> "Ellipsoid":
        return Ellipsoid(np.array(d["shape"]), d["level"])


def set_from_dict(d: dict):
    if d["type"] == "polytope":
        return Polytope.from_dict(d)
    if d["type"] == "ellipsoid":
        return Ellipsoid.from_dict(d)
    raise ValueError(f"unknown set type {d['type']!r}")


def box(half_widths: np.ndarray) -> Polytope:
    """Symmetric axis-aligned box |z_i| <= half_widths[i]."""
    h = np.asarray(half_widths, dtype=float).ravel()
    n = h.size
    eye = np.eye(n)
    return Polytope(np.vstack([eye, -eye]), np.concatenate([h, h]))


def direction_template(dim: int, seed: int = TEMPLATE_SEED) -> np.ndarray:
    """2*dim axis directions plus 4*dim seeded random unit directions."""
    eye = np.eye(dim)
    dirs = [eye, -eye]
    if dim > 1:
        rng = np.random.default_rng(seed + dim)
        rand = rng.standard_normal((4 * dim, dim))
        rand /= np.linalg.norm(rand, axis=1, keepdims=True)
        dirs.append(rand)
    return np.vstack(dirs)


class SupportSet:
    """Convex set given only by a closed-form support function; lets set
    recursions avoid linear programs when exact supports are known."""

    def __init__(self, dim: int, support_fn):
        self._dim = dim
        self._fn = support_fn

    @property
    def dim(self) -> int:
        return self._dim

    def support(self, d: np.ndarray) -> float:
        return float(self._fn(np.asarray(d, dtype=float)))


class BallProductSet:
    """Image under V of a product of per-block Euclidean balls; the natural
    invariant-set shape for a map that is block rotation-contraction in the
    coordinates y = V^-1 z."""

    def __init__(self, V: np.ndarray, blocks: list, radii: np.ndarray):
        self.V = np.asarray(V, dtype=float)
        self.Vinv = np.linalg.inv(self.V)
        self.blocks = [list(b) for b in blocks]
        self.radii = np.asarray(radii, dtype=float)

    @property
    def dim(self) -> int:
        return self.V.shape[0]

    def support(self, d: np.ndarray) -> float:
        g = self.V.T @ np.asarray(d, dtype=float)
        return float(
            sum(r * np.linalg.norm(g[b]) for b, r in zip(self.blocks, self.radii))
        )

    def contains(self, z: np.ndarray, tol: float = 1e-9) -> bool:
        y = self.Vinv @ np.asarray(z, dtype=float)
        return all(
            np.linalg.norm(y[b]) <= r + tol for b, r in zip(self.blocks, self.radii)
        )

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        y = np.zeros(self.dim)
        for b, r in zip(self.blocks, self.radii):
            g = rng.standard_normal(len(b))
            nrm = np.linalg.norm(g)
            if nrm > 0:
                y[b] = g / nrm * r * rng.uniform() ** (1.0 / len(b))
        return self.V @ y

    def inner_polytope(self, n_facets: int = 16) -> Polytope:
        """Inscribed polytope (per-block regular polygon for 2-d blocks)."""
        rows, offs = [], []
        for b, r in zip(self.blocks, self.radii):
            if len(b) == 1:
                for sgn in (1.0, -1.0):
                    rows.append(sgn * self.Vinv[b[0]])
                    offs.append(r)
            else:
                shrink = np.cos(np.pi / n_facets)
                for k in range(n_facets):
                    phi = 2.0 * np.pi * k / n_facets
                    rows.append(
                        np.cos(phi) * self.Vinv[b[0]] + np.sin(phi) * self.Vinv[b[1]]
                    )
                    offs.append(r * shrink)
        return Polytope(np.array(rows), np.array(offs))


def _real_block_form(F: np.ndarray):
    """Columns V and block index lists putting F in real block-diagonal form."""
    n = F.shape[0]
    evals, evecs = np.linalg.eig(F)
    used = np.zeros(n, dtype=bool)
    cols, blocks, moduli = [], [], []
    i = 0
    for k in range(n):
        if used[k]:
            continue
        lam, v = evals[k], evecs[:, k]
        used[k] = True
        if abs(lam.imag) < 1e-10:
            cols.append(np.real(v))
            blocks.append([i])
            moduli.append(abs(lam))
            i += 1
        else:
            cols.append(np.real(v))
            cols.append(np.imag(v))
            blocks.append([i, i + 1])
            moduli.append(abs(lam))
            for kk in range(k + 1, n):
                if not used[kk] and np.isclose(evals[kk], np.conj(lam)):
                    used[kk] = True
                    break
            i += 2
    V = np.column_stack(cols)
    if np.linalg.cond(V) > 1e10:
        raise Degenerate("eigenbasis too ill-conditioned for a ball-product tube")
    return V, blocks, np.array(moduli)


def invariant_ball_tube(
    F: np.ndarray, D_set, margin: float = 1e-9, n_angles: int = 64
) -> BallProductSet:
    """Robust invariant set of e+ = F e + d as a product of balls in the real
    eigen-block coordinates of F; radii solve r_i = (d_i + c*R)/(1-|lam_i|)
    with d_i the per-block disturbance radius and c the (tiny) off-block
    coupling left by the numerical eigenbasis."""
    F = np.asarray(F, dtype=float)
    if np.max(np.abs(np.linalg.eigvals(F))) >= 1.0:
        raise NotSchur("invariant tube requires a Schur matrix")
    V, blocks, moduli = _real_block_form(F)
    Vinv = np.linalg.inv(V)
    # per-block disturbance radius: max support of V^-1 D over the block circle
    d_rad = []
    inflate = 1.0 / np.cos(np.pi / n_angles)
    for b in blocks:
        rows = Vinv[b]
        if len(b) == 1:
            d_rad.append(max(D_set.support(rows[0]), D_set.support(-rows[0])))
        else:
            best = 0.0
            for k in range(n_angles):
                phi = 2.0 * np.pi * k / n_angles
                best = max(
                    best,
                    D_set.support(np.cos(phi) * rows[0] + np.sin(phi) * rows[1]),
                )
            d_rad.append(best * inflate)
    d_rad = np.array(d_rad)
    # off-block coupling of the numerically block-diagonalized map
    G = Vinv @ F @ V
    E = G.copy()
    for b in blocks:
        E[np.ix_(b, b)] = 0.0
    c = np.linalg.norm(E, 2)
    radii = d_rad / (1.0 - moduli)
    for _ in range(100):
        total = float(np.linalg.norm(radii))
        new = (d_rad + c * total + margin) / (1.0 - moduli)
        if np.max(np.abs(new - radii)) < 1e-12:
            radii = new
            break
        radii = new
    return BallProductSet(V, blocks, radii)


def support_of(S, d: np.ndarray) -> float:
    return S.support(d)


def template_outer(S, template: np.ndarray) -> Polytope:
    """Outer polytopic approximation of any supported set on the template."""
    offs = np.array([S.support(d) for d in template])
    return Polytope(template.copy(), offs)


def minkowski_sum(P, Q, template: np.ndarray | None = None) -> Polytope:
    """Outer approximation of P + Q via support-function addition."""
    if P.dim != Q.dim:
        raise DimensionMismatch("minkowski_sum dimension mismatch")
    rows = []
    if isinstance(P, Polytope):
        rows.append(P.normals)
    if isinstance(Q, Polytope):
        rows.append(Q.normals)
    if template is None:
        template = direction_template(P.dim)
    rows.append(template)
    normals = np.unique(np.round(np.vstack(rows), 12), axis=0)
    offs = np.array([P.support(d) + Q.support(d) for d in normals])
    return Polytope(normals, offs)


def pontryagin_diff(P: Polytope, Q) -> Polytope:
    """P erode Q: same normals, offsets reduced by the support of Q."""
    if P.dim != Q.dim:
        raise DimensionMismatch("pontryagin_diff dimension mismatch")
    offs = P.offsets - np.array([Q.support(a) for a in P.normals])
    out = Polytope(P.normals.copy(), offs)
    out.check_nonempty()
    return out


def linear_image(M: np.ndarray, S, template: np.ndarray | None = None):
    """Image M*S. Exact for ellipsoids under invertible maps, outer template
    approximation for polytopes (or singular maps)."""
    M = np.asarray(M, dtype=float)
    if M.shape[1] != S.dim:
        raise DimensionMismatch("linear_image dimension mismatch")
    if isinstance(S, Ellipsoid):
        if M.shape[0] != M.shape[1] or abs(np.linalg.det(M)) < 1e-12:
            raise SingularMap("ellipsoid image requires an invertible map")
        Minv = np.linalg.inv(M)
        shape = Minv.T @ S.shape @ Minv
        return Ellipsoid(0.5 * (shape + shape.T), S.level)
    if template is None:
        template = direction_template(M.shape[0])
    offs = np.array([S.support(M.T @ d) for d in template])
    return Polytope(template.copy(), offs)


def linear_preimage(A: np.ndarray, S: Polytope) -> Polytope:
    """{x : A x in S}; requires A invertible so the result stays bounded."""
    A = np.asarray(A, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[0] != S.dim:
        raise SingularMap("preimage requires a square map matching the set")
    if abs(np.linalg.det(A)) < 1e-12:
        raise SingularMap("preimage map is singular")
    return Polytope(S.normals @ A, S.offsets.copy(), S.empty)


def _invariance_holds(Z: Polytope, F: np.ndarray, D_set, tol: float = 1e-10) -> bool:
    for d in Z.normals:
        lhs = Z.support(F.T @ d) + D_set.support(d)
        if lhs > Z.support(d) + tol:
            return False
    return True


def robust_invariant_set(
    F: np.ndarray,
    D_set,
    eps: float = 1e-6,
    max_iter: int = 20000,
    template: np.ndarray | None = None,
) -> Polytope:
    """Outer approximation of the minimal robust invariant set of
    e+ = F e + d, d in D_set, guaranteed invariant after inflation.

    The support of the infinite Minkowski series sum_j F^j D is accumulated
    per template direction until the per-term contribution drops below eps,
    then inflated by the geometric tail estimate and certified by the exact
    invariance inclusion (further 2% inflations if needed)."""
    F = np.asarray(F, dtype=float)
    rho_F = np.max(np.abs(np.linalg.eigvals(F)))
    if rho_F >= 1.0:
        raise NotSchur(f"spectral radius {rho_F:.4f} >= 1")
    if template is None:
        template = direction_template(F.shape[0])
    offs = np.array([D_set.support(d) for d in template])
    Mj = F.copy()
    add_max = np.inf
    prev_max = None
    for _ in range(max_iter):
        add = np.array([D_set.support(Mj.T @ d) for d in template])
        offs = offs + add
        Mj = Mj @ F
        prev_max, add_max = add_max, float(np.max(add))
        if add_max < eps:
            break
    else:
        raise NoConvergence("robust invariant set series did not settle")
    # geometric tail bound from the observed decay ratio
    q = 0.5 if not np.isfinite(prev_max) or prev_max <= 0 else add_max / prev_max
    q = min(max(q, 0.0), 0.999)
    Z = Polytope(template.copy(), offs + add_max * q / (1.0 - q) + eps)
    for _ in range(60):
        if _invariance_holds(Z, F, D_set):
            return Z
        Z = Polytope(template.copy(), Z.offsets * 1.02 + 1e-12)
    raise NoConvergence("could not certify invariance by inflation")


def terminal_set(
    F: np.ndarray,
    tightened_state: Polytope,
    tightened_input: Polytope,
    K: np.ndarray,
    varrho: float = 1.0,
) -> Ellipsoid:
    """Invariant terminal ellipsoid from the Lyapunov relation Z = F'ZF + I,
    scaled to fit inside the tightened state and input sets."""
    F = np.asarray(F, dtype=float)
    if np.max(np.abs(np.linalg.eigvals(F))) >= 1.0:
        raise NotSchur("terminal set requires a Schur closed-loop matrix")
    if not 0.0 < varrho <= 1.0:
        raise ValueError("varrho must lie in (0, 1]")
    n = F.shape[0]
    Zbar = solve_discrete_lyapunov(F.T, np.eye(n))
    Zbar = 0.5 * (Zbar + Zbar.T)
    Zinv = np.linalg.inv(Zbar)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    level = np.inf
    for a, b in zip(tightened_state.normals, tightened_state.offsets):
        q = float(a @ Zinv @ a)
        if q > 1e-14:
            level = min(level, b * b / q)
        elif b < 0:
            raise Degenerate("tightened state set excludes the origin")
    for a, b in zip(tightened_input.normals, tightened_input.offsets):
        d = K.T @ a
        q = float(d @ Zinv @ d)
        if q > 1e-14:
            level = min(level, b * b / q)
        elif b < 0:
            raise Degenerate("tightened input set excludes the origin")
    if not np.isfinite(level) or level <= 0:
        raise Degenerate("no positive terminal level fits the tightened sets")
    return Ellipsoid(Zbar, varrho * level)


def bounding_ellipsoid(P: Polytope) -> Ellipsoid:
    """Outer ellipsoid of a polytope via its axis-aligned bounding box,
    normalized to level 1."""
    n = P.dim
    radii = np.empty(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        radii[i] = max(P.support(e), P.support(-e))
    radii = np.maximum(radii, 1e-12)
    shape = np.diag(1.0 / (n * radii**2))
    return Ellipsoid(shape, 1.0)


def inflate_ellipsoid(
    E: Ellipsoid, margin: float = 2.0, floor_ratio: float = 0.1
) -> Ellipsoid:
    """Outer ellipsoid with every semi-axis scaled by `margin` and floored at
    `floor_ratio` times the longest axis; keeps bound sets used as soft
    regularizers well conditioned."""
    vals, vecs = np.linalg.eigh(E.shape / E.level)
    radii = margin / np.sqrt(np.maximum(vals, 1e-30))
    radii = np.maximum(radii, floor_ratio * radii.max())
    shape = vecs @ np.diag(1.0 / radii**2) @ vecs.T
    return Ellipsoid(0.5 * (shape + shape.T), 1.0)


def feasible_and_costate_sets(
    A: np.ndarray,
    B: np.ndarray,
    S: Polytope,
    U_hat: Polytope,
    S_f: Ellipsoid,
    P: np.ndarray,
    Q_bar: np.ndarray,
    N: int,
    template: np.ndarray | None = None,
) -> tuple[list, list]:
    """Backward recursion for the per-stage feasible sets S^j and costate
    bound ellipsoids Lambda^j, j = 1..N (index 0 left unused)."""
    A = np.asarray(A, dtype=float)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n = A.shape[0]
    if abs(np.linalg.det(A)) < 1e-12:
        raise SingularMap("feasible-set recursion requires full-rank A")
    if template is None:
        template = direction_template(n)

    S_list: list = [None] * (N + 1)
    S_list[N] = template_outer(S_f, template)
    for j in range(N - 1, 0, -1):
        # outer template of S^{j+1} + B*(-U_hat), then preimage under A
        offs = np.array(
            [S_list[j + 1].support(d) + U_hat.support(-(B.T @ d)) for d in template]
        )
        pre = Polytope(template @ A, offs)
        S_list[j] = pre.intersect(S)
        if not S_list[j].check_nonempty():
            raise EmptyFeasibleSet(f"feasible set S^{j} is empty")

    lam_list: list = [None] * (N + 1)
    lam_list[N] = linear_image(2.0 * np.asarray(P, dtype=float), S_f).normalized()
    Q2 = 2.0 * np.asarray(Q_bar, dtype=float)
    for j in range(N - 1, 0, -1):
        offs = np.array(
            [S_list[j].support(Q2.T @ d) + lam_list[j + 1].support(A @ d) for d in template]
        )
        lam_list[j] = bounding_ellipsoid(Polytope(template.copy(), offs))
    return S_list, lam_list
