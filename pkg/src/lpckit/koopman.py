"""Lifting dictionaries, EDMD ridge regression and statistical residual
validation for the data-driven lifted linear predictor."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CollectionStalled,
    DimensionMismatch,
    InvalidConfidence,
    RankDeficient,
)
from .plants import PlantSpec, sample_disturbance, step_discrete


@dataclass
class LiftingDictionary:
    """Ordered observables mapping the physical state to the lifted space.

    kind "polynomial" stores monomial exponent tuples, "gaussian-kernel"
    stores centers and a width (origin value subtracted so the lift vanishes
    at zero), "identity" is the plain state.
    """

    kind: str
    input_dim: int
    exponents: list[tuple[int, ...]] | None = None
    centers: np.ndarray | None = None
    width: float | None = None

    def __post_init__(self):
        if self.kind == "polynomial":
            if not self.exponents:
                raise ValueError("polynomial dictionary needs exponent tuples")
        elif self.kind == "gaussian-kernel":
            if self.centers is None or self.width is None:
                raise ValueError("gaussian-kernel dictionary needs centers and width")
            self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        elif self.kind != "identity":
            raise ValueError(f"unknown dictionary kind {self.kind!r}")

    @property
    def lifted_dim(self) -> int:
        if self.kind == "identity":
            return self.input_dim
        if self.kind == "polynomial":
            return len(self.exponents)
        return self.centers.shape[0]

    def lift(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.input_dim,):
            raise DimensionMismatch(f"lift input shape {x.shape}")
        if self.kind == "identity":
            return x.copy()
        if self.kind == "polynomial":
            return np.array([np.prod(x**np.array(e)) for e in self.exponents])
        d2 = np.sum((self.centers - x) ** 2, axis=1)
        d0 = np.sum(self.centers**2, axis=1)
        w2 = 2.0 * self.width**2
        return np.exp(-d2 / w2) - np.exp(-d0 / w2)

    def lift_many(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.kind == "identity":
            return X.copy()
        if self.kind == "polynomial":
            cols = [np.prod(X ** np.array(e), axis=1) for e in self.exponents]
            return np.column_stack(cols)
        d2 = ((X[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        d0 = np.sum(self.centers**2, axis=1)
        w2 = 2.0 * self.width**2
        return np.exp(-d2 / w2) - np.exp(-d0 / w2)[None, :]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "exponents": [list(e) for e in self.exponents] if self.exponents else None,
            "centers": self.centers.tolist() if self.centers is not None else None,
            "width": self.width,
        }

    @staticmethod
    def from_dict(d: dict) -> "LiftingDictionary":
        return LiftingDictionary(
            kind=d["kind"],
            input_dim=d["input_dim"],
            exponents=[tuple(e) for e in d["exponents"]] if d["exponents"] else None,
            centers=np.array(d["centers"]) if d["centers"] is not None else None,
            width=d["width"],
        )


def lift(x: np.ndarray, dictionary: LiftingDictionary) -> np.ndarray:
    return dictionary.lift(x)


def identity_dictionary(n: int) -> LiftingDictionary:
    return LiftingDictionary(kind="identity", input_dim=n)


def vdp_dictionary() -> LiftingDictionary:
    """Polynomial lift (x1, x2, x1^2, x1^2 x2) for the Van der Pol plant."""
    return LiftingDictionary(
        kind="polynomial",
        input_dim=2,
        exponents=[(1, 0), (0, 1), (2, 0), (2, 1)],
    )


def gaussian_dictionary(
    half_widths: np.ndarray, n_centers: int, seed: int = 7, include_state: bool = True
) -> LiftingDictionary:
    """Gaussian-kernel lift with seeded centers drawn uniformly over the state
    box; width is the median pairwise center distance and the origin value is
    subtracted from every kernel. With include_state the raw state is
    prepended as the first observables and the kernels fill the remaining
    n_centers - n slots."""
    half_widths = np.asarray(half_widths, dtype=float).ravel()
    n = half_widths.size
    rng = np.random.default_rng(seed)
    n_kernels = n_centers - n if include_state else n_centers
    if n_kernels < 1:
        raise ValueError("n_centers too small")
    centers = rng.uniform(-half_widths, half_widths, size=(n_kernels, n))
    diffs = centers[:, None, :] - centers[None, :, :]
    dists = np.sqrt((diffs**2).sum(axis=2))
    width = float(np.median(dists[np.triu_indices(n_kernels, k=1)])) if n_kernels > 1 else float(
        np.linalg.norm(half_widths)
    )
    if include_state:
        return MixedDictionary(half_widths.size, centers, width)
    return LiftingDictionary(
        kind="gaussian-kernel", input_dim=n, centers=centers, width=width
    )


class MixedDictionary(LiftingDictionary):
    """State observables followed by origin-anchored Gaussian kernels."""

    def __init__(self, n: int, centers: np.ndarray, width: float):
        super().__init__(kind="gaussian-kernel", input_dim=n, centers=centers, width=width)
        self._mixed = True

    @property
    def lifted_dim(self) -> int:
        return self.input_dim + self.centers.shape[0]

    def lift(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.input_dim,):
            raise DimensionMismatch(f"lift input shape {x.shape}")
        return np.concatenate([x, super().lift(x)])

    def lift_many(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.hstack([X, super().lift_many(X)])

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["kind"] = "mixed-gaussian"
        return d


def dictionary_from_dict(d: dict) -> LiftingDictionary:
    if d["kind"] == "mixed-gaussian":
        return MixedDictionary(d["input_dim"], np.array(d["centers"]), d["width"])
    return LiftingDictionary.from_dict(d)


@dataclass
class SnapshotSet:
    """Paired transition records (x, u, w_o, x_plus), constraint-satisfying."""

    X: np.ndarray
    U: np.ndarray
    W: np.ndarray
    Xp: np.ndarray

    @property
    def count(self) -> int:
        return self.X.shape[0]


@dataclass
class LiftedLinearModel:
    """Lifted predictor s+ = A s + B u + D w_o, x = C s."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    dictionary: LiftingDictionary

    def __post_init__(self):
        nbar = self.dictionary.lifted_dim
        if self.A.shape != (nbar, nbar):
            raise DimensionMismatch("A shape inconsistent with dictionary")
        if np.linalg.matrix_rank(self.A) < nbar:
            warnings.warn("fitted A is rank deficient", stacklevel=2)

    def lift(self, x: np.ndarray) -> np.ndarray:
        return self.dictionary.lift(x)

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "D": self.D.tolist(),
            "dictionary": self.dictionary.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "LiftedLinearModel":
        return LiftedLinearModel(
            A=np.array(d["A"]),
            B=np.array(d["B"]),
            C=np.array(d["C"]),
            D=np.array(d["D"]),
            dictionary=dictionary_from_dict(d["dictionary"]),
        )


@dataclass
class ResidualReport:
    empirical_risk: float
    epsilon: float
    confidence: float
    target_risk: float
    passed: bool
    observed_bounds: tuple[float, float]


def fit_edmd(
    data: SnapshotSet,
    dictionary: LiftingDictionary,
    theta: float,
    fit_disturbance: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ridge regression of the one-step lifted transition; returns (A, B, D)."""
    if data.count < 1:
        raise ValueError("need at least one snapshot")
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    Phi = dictionary.lift_many(data.X)
    Phip = dictionary.lift_many(data.Xp)
    blocks = [Phi, np.atleast_2d(data.U.reshape(data.count, -1))]
    if fit_disturbance:
        blocks.append(data.W.reshape(data.count, -1))
    Psi = np.hstack(blocks)
    p = Psi.shape[1]
    gram = Psi.T @ Psi + theta * np.eye(p)
    if theta == 0.0 and np.linalg.matrix_rank(gram) < p:
        raise RankDeficient("Gram matrix singular; use theta > 0")
    K = np.linalg.solve(gram, Psi.T @ Phip).T
    nbar = dictionary.lifted_dim
    m = data.U.reshape(data.count, -1).shape[1]
    A = K[:, :nbar]
    B = K[:, nbar : nbar + m]
    if fit_disturbance:
        D = K[:, nbar + m :]
    else:
        D = np.zeros((nbar, data.W.reshape(data.count, -1).shape[1]))
    return A, B, D


def fit_output_map(data: SnapshotSet, dictionary: LiftingDictionary) -> np.ndarray:
    """Least-squares map from lifted to physical state (minimum norm)."""
    Phi = dictionary.lift_many(data.X)
    Ct, *_ = np.linalg.lstsq(Phi, data.X, rcond=None)
    return Ct.T


def fit_model(
    data: SnapshotSet,
    dictionary: LiftingDictionary,
    theta: float,
    fit_disturbance: bool = True,
) -> LiftedLinearModel:
    A, B, D = fit_edmd(data, dictionary, theta, fit_disturbance)
    C = fit_output_map(data, dictionary)
    return LiftedLinearModel(A=A, B=B, C=C, D=D, dictionary=dictionary)


def collect_snapshots(
    spec: PlantSpec, M: int, rng: np.random.Generator
) -> SnapshotSet:
    """Random-restart, random-policy transition records; records leaving the
    state box are discarded and resampled."""
    n, m, nw = spec.state_dim, spec.input_dim, spec.disturbance_dim
    X = np.empty((M, n))
    U = np.empty((M, m))
    W = np.empty((M, nw))
    Xp = np.empty((M, n))
    x_half = spec.state_box.offsets[:n]
    u_half = spec.input_box.offsets[:m]
    got = 0
    attempts = 0
    budget = max(100 * M, 1000)
    while got < M:
        if attempts >= budget and got < 0.01 * attempts:
            raise CollectionStalled("snapshot rejection rate above 99%")
        attempts += 1
        x = rng.uniform(-x_half, x_half)
        u = rng.uniform(-u_half, u_half)
        w = sample_disturbance(spec, rng)
        xp = step_discrete(spec, x, u[0] if m == 1 else u, w)
        if not spec.state_box.contains(xp):
            continue
        X[got], U[got], W[got], Xp[got] = x, u, w, xp
        got += 1
    return SnapshotSet(X=X, U=U, W=W, Xp=Xp)


def model_residuals(
    model: LiftedLinearModel, data: SnapshotSet
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample lifted transition residuals w and output residuals v."""
    Phi = model.dictionary.lift_many(data.X)
    Phip = model.dictionary.lift_many(data.Xp)
    U = data.U.reshape(data.count, -1)
    Wo = data.W.reshape(data.count, -1)
    w = Phip - Phi @ model.A.T - U @ model.B.T - Wo @ model.D.T
    v = data.X - Phi @ model.C.T
    return w, v


def hoeffding_epsilon(M: int, delta_r: float) -> float:
    if not 0.0 < delta_r < 2.0:
        raise InvalidConfidence("delta_r must lie in (0, 2)")
    return math.sqrt(-math.log(0.5 * delta_r) / (2.0 * M))


def validate_residual_bounds(
    model: LiftedLinearModel,
    data: SnapshotSet,
    rho_w: float,
    rho_v: float,
    delta_r: float,
    target_risk: float,
) -> ResidualReport:
    """Hoeffding certification that the residual bounds hold with risk below
    target_risk at confidence 1 - delta_r."""
    if data.count < 1:
        raise ValueError("validation data must be nonempty")
    w, v = model_residuals(model, data)
    wn = np.linalg.norm(w, axis=1)
    vn = np.linalg.norm(v, axis=1)
    losses = ~((wn <= rho_w) & (vn <= rho_v))
    emp = float(np.mean(losses))
    eps = hoeffding_epsilon(data.count, delta_r)
    return ResidualReport(
        empirical_risk=emp,
        epsilon=eps,
        confidence=1.0 - delta_r,
        target_risk=target_risk,
        passed=target_risk >= emp + eps,
        observed_bounds=(float(np.max(wn)), float(np.max(vn))),
    )
