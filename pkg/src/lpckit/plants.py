"""Benchmark plants: continuous-time vector fields, RK4 discretization and
bounded disturbance sampling.

All functions are pure; randomness enters only through explicit numpy
generators so that closed-loop runs are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionMismatch
from .geometry import Polytope, box

PENDULUM_ROD_LENGTH = 0.5
GRAVITY = 9.8


def vdp_derivative(x: np.ndarray, u: float) -> np.ndarray:
    """Controlled Van der Pol oscillator, (1 - x1^2) x2 damping form. The
    origin of the unforced system is unstable (limit cycle); the controller
    must stabilize it."""
    x = np.asarray(x, dtype=float)
    u = float(np.asarray(u).reshape(()))
    return np.array([x[1], (1.0 - x[0] ** 2) * x[1] - x[0] + u])


def pendulum_derivative(x: np.ndarray, u: float) -> np.ndarray:
    """Inverted pendulum on a cart: rod angle/rate, cart position/speed."""
    x = np.asarray(x, dtype=float)
    u = float(np.asarray(u).reshape(()))
    ang = (3.0 / (2.0 * PENDULUM_ROD_LENGTH)) * (
        GRAVITY * np.sin(x[0]) + u * np.cos(x[0])
    )
    return np.array([x[1], ang, x[3], u])


def linear_test_derivative(x: np.ndarray, u: float) -> np.ndarray:
    """Scalar self-test plant dx/dt = -x + u with known matrix exponential."""
    x = np.asarray(x, dtype=float)
    u = float(np.asarray(u).reshape(()))
    return -x + u


@dataclass(frozen=True)
class PlantSpec:
    """Ground-truth plant description used for simulation and data collection."""

    name: str
    state_dim: int
    input_dim: int
    derivative: Callable[[np.ndarray, float], np.ndarray]
    sample_period: float
    disturbance_bound: float
    state_box: Polytope
    input_box: Polytope
    disturbance_dim: int = field(default=0)

    def __post_init__(self):
        if self.sample_period <= 0:
            raise ValueError("sample_period must be positive")
        if self.disturbance_bound < 0:
            raise ValueError("disturbance_bound must be nonnegative")
        if self.disturbance_dim == 0:
            object.__setattr__(self, "disturbance_dim", self.state_dim)


def step_discrete(
    spec: PlantSpec, x: np.ndarray, u: float, w_o: np.ndarray
) -> np.ndarray:
    """One RK4 step of the plant vector field over the sample period with
    zero-order-hold input, followed by the additive disturbance T * w_o."""
    x = np.asarray(x, dtype=float)
    w_o = np.asarray(w_o, dtype=float)
    if x.shape != (spec.state_dim,):
        raise DimensionMismatch(f"state shape {x.shape}, expected ({spec.state_dim},)")
    if w_o.shape != (spec.disturbance_dim,):
        raise DimensionMismatch(
            f"disturbance shape {w_o.shape}, expected ({spec.disturbance_dim},)"
        )
    T = spec.sample_period
    f = spec.derivative
    k1 = f(x, u)
    k2 = f(x + 0.5 * T * k1, u)
    k3 = f(x + 0.5 * T * k2, u)
    k4 = f(x + T * k3, u)
    return x + (T / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4) + T * w_o


def sample_disturbance(spec: PlantSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw on the infinity-norm ball of radius disturbance_bound."""
    rho = spec.disturbance_bound
    if rho == 0.0:
        return np.zeros(spec.disturbance_dim)
    return rng.uniform(-rho, rho, size=spec.disturbance_dim)


def vdp_spec() -> PlantSpec:
    return PlantSpec(
        name="vdp",
        state_dim=2,
        input_dim=1,
        derivative=vdp_derivative,
        sample_period=0.025,
        disturbance_bound=0.08,
        state_box=box(np.array([2.5, 2.5])),
        input_box=box(np.array([10.0])),
    )


def pendulum_spec() -> PlantSpec:
    return PlantSpec(
        name="pendulum",
        state_dim=4,
        input_dim=1,
        derivative=pendulum_derivative,
        sample_period=0.01,
        disturbance_bound=0.5,
        state_box=box(np.array([0.25, 2.0, 1.0, 2.0])),
        input_box=box(np.array([10.0])),
    )


def linear_test_spec(disturbance_bound: float = 0.0) -> PlantSpec:
    return PlantSpec(
        name="linear-test",
        state_dim=1,
        input_dim=1,
        derivative=linear_test_derivative,
        sample_period=0.025,
        disturbance_bound=disturbance_bound,
        state_box=box(np.array([2.0])),
        input_box=box(np.array([2.0])),
    )


_PLANTS = {
    "vdp": vdp_spec,
    "pendulum": pendulum_spec,
    "linear-test": linear_test_spec,
}


def get_plant(name: str) -> PlantSpec:
    try:
        return _PLANTS[name]()
    except KeyError:
        raise ValueError(f"unknown plant {name!r}; choices: {sorted(_PLANTS)}")
