"""Scalar conservation laws, the Rusanov flux and the benchmark problems."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError

__all__ = [
    "ConservationLaw",
    "LinearAdvection",
    "Burgers",
    "ProblemSetup",
    "flux",
    "rusanov",
    "interface_flux",
    "bump_ic",
    "get_problem",
    "PROBLEMS",
]


class ConservationLaw:
    """Scalar law ``q_t + div F(q) = 0`` in ``dim`` space dimensions.

    Subclasses provide :meth:`flux_component` and :meth:`jacobian_component`,
    both vectorized over arbitrary arrays of states.
    """

    tag: str = "law"
    linear: bool = False

    def __init__(self, dim: int):
        self.dim = int(dim)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(tag={self.tag!r})"

    def flux_component(self, q, axis: int) -> np.ndarray:
        raise NotImplementedError

    def jacobian_component(self, q, axis: int) -> np.ndarray:
        raise NotImplementedError

    def flux(self, q) -> np.ndarray:
        """F(q) with the axis index last."""
        q = np.asarray(q, dtype=float)
        return np.stack([self.flux_component(q, a) for a in range(self.dim)], axis=-1)

    def flux_jacobian(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return np.stack([self.jacobian_component(q, a) for a in range(self.dim)], axis=-1)

    def wave_speed(self, q, axis: int) -> np.ndarray:
        return np.abs(self.jacobian_component(np.asarray(q, dtype=float), axis))

    def max_speed(self, q) -> float:
        """Largest directional wave speed over the given states and all axes."""
        q = np.asarray(q, dtype=float)
        return float(max(np.max(self.wave_speed(q, a)) for a in range(self.dim)))


class LinearAdvection(ConservationLaw):
    linear = True

    def __init__(self, velocity):
        velocity = tuple(float(v) for v in np.atleast_1d(velocity))
        super().__init__(len(velocity))
        self.velocity = velocity
        self.tag = f"advection{self.dim}d"

    def flux_component(self, q, axis):
        return self.velocity[axis] * np.asarray(q, dtype=float)

    def jacobian_component(self, q, axis):
        return np.full(np.shape(q), self.velocity[axis])


class Burgers(ConservationLaw):
    """Multi-dimensional Burgers' law with F_a(q) = q^2 / 2 on every axis."""

    def __init__(self, dim: int = 2):
        super().__init__(dim)
        self.tag = f"burgers{self.dim}d"

    def flux_component(self, q, axis):
        q = np.asarray(q, dtype=float)
        return 0.5 * q * q

    def jacobian_component(self, q, axis):
        return np.array(q, dtype=float, copy=True)


def flux(law: ConservationLaw, q) -> np.ndarray:
    return law.flux(q)


def interface_flux(law: ConservationLaw, q_left, q_right, axis: int, lam) -> np.ndarray:
    """Rusanov flux through a face whose normal is +e_axis, left state interior."""
    fl = law.flux_component(q_left, axis)
    fr = law.flux_component(q_right, axis)
    return 0.5 * (fl + fr) - 0.5 * lam * (np.asarray(q_right) - np.asarray(q_left))


def rusanov(law: ConservationLaw, q_plus, q_minus, axis: int, sign: int, lam) -> np.ndarray:
    """Rusanov flux F(q-, q+; n) . n for the normal ``sign * e_axis``.

    ``q_minus`` is the interior trace, ``q_plus`` the exterior one.
    """
    if sign not in (-1, 1):
        raise ValueError("sign must be +1 or -1")
    fm = law.flux_component(q_minus, axis)
    fp = law.flux_component(q_plus, axis)
    return 0.5 * sign * (fp + fm) - 0.5 * lam * (np.asarray(q_plus) - np.asarray(q_minus))


def bump_ic(x, center, radius: float) -> np.ndarray:
    """Compactly supported C-infinity bump exp(1/(r^2 - w^2)) inside radius ``w``.

    ``x`` has the coordinate axis last.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    x = np.asarray(x, dtype=float)
    r2 = np.sum((x - np.asarray(center, dtype=float)) ** 2, axis=-1)
    out = np.zeros(r2.shape)
    inside = r2 < radius * radius
    out[inside] = np.exp(1.0 / (r2[inside] - radius * radius))
    return out


@dataclass
class ProblemSetup:
    """Law plus initial data, final time and (optionally) an exact solution."""

    name: str
    law: ConservationLaw
    initial: Callable[[np.ndarray], np.ndarray]
    final_time: float
    lower: tuple
    upper: tuple
    exact: Optional[Callable[[float, np.ndarray], np.ndarray]] = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.law.dim


def _shifted(initial, velocity, lower, upper):
    lo = np.asarray(lower, dtype=float)
    ext = np.asarray(upper, dtype=float) - lo
    vel = np.asarray(velocity, dtype=float)

    def exact(t, x):
        y = np.asarray(x, dtype=float) - vel * t
        return initial(lo + np.mod(y - lo, ext))

    return exact


def _advection(dim: int, final_time: float) -> ProblemSetup:
    center = (0.5,) * dim
    radius = 1.0 / 3.0

    def initial(x):
        return bump_ic(x, center, radius)

    vel = (1.0,) * dim
    lower, upper = (0.0,) * dim, (1.0,) * dim
    return ProblemSetup(
        f"adv{dim}d", LinearAdvection(vel), initial, final_time, lower, upper,
        _shifted(initial, vel, lower, upper),
    )


def _burgers2d(final_time: float) -> ProblemSetup:
    def initial(x):
        x = np.asarray(x, dtype=float)
        return 0.25 * (1.0 - np.cos(2 * np.pi * x[..., 0])) * (1.0 - np.cos(2 * np.pi * x[..., 1]))

    return ProblemSetup("burgers2d", Burgers(2), initial, final_time, (0.0, 0.0), (1.0, 1.0))


PROBLEMS = {
    "adv1d": lambda T: _advection(1, T),
    "adv2d": lambda T: _advection(2, T),
    "adv3d": lambda T: _advection(3, T),
    "burgers2d": _burgers2d,
}

DEFAULT_FINAL_TIME = {"adv1d": 1.0, "adv2d": 1.0, "adv3d": 1.0, "burgers2d": 0.1}


def get_problem(name: str, final_time: float | None = None) -> ProblemSetup:
    if name not in PROBLEMS:
        raise ConfigError("problem", f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}")
    T = DEFAULT_FINAL_TIME[name] if final_time is None else float(final_time)
    if not T > 0:
        raise ConfigError("final_time", f"must be positive, got {final_time}")
    return PROBLEMS[name](T)
