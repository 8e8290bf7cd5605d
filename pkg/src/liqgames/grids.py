"""Uniform time grids and quadrature helpers.

Every solver in the package discretizes on a uniform partition of [0, T].
Time-dependent coefficients are supplied as callables (or scalars, which are
promoted); integrals accumulate with the midpoint rule on the grid cells,
which is exact for piecewise-constant coefficients.
"""

from dataclasses import dataclass, field

import numpy as np

from ._errors import ParameterError

DEFAULT_STEPS = 2000


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, horizon] with ``steps`` cells."""

    horizon: float
    steps: int = DEFAULT_STEPS
    nodes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.horizon <= 0:
            raise ParameterError(f"horizon must be positive, got {self.horizon}")
        if self.steps < 1:
            raise ParameterError(f"grid needs at least one step, got {self.steps}")
        object.__setattr__(self, "nodes", np.linspace(0.0, self.horizon, self.steps + 1))

    @property
    def dt(self):
        return self.horizon / self.steps

    @property
    def mids(self):
        """Cell midpoints, shape (steps,)."""
        return self.nodes[:-1] + 0.5 * self.dt

    def refined(self, factor=2):
        return TimeGrid(self.horizon, self.steps * factor)

    def half(self):
        """Left and right halves; requires an even step count."""
        if self.steps < 2:
            raise ParameterError("cannot bisect a single-step grid")
        left = self.steps // 2
        return left, self.nodes[left]

    def cumulative(self, fn):
        """Cumulative integral of ``fn`` over [0, t] at every node (midpoint rule)."""
        f = as_time_fn(fn)
        vals = np.array([np.asarray(f(t), dtype=float) for t in self.mids])
        out = np.zeros((self.steps + 1,) + vals.shape[1:])
        np.cumsum(vals * self.dt, axis=0, out=out[1:])
        return out

    def interp(self, node_values, t):
        """Linear interpolation of node-sampled values at time ``t``."""
        s = np.clip(t / self.dt, 0.0, float(self.steps))
        k = min(int(s), self.steps - 1)
        w = s - k
        return (1.0 - w) * node_values[k] + w * node_values[k + 1]


def as_time_fn(value):
    """Promote a numeric constant to a callable of time; pass callables through."""
    if callable(value):
        return value
    c = float(value)
    return lambda t: c


def sample(fn, times):
    f = as_time_fn(fn)
    return np.array([float(f(t)) for t in np.atleast_1d(times)])
