"""The four-component decomposition model.

A prepared daily signal ``y`` is modeled as the sum of four components
on the days with valid data:

* ``x1`` residual, scored by an asymmetric quantile cost,
* ``x2`` seasonal baseline: smooth (second-difference penalty) and
  exactly periodic with a one-year period,
* ``x3`` bulk degradation: linear in time with zero first entry,
* ``x4`` soiling: nonpositive and piecewise linear, with a preference
  for slow declines and quick recoveries.

This module defines the cost functions, the parameter set, and the
problem container handed to the solver.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "TAU_RAW",
    "TAU_NORMALIZED",
    "SDConfig",
    "difference_matrix",
    "quantile_cost",
    "seasonal_cost",
    "degradation_feasible",
    "soiling_cost",
    "SDProblem",
    "assemble",
    "Decomposition",
    "sd_objective",
]

# Residual quantile parameter: raw energy prefers negative residuals
# (clouds only reduce output); normalized data expects symmetric ones.
TAU_RAW = 0.85
TAU_NORMALIZED = 0.5

MIN_SIGNAL_LENGTH = 30


@dataclass(frozen=True)
class SDConfig:
    """Model parameters.

    Defaults are the values that work well across many PV systems:
    ``lambda2`` sets the stiffness of the seasonal baseline,
    ``lambda4a`` the number of soiling breakpoints, ``lambda4b`` the
    pull of the soiling component toward zero, and ``lambda4c`` the
    asymmetry between soiling and recovery rates. ``tau1`` is 0.85 for
    raw energy and 0.5 for normalized (performance-index) data.
    """

    tau1: float = TAU_RAW
    lambda2: float = 5e2
    lambda4a: float = 2.0
    lambda4b: float = 3e-2
    lambda4c: float = 2e-1
    tau4: float = 0.9
    period: int = 365

    def __post_init__(self):
        if not 0.0 < self.tau1 < 1.0:
            raise ValueError("tau1 must be strictly inside (0, 1)")
        if not 0.0 < self.tau4 < 1.0:
            raise ValueError("tau4 must be strictly inside (0, 1)")
        for name in ("lambda2", "lambda4a", "lambda4b", "lambda4c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.period < 2:
            raise ValueError("period must be at least 2 days")

    @classmethod
    def for_normalized(cls, **overrides):
        """Defaults for performance-index (labeled) data: tau1 = 0.5."""
        overrides.setdefault("tau1", TAU_NORMALIZED)
        return cls(**overrides)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path):
        """Load parameters from a TOML or JSON key-value file.

        Keys map one-to-one onto the fields of this class; absent keys
        keep their defaults.
        """
        path = Path(path)
        text = path.read_text()
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            try:
                import tomllib  # py311+
            except ModuleNotFoundError:
                import tomli as tomllib
            data = tomllib.loads(text)
        return cls.from_dict(data)

    def to_dict(self):
        return asdict(self)


def difference_matrix(n, order):
    """Sparse banded difference operator of the given order.

    Row ``t`` of the first-order operator is ``x[t+1] - x[t]``; row
    ``t`` of the second-order operator is ``x[t] - 2 x[t+1] + x[t+2]``.
    Applied to any affine sequence the second-order output is zero.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if n <= order:
        raise ValueError(f"need at least {order + 1} points")
    m = n - order
    if order == 1:
        diags = [-np.ones(m), np.ones(m)]
    else:
        diags = [np.ones(m), -2.0 * np.ones(m), np.ones(m)]
    return sp.diags(diags, list(range(order + 1)), shape=(m, n)).tocsr()


def quantile_cost(x, tau):
    """Asymmetric piecewise-linear cost sum((1/2)|x_t| + (tau - 1/2) x_t).

    Equals ``tau * x`` on positive entries and ``(1 - tau) * |x|`` on
    negative ones; nonnegative and positively homogeneous of degree 1.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must be strictly inside (0, 1)")
    x = np.asarray(x, dtype=float)
    return float(np.sum(0.5 * np.abs(x) + (tau - 0.5) * x))


def seasonal_cost(x, config):
    """Seasonal component cost: smoothness penalty under exact periodicity.

    Returns ``lambda2 * ||D2 x||^2`` when ``x[t] == x[t + period]``
    holds for every applicable ``t``, else ``+inf``. For sequences
    shorter than one period the periodicity constraint is vacuous.
    """
    x = np.asarray(x, dtype=float)
    Y = config.period
    if x.size > Y and not np.array_equal(x[:-Y], x[Y:]):
        return np.inf
    if x.size < 3:
        return 0.0
    return float(config.lambda2 * np.sum(np.diff(x, n=2) ** 2))


def degradation_feasible(x, atol=1e-9):
    """True iff ``x`` is affine in t with first entry zero (x_t = m t)."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return False
    if abs(x[0]) > atol:
        return False
    if x.size < 3:
        return True
    return bool(np.max(np.abs(np.diff(x, n=2))) <= atol)


def soiling_cost(x, config):
    """Soiling component cost.

    ``+inf`` if any entry is positive; otherwise the sum of a sparse
    second-difference term, a magnitude term, and an asymmetric cost on
    the daily rates::

        lambda4a * ||D2 x||_1 + lambda4b * sum(-x)
            + lambda4c * quantile_cost(D1 x, tau4)
    """
    x = np.asarray(x, dtype=float)
    if np.any(x > 0):
        return np.inf
    cost = config.lambda4b * float(np.sum(-x))
    if x.size >= 3:
        cost += config.lambda4a * float(np.sum(np.abs(np.diff(x, n=2))))
    if x.size >= 2:
        cost += config.lambda4c * quantile_cost(np.diff(x), config.tau4)
    return cost


@dataclass(frozen=True)
class SDProblem:
    """A prepared signal together with the model parameters."""

    signal: "DailySignal"
    config: SDConfig

    @property
    def n_days(self):
        return len(self.signal)

    @property
    def period_len(self):
        """Length of the free seasonal profile: min(period, T)."""
        return min(self.config.period, self.n_days)

    @property
    def periodicity_active(self):
        """False when T <= period, i.e. the periodicity constraint is vacuous."""
        return self.n_days > self.config.period


def assemble(signal, config):
    """Build the decomposition problem for a prepared signal.

    The signal must be normalized (performance index or p95-scaled) and
    at least 30 days long with a nonempty known set. At least two full
    periods are recommended for seasonal identifiability; shorter
    signals are accepted and flagged via ``periodicity_active``.
    """
    if not signal.is_normalized:
        raise ValueError("signal not scaled")
    if len(signal) < MIN_SIGNAL_LENGTH:
        raise ValueError(f"signal too short: {len(signal)} < {MIN_SIGNAL_LENGTH} days")
    if signal.known_set.size == 0:
        raise ValueError("empty known set")
    return SDProblem(signal=signal, config=config)


@dataclass(frozen=True)
class Decomposition:
    """Estimated components plus solver diagnostics.

    ``x1`` is zero on missing days (no residual is attributed where
    there is no measurement); ``x2`` is exactly periodic by
    construction; ``x3`` is an exact line through zero; ``x4`` is
    elementwise nonpositive. ``objective`` is the model cost evaluated
    directly on the components.
    """

    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    x4: np.ndarray
    objective: float
    report: "SolveReport"
    periodicity_active: bool = True

    @property
    def estimate(self):
        """Denoised signal estimate: the sum of all non-residual components."""
        return self.x2 + self.x3 + self.x4


def sd_objective(x1, x2, x4, config):
    """Model cost of a decomposition (the degradation term is 0 or inf)."""
    return (
        quantile_cost(x1, config.tau1)
        + seasonal_cost(x2, config)
        + soiling_cost(x4, config)
    )
