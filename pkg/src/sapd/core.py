"""Domain, loss and constraint primitives shared by every other module.

All objects here are small immutable value types over numpy vectors. The
decision set is always a box, losses are quadratic (or linear for the
adversarial instance) and constraints are affine, ``g(x) = a @ x - b``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Tuple, Union

import numpy as np


class DimensionError(ValueError):
    """Raised when vector dimensions disagree."""


def _as_vector(x, name: str = "x") -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1)
    if v.ndim != 1:
        raise DimensionError(f"{name} must be a 1-d vector, got shape {v.shape}")
    return v


@dataclass(frozen=True, eq=False)
class BoxDomain:
    """Axis-aligned box ``[lo, hi]`` in R^d."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = _as_vector(self.lo, "lo")
        hi = _as_vector(self.hi, "hi")
        if lo.shape != hi.shape:
            raise DimensionError(f"lo {lo.shape} and hi {hi.shape} differ")
        if np.any(lo > hi):
            raise ValueError("box requires lo <= hi componentwise")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, d: int, lo: float = 0.0, hi: float = 1.0) -> "BoxDomain":
        return cls(np.full(d, float(lo)), np.full(d, float(hi)))

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def project(self, x) -> np.ndarray:
        return project(self, x)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def vertices(self) -> np.ndarray:
        """All 2^d corners; only sensible for small d."""
        if self.dim > 16:
            raise ValueError("vertex enumeration refused for d > 16")
        corners = itertools.product(*zip(self.lo, self.hi))
        return np.array(list(corners), dtype=float)

    def __eq__(self, other):
        if not isinstance(other, BoxDomain):
            return NotImplemented
        return np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    def __hash__(self):
        return hash((self.lo.tobytes(), self.hi.tobytes()))

    def __repr__(self):
        return f"BoxDomain(lo={self.lo.tolist()}, hi={self.hi.tolist()})"


def project(domain: BoxDomain, x) -> np.ndarray:
    """Euclidean projection onto the box, i.e. a componentwise clamp."""
    x = np.asarray(x, dtype=float)
    if x.shape != domain.lo.shape:
        raise DimensionError(
            f"project: expected dimension {domain.dim}, got shape {x.shape}"
        )
    return np.minimum(np.maximum(x, domain.lo), domain.hi)


@dataclass(frozen=True, eq=False)
class LinearConstraint:
    """Affine constraint ``g(x) = a @ x - b`` (feasible when ``g(x) <= 0``)."""

    a: np.ndarray
    b: float

    def __post_init__(self):
        a = _as_vector(self.a, "a")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", float(self.b))

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    def value(self, x) -> float:
        return float(self.a @ x) - self.b

    def gradient(self, x=None) -> np.ndarray:
        return self.a

    def with_budget(self, b: float) -> "LinearConstraint":
        return LinearConstraint(self.a, b)

    def lipschitz(self) -> float:
        return float(np.linalg.norm(self.a))

    def value_bound(self, domain: BoxDomain) -> float:
        """sup over the box of |a @ x - b|."""
        hi = np.maximum(self.a * domain.hi, self.a * domain.lo).sum()
        lo = np.minimum(self.a * domain.hi, self.a * domain.lo).sum()
        return float(max(abs(hi - self.b), abs(lo - self.b)))

    def params(self) -> np.ndarray:
        return np.append(self.a, self.b)

    def __eq__(self, other):
        if not isinstance(other, LinearConstraint):
            return NotImplemented
        return self.b == other.b and np.array_equal(self.a, other.a)

    def __hash__(self):
        return hash((self.a.tobytes(), self.b))

    def __repr__(self):
        return f"LinearConstraint(a={self.a.tolist()}, b={self.b!r})"


@dataclass(frozen=True, eq=False)
class FunctionConstraint:
    """General convex constraint given by value and gradient callables.

    Only the grid estimate of the sup-distance is available for these.
    """

    fn: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    dim: int

    def value(self, x) -> float:
        return float(self.fn(np.asarray(x, dtype=float)))

    def gradient(self, x) -> np.ndarray:
        return np.asarray(self.grad(np.asarray(x, dtype=float)), dtype=float)


@dataclass(frozen=True, eq=False)
class QuadraticLoss:
    """``l(x) = ||x - target||^2``."""

    target: np.ndarray

    def __post_init__(self):
        t = _as_vector(self.target, "target")
        t.setflags(write=False)
        object.__setattr__(self, "target", t)

    @property
    def dim(self) -> int:
        return self.target.shape[0]

    def value(self, x) -> float:
        r = x - self.target
        return float(r @ r)

    def gradient(self, x) -> np.ndarray:
        return 2.0 * (x - self.target)

    def grad_bound(self, domain: BoxDomain) -> float:
        """sup over the box of the gradient norm."""
        far = np.maximum(np.abs(domain.hi - self.target), np.abs(domain.lo - self.target))
        return 2.0 * float(np.linalg.norm(far))

    def __eq__(self, other):
        if not isinstance(other, QuadraticLoss):
            return NotImplemented
        return np.array_equal(self.target, other.target)

    def __hash__(self):
        return hash(self.target.tobytes())


@dataclass(frozen=True, eq=False)
class LinearLoss:
    """``l(x) = coef @ x``; used by the adversarial lower-bound instance."""

    coef: np.ndarray

    def __post_init__(self):
        c = _as_vector(self.coef, "coef")
        c.setflags(write=False)
        object.__setattr__(self, "coef", c)

    @property
    def dim(self) -> int:
        return self.coef.shape[0]

    def value(self, x) -> float:
        return float(self.coef @ x)

    def gradient(self, x=None) -> np.ndarray:
        return self.coef

    def grad_bound(self, domain: BoxDomain) -> float:
        return float(np.linalg.norm(self.coef))

    def __eq__(self, other):
        if not isinstance(other, LinearLoss):
            return NotImplemented
        return np.array_equal(self.coef, other.coef)

    def __hash__(self):
        return hash(self.coef.tobytes())


Loss = Union[QuadraticLoss, LinearLoss]
Constraint = Union[LinearConstraint, FunctionConstraint]


def loss_value_grad(loss: Loss, x) -> Tuple[float, np.ndarray]:
    x = np.asarray(x, dtype=float)
    if x.shape != (loss.dim,):
        raise DimensionError(f"loss: expected dimension {loss.dim}, got {x.shape}")
    return loss.value(x), loss.gradient(x)


def constraint_value_grad(g: Constraint, x) -> Tuple[float, np.ndarray]:
    x = np.asarray(x, dtype=float)
    if x.shape != (g.dim,):
        raise DimensionError(f"constraint: expected dimension {g.dim}, got {x.shape}")
    return g.value(x), g.gradient(x)


SUP_MODES = ("exact", "l1", "grid")


def _grid_points(domain: BoxDomain, n_grid: int, n_samples: int, seed: int) -> np.ndarray:
    if domain.dim <= 3:
        axes = [np.linspace(lo, hi, n_grid) for lo, hi in zip(domain.lo, domain.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)
    rng = np.random.default_rng(seed)
    pts = domain.lo + (domain.hi - domain.lo) * rng.random((n_samples, domain.dim))
    if domain.dim <= 12:
        pts = np.vstack([pts, domain.vertices()])
    return pts


def sup_distance(
    g_prev: Constraint,
    g_next: Constraint,
    domain: BoxDomain,
    mode: str = "exact",
    n_grid: int = 201,
    n_samples: int = 4096,
    seed: int = 0,
) -> float:
    """Worst-case gap ``sup_x |g_next(x) - g_prev(x)|`` over the box.

    ``exact`` uses the vertex-sign closed form for affine constraints, ``l1``
    is the bound ``||da||_1 * diam + |db|``, and ``grid`` evaluates on a grid
    (d <= 3) or on random samples plus corners, which also works for
    :class:`FunctionConstraint`. The ``l1`` value upper-bounds the exact one
    whenever every point of the box has sup-norm at most the diameter, as
    for any box containing the origin or the unit cube.
    """
    if mode not in SUP_MODES:
        raise ValueError(f"unknown sup_distance mode {mode!r}; choose from {SUP_MODES}")
    d = domain.dim
    if g_prev.dim != d or g_next.dim != d:
        raise DimensionError(
            f"sup_distance: constraint dims ({g_prev.dim}, {g_next.dim}) vs domain {d}"
        )
    linear = isinstance(g_prev, LinearConstraint) and isinstance(g_next, LinearConstraint)
    if mode == "grid" or not linear:
        pts = _grid_points(domain, n_grid, n_samples, seed)
        vals_prev = np.array([g_prev.value(p) for p in pts])
        vals_next = np.array([g_next.value(p) for p in pts])
        return float(np.max(np.abs(vals_next - vals_prev)))
    c = g_next.a - g_prev.a
    e = g_next.b - g_prev.b
    if mode == "l1":
        return float(np.abs(c).sum() * domain.diameter + abs(e))
    ch = c * domain.hi
    cl = c * domain.lo
    upper = np.maximum(ch, cl).sum() - e
    lower = e - np.minimum(ch, cl).sum()
    return float(max(upper, lower, 0.0))


def sup_distance_bound(g_prev: LinearConstraint, g_next: LinearConstraint, domain: BoxDomain) -> float:
    return sup_distance(g_prev, g_next, domain, mode="l1")
