"""Run traces and everything computed from them.

Regret is measured against the best fixed point that is feasible for every
true constraint in the horizon. Violations are always evaluated on the
noiseless constraints.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

BRANCHES = ("standard", "reset", "periodic")
BRANCH_CODE = {name: i for i, name in enumerate(BRANCHES)}


TRACE_COLUMNS = ("loss", "g", "beta", "mu", "branch", "alpha", "delta", "flagged")
PLAY_COLUMNS = ("loss", "g", "beta", "mu", "branch", "alpha")


class InfeasibleError(ValueError):
    """The intersection of the box and all half-spaces is empty."""


@dataclass
class RunTrace:
    """Per-round records of one run (index 0 is round 1).

    ``g`` holds true constraint values at the played point, ``mu`` the dual
    variable (or queue) entering each round and ``branch`` the codes of
    :data:`BRANCHES`.
    """

    loss: np.ndarray
    g: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    branch: np.ndarray
    alpha: np.ndarray = None
    delta: np.ndarray = None
    flagged: np.ndarray = None
    x_final: Optional[np.ndarray] = None
    algorithm: str = ""
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        T = len(self.loss)
        for name in ("g", "beta", "mu", "branch"):
            if len(getattr(self, name)) != T:
                raise ValueError(f"trace column {name} has length {len(getattr(self, name))} != {T}")
        if self.alpha is None:
            self.alpha = np.full(T, np.nan)
        if self.delta is None:
            self.delta = np.zeros(T)
        if self.flagged is None:
            self.flagged = np.zeros(T, dtype=bool)

    @property
    def T(self) -> int:
        return len(self.loss)

    @property
    def violation(self) -> np.ndarray:
        return np.maximum(self.g, 0.0)

    @property
    def cum_loss(self) -> np.ndarray:
        return np.cumsum(self.loss)

    @property
    def cum_violation(self) -> np.ndarray:
        return np.cumsum(self.violation)

    @property
    def total_loss(self) -> float:
        return float(np.sum(self.loss))

    @property
    def total_violation(self) -> float:
        return cumulative_violation(self)

    def branch_names(self) -> List[str]:
        return [BRANCHES[int(c)] for c in self.branch]

    def rows(self):
        """Rows ``(t, loss, g, violation, beta, mu, branch)`` for trace files."""
        viol = self.violation
        names = self.branch_names()
        for i in range(self.T):
            yield (i + 1, float(self.loss[i]), float(self.g[i]), float(viol[i]),
                   float(self.beta[i]), float(self.mu[i]), names[i])

    def equals(self, other: "RunTrace", columns: Sequence[str] = TRACE_COLUMNS) -> bool:
        """Bit-exact comparison of the given columns (default: all numeric ones)."""
        return all(np.array_equal(getattr(self, c), getattr(other, c), equal_nan=c == "alpha")
                   for c in columns)

    def same_trajectory(self, other: "RunTrace") -> bool:
        """Bit-exact match of everything the learner played, ignoring detector diagnostics."""
        return (self.equals(other, PLAY_COLUMNS)
                and np.array_equal(self.x_final, other.x_final))


def cumulative_violation(trace) -> float:
    """Sum of positive parts of the true constraint values."""
    g = trace.g if isinstance(trace, RunTrace) else np.asarray(trace, dtype=float)
    return float(np.sum(np.maximum(g, 0.0)))


# ------------------------------------------------------------ comparator

def _halfspaces(A: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distinct coefficient rows with their tightest budgets."""
    uniq, inv = np.unique(A, axis=0, return_inverse=True)
    inv = np.asarray(inv).reshape(-1)
    tight = np.full(len(uniq), np.inf)
    np.minimum.at(tight, inv, b)
    return uniq, tight


def project_halfspace(x: np.ndarray, a: np.ndarray, b: float) -> np.ndarray:
    excess = a @ x - b
    if excess <= 0:
        return x
    return x - excess / (a @ a) * a


def dykstra_projection(point: np.ndarray, lo: np.ndarray, hi: np.ndarray, A: np.ndarray,
                       b: np.ndarray, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Euclidean projection of ``point`` onto ``box ∩ {A x <= b}`` by Dykstra's method.

    Raises :class:`InfeasibleError` when the sets do not intersect (detected
    as non-convergence with a persistent residual violation).
    """
    x = np.asarray(point, dtype=float).copy()
    m = len(b)
    incr = np.zeros((m + 1, x.size))
    for _ in range(max_iter):
        x_old = x.copy()
        incr_old = incr.copy()
        y = x + incr[0]
        x = np.minimum(np.maximum(y, lo), hi)
        incr[0] = y - x
        for k in range(m):
            y = x + incr[k + 1]
            x = project_halfspace(y, A[k], b[k])
            incr[k + 1] = y - x
        # x alone can stall while the correction terms still move
        if np.linalg.norm(x - x_old) <= tol and np.abs(incr - incr_old).max() <= tol:
            break
    x = np.minimum(np.maximum(x, lo), hi)
    viol = max(0.0, float(np.max(A @ x - b))) if m else 0.0
    if viol > 1e-7:
        raise InfeasibleError(f"box and half-spaces appear disjoint (residual {viol:.3g})")
    return x


def hindsight_optimum(stream, tol: float = 1e-10, max_iter: int = 100_000) -> Tuple[np.ndarray, float]:
    """Best fixed decision satisfying every true constraint, and its total loss.

    Quadratic losses reduce to projecting the mean target onto the feasible
    set. Linear losses are solved as a linear program.
    """
    A, b = _halfspaces(stream.A, stream.b_true)
    lo, hi = stream.domain.lo, stream.domain.hi
    if stream.loss_kind == "quadratic":
        mean_target = stream.loss_params.mean(axis=0)
        x = dykstra_projection(mean_target, lo, hi, A, b, tol, max_iter)
        diff = stream.loss_params - x
        return x, float(np.sum(diff * diff))
    from scipy.optimize import linprog

    c = stream.loss_params.sum(axis=0)
    res = linprog(c, A_ub=A, b_ub=b, bounds=list(zip(lo, hi)), method="highs")
    if res.status != 0:
        raise InfeasibleError(f"comparator LP failed: {res.message}")
    x = np.asarray(res.x, dtype=float)
    return x, float(np.sum(stream.loss_params @ x))


def static_regret(trace: RunTrace, stream, comparator: Optional[Tuple[np.ndarray, float]] = None) -> float:
    """Cumulative loss minus the comparator's; may be negative."""
    _, best = comparator if comparator is not None else hindsight_optimum(stream)
    return trace.total_loss - best


# ------------------------------------------------------------ aggregation

def scaling_exponent(horizons: Sequence[float], violations: Sequence[float]) -> float:
    """Least-squares slope of log V against log T."""
    T = np.asarray(horizons, dtype=float)
    V = np.asarray(violations, dtype=float)
    if T.size < 3 or T.size != V.size:
        raise ValueError("need at least 3 (horizon, violation) pairs")
    if np.any(T <= 0) or np.any(V <= 0):
        raise ValueError("horizons and violations must be positive")
    slope, _ = np.polyfit(np.log(T), np.log(V), 1)
    return float(slope)


def aggregate(values: Iterable[float]) -> Tuple[float, Optional[float]]:
    """Mean and standard error (``None`` for a single value)."""
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        raise ValueError("nothing to aggregate")
    mean = float(v.mean())
    if v.size < 2:
        return mean, None
    return mean, float(v.std(ddof=1) / np.sqrt(v.size))


def aggregate_traces(traces: Sequence[RunTrace]) -> Dict[str, Tuple[float, Optional[float]]]:
    return {
        "loss": aggregate(t.total_loss for t in traces),
        "violation": aggregate(t.total_violation for t in traces),
    }


# ------------------------------------------------------------ detection

@dataclass
class DetectionStats:
    n_edges: int
    detected: int
    missed: int
    false_positives: int
    mean_delay: Optional[float]
    entries: int
    exits: int
    delays: list = field(default_factory=list)


def true_edges(stream, noiseless: bool = True) -> List[Tuple[int, int]]:
    """``(s, sign)`` for every round ``s`` whose constraint differs from round
    ``s + 1``. ``sign`` is -1 when the budget drops (an entry into a tighter
    regime) and +1 otherwise."""
    b = stream.b_true if noiseless else stream.b
    d = stream.deltas(true=noiseless)
    out = []
    for i in np.nonzero(d > 0)[0]:
        out.append((int(i + 1), -1 if b[i + 1] < b[i] else 1))
    return out


def detection_stats(flags: np.ndarray, edges: Sequence[Tuple[int, int]], max_delay: int = 5) -> DetectionStats:
    """Match flagged rounds to true edges.

    ``flags[i]`` refers to round ``i + 1``. An edge at round ``s`` counts as
    detected by the first flag in rounds ``s+1 .. s+max_delay``; the delay is
    the flag round minus ``s``. Unmatched flags are false positives.
    """
    fired = set((np.nonzero(np.asarray(flags))[0] + 1).tolist())
    used = set()
    delays = []
    entries = exits = 0
    for s, sign in edges:
        for r in range(s + 1, s + max_delay + 1):
            if r in fired and r not in used:
                used.add(r)
                delays.append(r - s)
                if sign < 0:
                    entries += 1
                else:
                    exits += 1
                break
    n = len(edges)
    return DetectionStats(
        n_edges=n,
        detected=len(delays),
        missed=n - len(delays),
        false_positives=len(fired - used),
        mean_delay=float(np.mean(delays)) if delays else None,
        entries=entries,
        exits=exits,
        delays=delays,
    )
