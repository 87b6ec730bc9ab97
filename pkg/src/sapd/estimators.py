"""Online structure estimators fed by revealed constraint parameters.

Three signals are tracked:

* a windowed max/mean of recent constraint distances (drift level),
* a ratio test flagging abrupt jumps against that windowed mean,
* a lag statistic over the parameter history that exposes an exact or
  near-exact period.

Each constraint distance ``delta`` passed in at round ``t`` compares the
constraints of rounds ``t-1`` and ``t``, so a jump is seen one round after
the last round of the old regime.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

PERIOD_MODES = ("param_nmse", "autocorr", "delta_nmse", "off")


@dataclass
class EstimatorConfig:
    """Estimator knobs.

    ``theta_period`` is the relative threshold for ``param_nmse`` and
    ``delta_nmse``. The ``autocorr`` mode uses the absolute threshold
    ``eta_scale * H * R / sqrt(window)``.
    """

    window: int = 100
    gamma: float = 3.0
    eps: float = 1e-6
    period_mode: str = "param_nmse"
    theta_period: float = 0.01
    p_min: int = 2
    p_max: int = 600
    decorrelation: float = 0.5
    min_compare: int = 32
    eta_scale: float = 0.01
    detect_every: int = 1

    def validate(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.gamma <= 1:
            raise ValueError("gamma must be > 1")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.period_mode not in PERIOD_MODES:
            raise ValueError(f"period_mode must be one of {PERIOD_MODES}")
        if not 2 <= self.p_min <= self.p_max:
            raise ValueError("need 2 <= p_min <= p_max")
        if self.theta_period <= 0:
            raise ValueError("theta_period must be > 0")
        if self.detect_every < 1:
            raise ValueError("detect_every must be >= 1")
        if not 1 <= self.min_compare <= self.p_max:
            raise ValueError("min_compare must lie in [1, p_max]")


# ------------------------------------------------------------ lag statistics

def lag_span(p, min_compare: int = 1):
    """Full comparison window of lag ``p``: ``max(p, min_compare)``."""
    return np.maximum(p, min_compare)


def lag_window(n: int, p: int, min_compare: int = 1) -> int:
    """Number of lag-``p`` comparisons used when ``n`` entries are stored.

    The window covers the most recent ``min(n - p, max(p, min_compare))``
    comparisons, so lag ``p >= min_compare`` is fully evaluated once ``2p``
    entries exist.
    """
    return int(max(0, min(n - p, lag_span(p, min_compare))))


def lag_statistics(series: np.ndarray, lags: np.ndarray, kind: str = "sq",
                   min_compare: int = 1) -> tuple:
    """Direct per-lag sums over the most recent comparisons.

    Parameters
    ----------
    series : (n, k) or (n,) array, oldest first.
    lags : integer lags.
    kind : ``"sq"`` sums squared Euclidean differences; ``"abs"`` sums
        Euclidean norms.

    Returns
    -------
    sums, counts : arrays over ``lags``.
    """
    X = np.asarray(series, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    sums = np.zeros(len(lags))
    counts = np.zeros(len(lags), dtype=int)
    for j, p in enumerate(lags):
        c = lag_window(n, int(p), min_compare)
        if c == 0:
            continue
        diff = X[n - c:] - X[n - c - p:n - p]
        sq = (diff * diff).sum(axis=1)
        sums[j] = sq.sum() if kind == "sq" else np.sqrt(sq).sum()
        counts[j] = c
    return sums, counts


def select_period(stat: np.ndarray, counts: np.ndarray, lags: np.ndarray, threshold: float,
                  relative: np.ndarray, decorrelation: float, min_compare: int = 1,
                  tie_tol: float = 1e-9) -> Optional[int]:
    """Pick the period among lags whose statistic is below ``threshold``.

    ``stat`` covers ``lags`` which must be consecutive integers; the first and
    last entries only serve as neighbours. A lag qualifies when it is fully
    evaluated (``count >= max(p, min_compare)``), lies below the threshold, is
    a local minimum of ``stat`` against both neighbours (each holding at least
    half that many comparisons) and some shorter lag reaches ``decorrelation``
    on the ``relative`` scale. The shortest qualifying lag within ``tie_tol``
    of the smallest qualifying statistic wins.
    """
    if len(lags) < 3:
        return None
    mid = stat[1:-1]
    span = lag_span(lags[1:-1], min_compare)
    ok = (counts[1:-1] >= span) & (mid < threshold)
    if not ok.any():
        return None
    half = (span + 1) // 2
    ok &= (counts[:-2] >= half) & (counts[2:] >= half)
    ok &= (mid <= stat[:-2]) & (mid <= stat[2:])
    ok &= np.maximum.accumulate(relative)[:-2] >= decorrelation
    if not ok.any():
        return None
    best = mid[ok].min()
    j = np.nonzero(ok & (mid <= best + tie_tol))[0][0]
    return int(lags[j + 1])


# ------------------------------------------------------------ state

@dataclass
class EstimatorEvent:
    """What the estimator saw in one round."""

    delta: Optional[float]
    flagged: bool
    tested: bool
    delta_max: float
    delta_mean: float
    period: Optional[int]
    period_found: bool


class EstimatorState:
    """Buffers and detections for a single run.

    Parameters
    ----------
    cfg : EstimatorConfig
    scale : float
        Multiplier applied to the coefficient part of the parameter vector
        (usually the domain diameter) so coefficients and budgets are
        compared on the scale of constraint values.
    lipschitz : float
        Constraint gradient bound, used by the ``autocorr`` threshold.
    """

    def __init__(self, cfg: Optional[EstimatorConfig] = None, scale: float = 1.0,
                 lipschitz: float = 1.0):
        self.cfg = cfg or EstimatorConfig()
        self.cfg.validate()
        self.scale = float(scale)
        self.lipschitz = float(lipschitz)
        self.delta_buffer: deque = deque(maxlen=self.cfg.window)
        self.delta_max = 0.0
        self.delta_mean = 0.0
        self.K_hat = 0
        self.P_hat: Optional[int] = None
        self.n_resets = 0
        # lags p_min-1 .. p_max+1 so every tested lag has both neighbours
        self._lags = np.arange(self.cfg.p_min - 1, self.cfg.p_max + 2)
        self._span = lag_span(self._lags, self.cfg.min_compare)
        self._cap = int((self._span + self._lags).max()) + 1
        self._full_after = self._cap - 1
        self._cols = np.arange(len(self._lags))
        self._dist_cache: Optional[np.ndarray] = None
        self._ring: Optional[np.ndarray] = None
        self._dring = np.zeros(self._cap)
        self._n = 0
        self._sums = np.zeros(len(self._lags))
        self._since_check = 0

    # -------------------------------------------------------- drift level
    def observe_delta(self, delta: float) -> "EstimatorState":
        if not delta >= 0:
            raise ValueError(f"constraint distance must be >= 0, got {delta}")
        self.delta_buffer.append(float(delta))
        self.delta_max = max(self.delta_buffer)
        self.delta_mean = sum(self.delta_buffer) / len(self.delta_buffer)
        return self

    def change_point_test(self, delta: float, count: bool = True) -> bool:
        """Ratio test against the current window (which must exclude ``delta``).

        Returns True when ``delta > gamma * (mean + eps)``; a positive result
        increments ``K_hat`` unless ``count`` is False.
        """
        fired = delta > self.cfg.gamma * (self.delta_mean + self.cfg.eps)
        if fired and count:
            self.K_hat += 1
        return bool(fired)

    # -------------------------------------------------------- period
    @property
    def history_length(self) -> int:
        return min(self._n, self._cap)

    def param_history(self) -> np.ndarray:
        """Stored parameter rows, oldest first."""
        if self._ring is None:
            return np.zeros((0, 0))
        m = self.history_length
        end = self._n % self._cap + self._cap
        return self._ring[end - m:end].copy()

    def delta_history(self) -> np.ndarray:
        m = self.history_length
        idx = (self._n - m + np.arange(m)) % self._cap
        return self._dring[idx].copy()

    def observe_params(self, a: np.ndarray, b: float, delta: float = 0.0) -> "EstimatorState":
        """Append one revealed constraint to the parameter history."""
        row = np.append(self.scale * np.asarray(a, dtype=float), float(b))
        if self._ring is None or self._ring.shape[1] != row.shape[0]:
            # each row is stored twice so any recent span is a contiguous slice
            self._ring = np.zeros((2 * self._cap, row.shape[0]))
            self._n = 0
            self._sums[:] = 0.0
        n = self._n
        pos = n % self._cap
        self._ring[pos] = row
        self._ring[pos + self._cap] = row
        self._dring[pos] = delta
        self._n = n + 1
        if self.P_hat is None and self.cfg.period_mode == "param_nmse":
            self._update_sums(n, pos)
        return self

    def _update_sums(self, n: int, pos: int) -> None:
        # newest index n: add the comparison (n, n-p) for every lag and drop
        # (n-w, n-w-p) once the lag window w is full. Squared distances of new
        # comparisons are cached so the dropped ones are a single gather.
        lags, span, cap = self._lags, self._span, self._cap
        lo, hi = int(lags[0]), int(lags[-1])
        top = pos + cap
        lagged = self._ring[top - hi:top - lo + 1][::-1]
        diff = self._ring[top] - lagged
        fresh = np.einsum("ij,ij->i", diff, diff)
        warm = n < self._full_after
        if warm:
            fresh[n - lags < 0] = 0.0
        if self._dist_cache is None:
            self._dist_cache = np.zeros((cap, len(lags)))
        self._dist_cache[pos] = fresh
        self._sums += fresh
        old_at = n - span
        if warm:
            ok = old_at - lags >= 0
            if ok.any():
                cols = np.nonzero(ok)[0]
                self._sums[cols] -= self._dist_cache[old_at[cols] % cap, cols]
        else:
            self._sums -= self._dist_cache[old_at % cap, self._cols]
        np.maximum(self._sums, 0.0, out=self._sums)

    def period_statistic(self) -> tuple:
        """(lags, statistic, counts, relative) for the configured mode."""
        lags = self._lags
        n = self.history_length
        mc = self.cfg.min_compare
        counts = np.minimum(np.maximum(n - lags, 0), self._span)
        mode = self.cfg.period_mode
        if mode == "param_nmse":
            means = np.where(counts > 0, self._sums / np.maximum(counts, 1), 0.0)
            top = means.max(initial=0.0)
            rel = means / top if top > 0 else np.zeros_like(means)
            return lags, rel, counts, rel
        if mode == "autocorr":
            sums, counts = lag_statistics(self.param_history(), lags, kind="abs", min_compare=mc)
            means = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
            top = means.max(initial=0.0)
            rel = means / top if top > 0 else np.zeros_like(means)
            return lags, means, counts, rel
        if mode == "delta_nmse":
            series = self.delta_history()
            sums, counts = lag_statistics(series, lags, kind="sq", min_compare=mc)
            energy = np.array([np.sum(series[n - c:] ** 2) if c else 0.0
                               for c in counts])
            stat = np.where(energy > 0, sums / np.maximum(energy, 1e-300), 0.0)
            top = stat.max(initial=0.0)
            rel = stat / top if top > 0 else np.zeros_like(stat)
            return lags, stat, counts, rel
        return lags, np.zeros(len(lags)), counts, np.zeros(len(lags))

    def _degenerate(self, lags, counts) -> bool:
        """True when the stored history shows no variation at any lag."""
        if self.cfg.period_mode == "param_nmse":
            means = self._sums / np.maximum(counts, 1)
            hist_scale = 1.0
            if self._ring is not None and self.history_length:
                hist_scale += float(np.abs(self.param_history()).max()) ** 2
            return float(means.max(initial=0.0)) <= 1e-12 * hist_scale
        return False

    def threshold(self) -> float:
        if self.cfg.period_mode == "autocorr":
            return self.cfg.eta_scale * self.lipschitz * self.scale / np.sqrt(self.cfg.window)
        return self.cfg.theta_period

    def detect_period(self, force: bool = False) -> Optional[int]:
        """Return the detected period, searching if none is frozen yet."""
        if self.P_hat is not None or self.cfg.period_mode == "off":
            return self.P_hat
        self._since_check += 1
        if not force and self._since_check < self.cfg.detect_every:
            return None
        self._since_check = 0
        if self.history_length < 2 * self.cfg.p_min:
            return None
        lags, stat, counts, rel = self.period_statistic()
        p = select_period(stat, counts, lags, self.threshold(), rel, self.cfg.decorrelation,
                          self.cfg.min_compare)
        if p is not None and self._degenerate(lags, counts):
            return None
        if p is not None:
            self.P_hat = p
        return self.P_hat

    # -------------------------------------------------------- lifecycle
    def clear(self) -> "EstimatorState":
        """Forget buffers and the period after a detected regime change."""
        self.delta_buffer.clear()
        self.delta_max = 0.0
        self.delta_mean = 0.0
        self.P_hat = None
        self._n = 0
        self._sums[:] = 0.0
        self._since_check = 0
        self.n_resets += 1
        return self

    def step(self, delta: Optional[float], a: np.ndarray, b: float, reset: bool = True) -> EstimatorEvent:
        """Process one revealed constraint.

        ``delta`` is the distance to the previous revealed constraint (None in
        the first round). The ratio test runs only once the window holds at
        least one value. With ``reset`` on, a flagged jump clears the buffers
        and is not inserted; otherwise it is inserted like any other value.
        """
        flagged = tested = False
        if delta is not None:
            if not delta >= 0:
                raise ValueError(f"constraint distance must be >= 0, got {delta}")
            if self.delta_buffer:
                tested = True
                flagged = self.change_point_test(delta)
            if flagged and reset:
                self.clear()
            else:
                self.observe_delta(delta)
        self.observe_params(a, b, 0.0 if delta is None else delta)
        had = self.P_hat is not None
        period = self.detect_period()
        return EstimatorEvent(delta, flagged, tested, self.delta_max, self.delta_mean,
                              period, period is not None and not had)


def observe_delta(state: EstimatorState, delta: float) -> EstimatorState:
    return state.observe_delta(delta)


def change_point_test(state: EstimatorState, delta: float) -> bool:
    return state.change_point_test(delta)


def detect_period(state: EstimatorState) -> Optional[int]:
    return state.detect_period(force=True)


# ------------------------------------------------------------ offline driver

@dataclass
class DetectionSummary:
    """Estimator-only pass over a stream."""

    flags: np.ndarray
    delta_max: np.ndarray
    delta_mean: np.ndarray
    deltas: np.ndarray
    K_hat: int
    P_hat: Optional[int]
    period_round: Optional[int]
    periods: list = field(default_factory=list)


def run_detection(stream, cfg: Optional[EstimatorConfig] = None, reset: bool = True) -> DetectionSummary:
    """Feed every revealed constraint of ``stream`` through a fresh estimator.

    ``periods`` lists ``(round, period)`` whenever a new period is frozen.
    """
    T = stream.T
    deltas = np.zeros(T)
    deltas[1:] = stream.deltas()
    est = EstimatorState(cfg, scale=stream.domain.diameter,
                         lipschitz=float(np.sqrt((stream.A**2).sum(axis=1)).max()))
    flags = np.zeros(T, dtype=bool)
    dmax = np.zeros(T)
    dmean = np.zeros(T)
    periods = []
    first_period = None
    for i in range(T):
        ev = est.step(None if i == 0 else float(deltas[i]), stream.A[i], float(stream.b[i]), reset=reset)
        flags[i] = ev.flagged
        dmax[i] = ev.delta_max
        dmean[i] = ev.delta_mean
        if ev.period_found:
            periods.append((i + 1, ev.period))
            if first_period is None:
                first_period = i + 1
    return DetectionSummary(flags, dmax, dmean, deltas, est.K_hat, est.P_hat, first_period, periods)


def edge_rounds(deltas: np.ndarray, tol: float = 0.0) -> np.ndarray:
    """Rounds ``s`` whose constraint differs from round ``s + 1``.

    ``deltas[i]`` is the distance between rounds ``i`` and ``i + 1`` (1-based
    rounds, ``deltas[0]`` unused), so the returned rounds are the last round
    of each old regime. A perfect detector fires at ``s + 1``.
    """
    idx = np.nonzero(deltas[1:] > tol)[0] + 1
    return idx
