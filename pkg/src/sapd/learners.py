"""Online primal-dual learners.

Three algorithms share one step interface ``step(state, rnd, cfg, ctx)``:

``sapd``
    Projected primal-dual with a dual step that shrinks when the constraints
    drift, a dual reset on detected jumps and a per-phase dual average that is
    mixed in at period boundaries.
``pd_fixed``
    The same primal-dual recursion with a constant dual step ``T**-0.25``.
``vq_oco``
    A virtual-queue method whose queue enters the primal step scaled by
    ``1/sqrt(T)``.

Each step plays ``state.x`` first and only then reads the round's loss and
constraint.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .core import BoxDomain, LinearConstraint, sup_distance
from .environments import ConfigError, Round, Stream
from .estimators import EstimatorConfig, EstimatorState
from .metrics import BRANCH_CODE, RunTrace

log = logging.getLogger(__name__)

ALGORITHMS = ("sapd", "pd_fixed", "vq_oco")
DEFAULT_C1 = {"sapd": 100.0, "pd_fixed": 1.0, "vq_oco": 1.0}


class RunAbort(RuntimeError):
    """A run hit a non-finite value or broke an invariant."""


@dataclass
class AlgoConfig:
    """Learner configuration.

    ``c1`` falls back to 100 for ``sapd`` and 1 otherwise. ``xi`` overrides
    the Slater margin declared by the stream; when neither exists it is
    estimated online from ``slater_reference`` (``"center"`` or
    ``"played"``). ``dual_in_primal`` picks whether the primal step uses the
    updated (``"next"``) or the pre-update (``"current"``) dual value.
    """

    name: str = "sapd"
    label: Optional[str] = None
    c1: Optional[float] = None
    xi: Optional[float] = None
    xi_min: float = 0.01
    slater_reference: str = "center"
    R: Optional[float] = None
    G: Optional[float] = None
    window: int = 100
    gamma: float = 3.0
    rho: float = 0.5
    eps: float = 1e-6
    adaptive_beta: bool = True
    reset: bool = True
    periodic: bool = True
    dual_in_primal: str = "next"
    delta_mode: str = "exact"
    period_mode: str = "param_nmse"
    theta_period: float = 0.01
    p_min: int = 2
    p_max: int = 600
    min_compare: int = 32
    detect_every: int = 1
    beta: Optional[float] = None
    alpha: Optional[float] = None
    vq_alpha_scale: float = 1.0
    vq_theta_scale: float = 1.0
    check_invariants: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def display_name(self) -> str:
        return self.label or {"sapd": "SA-PD", "pd_fixed": "PD-Fixed", "vq_oco": "VQ-OCO"}[self.name]

    @property
    def dual_constant(self) -> float:
        return DEFAULT_C1[self.name] if self.c1 is None else float(self.c1)

    def validate(self) -> None:
        if self.name not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.name!r}")
        if self.c1 is not None and self.c1 <= 0:
            raise ConfigError("c1 must be > 0")
        if self.xi is not None and self.xi <= 0:
            raise ConfigError("xi must be > 0")
        if self.xi_min <= 0:
            raise ConfigError("xi_min must be > 0")
        if not 0 < self.rho < 1:
            raise ConfigError("rho must lie in (0, 1)")
        if self.gamma <= 1:
            raise ConfigError("gamma must be > 1")
        if self.eps <= 0:
            raise ConfigError("eps must be > 0")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.slater_reference not in ("center", "played"):
            raise ConfigError("slater_reference must be 'center' or 'played'")
        if self.dual_in_primal not in ("next", "current"):
            raise ConfigError("dual_in_primal must be 'next' or 'current'")
        if self.delta_mode not in ("exact", "l1", "grid"):
            raise ConfigError("delta_mode must be exact, l1 or grid")
        try:
            self.estimator_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(window=self.window, gamma=self.gamma, eps=self.eps,
                               period_mode=self.period_mode, theta_period=self.theta_period,
                               p_min=self.p_min, p_max=self.p_max, min_compare=self.min_compare,
                               detect_every=self.detect_every)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AlgoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown algorithm keys {sorted(unknown)}; valid keys: {sorted(known)}")
        return cls(**data)


@dataclass
class RunContext:
    """Per-run constants resolved from the stream and the config."""

    T: int
    domain: BoxDomain
    R: float
    G: float
    B: float
    H: float
    xi: Optional[float]

    @classmethod
    def from_stream(cls, stream: Stream, cfg: AlgoConfig) -> "RunContext":
        k = stream.constants()
        xi = cfg.xi if cfg.xi is not None else stream.xi
        return cls(T=stream.T, domain=stream.domain,
                   R=cfg.R if cfg.R is not None else k.R,
                   G=cfg.G if cfg.G is not None else k.G,
                   B=k.B, H=k.H, xi=xi)


class SlaterTracker:
    """Online half-margin estimate of the Slater constant."""

    def __init__(self, xi_min: float = 0.01):
        self.xi_min = xi_min
        self.best = 0.0

    def update(self, g: LinearConstraint, x_ref: np.ndarray) -> float:
        self.best = max(self.best, -g.value(x_ref))
        return self.value

    @property
    def value(self) -> float:
        return 0.5 * self.best if self.best > 0 else self.xi_min


def estimate_slater(history, x_ref: Optional[np.ndarray] = None, domain: Optional[BoxDomain] = None,
                    xi_min: float = 0.01) -> float:
    """Half of the largest observed margin ``-g_t(x_ref)``.

    ``history`` holds constraints or ``(constraint, x)`` pairs; with pairs and
    no ``x_ref`` the paired points are used. ``domain`` supplies the centre
    as default reference. Returns ``xi_min`` when no margin is positive.
    """
    tracker = SlaterTracker(xi_min)
    for item in history:
        if isinstance(item, tuple):
            g, x = item
        else:
            g, x = item, None
        ref = x_ref if x_ref is not None else (x if x is not None else domain.center)
        tracker.update(g, np.asarray(ref, dtype=float))
    return tracker.value


@dataclass
class StepRecord:
    t: int
    loss: float
    g: float
    g_true: float
    beta: float
    alpha: float
    mu: float
    mu_next: float
    branch: str
    delta: float
    flagged: bool
    period: Optional[int]


class LearnerState:
    """Mutable state of one run.

    Attributes
    ----------
    x : current (to-be-played) point
    mu : dual variable, or queue length for ``vq_oco``
    t : rounds completed
    """

    def __init__(self, cfg: AlgoConfig, ctx: RunContext, x0: Optional[np.ndarray] = None):
        self.x = ctx.domain.center.copy() if x0 is None else ctx.domain.project(np.asarray(x0, dtype=float))
        self.mu = 0.0
        self.t = 0
        self.alpha = np.nan
        self.beta = np.nan
        self.prev_constraint: Optional[LinearConstraint] = None
        self.fired_branch = "standard"
        self.estimator: Optional[EstimatorState] = None
        self.slater: Optional[SlaterTracker] = None
        self.phase_sum: Optional[np.ndarray] = None
        self.phase_count: Optional[np.ndarray] = None
        self.phase_period: Optional[int] = None
        self.mu_history: deque = deque(maxlen=2 * (cfg.p_max + 1) + cfg.min_compare + 2)
        if cfg.name == "sapd":
            self.estimator = EstimatorState(cfg.estimator_config(), scale=ctx.R, lipschitz=ctx.H)
        if ctx.xi is None:
            self.slater = SlaterTracker(cfg.xi_min)

    def xi(self, ctx: RunContext) -> float:
        return ctx.xi if ctx.xi is not None else self.slater.value

    def clear_phases(self) -> None:
        self.phase_sum = self.phase_count = None
        self.phase_period = None
        self.mu_history.clear()

    def start_phases(self, period: int) -> None:
        """Build per-phase dual averages, backfilled from the stored history."""
        self.phase_period = period
        self.phase_sum = np.zeros(period)
        self.phase_count = np.zeros(period, dtype=int)
        for s, m in self.mu_history:
            self.phase_sum[s % period] += m
            self.phase_count[s % period] += 1

    def phase_average(self, phase: int) -> Optional[float]:
        if self.phase_count is None or self.phase_count[phase] == 0:
            return None
        return float(self.phase_sum[phase] / self.phase_count[phase])


# ------------------------------------------------------------ shared pieces

def dual_cap(c1: float, T: int) -> float:
    return c1 * T ** -0.25


def adaptive_beta(c1: float, T: int, xi: float, delta_max: float, eps: float) -> float:
    return min(dual_cap(c1, T), xi / (2.0 * (delta_max + eps)))


def _observe(state: LearnerState, rnd: Round):
    x = state.x
    lv = rnd.loss.value(x)
    lg = rnd.loss.gradient(x)
    gv = rnd.constraint.value(x)
    gg = rnd.constraint.gradient(x)
    gt = gv if rnd.constraint_true is rnd.constraint else rnd.constraint_true.value(x)
    if not (np.isfinite(lv) and np.isfinite(gv) and np.all(np.isfinite(lg))):
        raise RunAbort(f"non-finite loss or constraint at round {rnd.t}: loss={lv}, g={gv}")
    return lv, lg, gv, gg, gt


def _primal(state: LearnerState, ctx: RunContext, alpha: float, lg, gg, mu_used: float) -> np.ndarray:
    x = state.x - alpha * (lg + mu_used * gg)
    if not np.all(np.isfinite(x)):
        raise RunAbort(f"non-finite primal iterate at round {state.t + 1}")
    return np.minimum(np.maximum(x, ctx.domain.lo), ctx.domain.hi)


def _check(state: LearnerState, ctx: RunContext, cfg: AlgoConfig, mu_next: float) -> None:
    if mu_next < 0 or not np.isfinite(mu_next):
        raise RunAbort(f"dual variable left [0, inf) at round {state.t}: {mu_next}")
    if not ctx.domain.contains(state.x):
        raise RunAbort(f"primal iterate left the box at round {state.t}")


def _slater_update(state: LearnerState, ctx: RunContext, cfg: AlgoConfig, rnd: Round) -> None:
    if state.slater is not None:
        ref = ctx.domain.center if cfg.slater_reference == "center" else state.x
        state.slater.update(rnd.constraint, ref)


# ------------------------------------------------------------ steps

def sapd_step(state: LearnerState, rnd: Round, cfg: AlgoConfig, ctx: RunContext):
    """One round of the structure-adaptive primal-dual method."""
    t = rnd.t
    lv, lg, gv, gg, gt = _observe(state, rnd)
    _slater_update(state, ctx, cfg, rnd)
    xi = state.xi(ctx)

    delta = None
    if state.prev_constraint is not None:
        delta = sup_distance(state.prev_constraint, rnd.constraint, ctx.domain, mode=cfg.delta_mode)
    est = state.estimator
    had_period = est.P_hat
    ev = est.step(delta, rnd.constraint.a, rnd.constraint.b, reset=cfg.reset)
    if ev.flagged and cfg.reset:
        state.clear_phases()
    if est.P_hat is not None and est.P_hat != had_period:
        state.start_phases(est.P_hat)

    c1 = cfg.dual_constant
    if cfg.beta is not None:
        beta = cfg.beta
    elif cfg.adaptive_beta:
        beta = adaptive_beta(c1, ctx.T, xi, est.delta_max, cfg.eps)
    else:
        beta = dual_cap(c1, ctx.T)

    mu = state.mu
    branch = "standard"
    if cfg.reset and ev.flagged:
        mu_next = 0.0
        branch = "reset"
    else:
        avg = None
        P = est.P_hat if cfg.periodic else None
        if P is not None and t % P == 0:
            avg = state.phase_average((t + 1) % P)
        if avg is not None:
            mu_next = (1.0 - cfg.rho) * mu + cfg.rho * avg
            branch = "periodic"
        else:
            mu_next = max(mu + beta * gv, 0.0)

    alpha = cfg.alpha if cfg.alpha is not None else ctx.R / (ctx.G * np.sqrt(t))
    mu_used = mu_next if cfg.dual_in_primal == "next" else mu
    state.x = _primal(state, ctx, alpha, lg, gg, mu_used)

    state.mu_history.append((t, mu))
    if state.phase_period is not None:
        s = t % state.phase_period
        state.phase_sum[s] += mu
        state.phase_count[s] += 1

    state.prev_constraint = rnd.constraint
    state.mu = mu_next
    state.t = t
    state.alpha, state.beta = alpha, beta
    state.fired_branch = branch
    if cfg.check_invariants:
        _check(state, ctx, cfg, mu_next)
        if cfg.beta is None and cfg.adaptive_beta:
            lo_b = xi / (2.0 * (ctx.B + cfg.eps))
            hi_b = min(dual_cap(c1, ctx.T), xi / (2.0 * cfg.eps))
            if not lo_b * (1 - 1e-12) <= beta <= hi_b * (1 + 1e-12):
                raise RunAbort(f"dual step {beta} outside [{lo_b}, {hi_b}] at round {t}")
    rec = StepRecord(t, lv, gv, gt, beta, alpha, mu, mu_next, branch,
                     0.0 if delta is None else delta, ev.flagged, est.P_hat)
    return state, rec


def pd_fixed_step(state: LearnerState, rnd: Round, cfg: AlgoConfig, ctx: RunContext):
    """Primal-dual step with the constant dual step ``c1 * T**-0.25``."""
    t = rnd.t
    lv, lg, gv, gg, gt = _observe(state, rnd)
    beta = cfg.beta if cfg.beta is not None else dual_cap(cfg.dual_constant, ctx.T)
    mu = state.mu
    mu_next = max(mu + beta * gv, 0.0)
    alpha = cfg.alpha if cfg.alpha is not None else ctx.R / (ctx.G * np.sqrt(t))
    mu_used = mu_next if cfg.dual_in_primal == "next" else mu
    state.x = _primal(state, ctx, alpha, lg, gg, mu_used)
    delta = 0.0
    if state.prev_constraint is not None:
        delta = sup_distance(state.prev_constraint, rnd.constraint, ctx.domain, mode=cfg.delta_mode)
    state.prev_constraint = rnd.constraint
    state.mu = mu_next
    state.t = t
    state.alpha, state.beta = alpha, beta
    state.fired_branch = "standard"
    if cfg.check_invariants:
        _check(state, ctx, cfg, mu_next)
    return state, StepRecord(t, lv, gv, gt, beta, alpha, mu, mu_next, "standard", delta, False, None)


def vq_oco_step(state: LearnerState, rnd: Round, cfg: AlgoConfig, ctx: RunContext):
    """Virtual-queue step: ``Q <- [Q + g]_+`` then a primal step weighted by
    ``theta * Q`` with ``alpha = R / (G sqrt(T))`` and ``theta = 1 / sqrt(T)``."""
    t = rnd.t
    lv, lg, gv, gg, gt = _observe(state, rnd)
    theta = cfg.vq_theta_scale / np.sqrt(ctx.T)
    alpha = cfg.alpha if cfg.alpha is not None else cfg.vq_alpha_scale * ctx.R / (ctx.G * np.sqrt(ctx.T))
    q = state.mu
    q_next = max(q + gv, 0.0)
    state.x = _primal(state, ctx, alpha, lg, gg, theta * q_next)
    delta = 0.0
    if state.prev_constraint is not None:
        delta = sup_distance(state.prev_constraint, rnd.constraint, ctx.domain, mode=cfg.delta_mode)
    state.prev_constraint = rnd.constraint
    state.mu = q_next
    state.t = t
    state.alpha, state.beta = alpha, theta
    state.fired_branch = "standard"
    if cfg.check_invariants:
        _check(state, ctx, cfg, q_next)
    return state, StepRecord(t, lv, gv, gt, theta, alpha, q, q_next, "standard", delta, False, None)


STEPS = {"sapd": sapd_step, "pd_fixed": pd_fixed_step, "vq_oco": vq_oco_step}


def run(stream: Stream, cfg: AlgoConfig, x0: Optional[np.ndarray] = None) -> RunTrace:
    """Play every round of ``stream`` and return the trace."""
    ctx = RunContext.from_stream(stream, cfg)
    state = LearnerState(cfg, ctx, x0)
    step = STEPS[cfg.name]
    T = stream.T
    loss = np.empty(T)
    g = np.empty(T)
    beta = np.empty(T)
    mu = np.empty(T)
    alpha = np.empty(T)
    delta = np.empty(T)
    branch = np.zeros(T, dtype=np.int8)
    flagged = np.zeros(T, dtype=bool)
    bound = dual_cap(cfg.dual_constant, T) * ctx.B * T if cfg.name != "vq_oco" else ctx.B * T
    if cfg.beta is not None and cfg.name != "vq_oco":
        bound = cfg.beta * ctx.B * T
    P_round = None
    for i, rnd in enumerate(stream):
        state, rec = step(state, rnd, cfg, ctx)
        loss[i] = rec.loss
        g[i] = rec.g_true
        beta[i] = rec.beta
        mu[i] = rec.mu
        alpha[i] = rec.alpha
        delta[i] = rec.delta
        branch[i] = BRANCH_CODE[rec.branch]
        flagged[i] = rec.flagged
        if P_round is None and rec.period is not None:
            P_round = rec.t
        if cfg.check_invariants and rec.mu_next > bound * (1 + 1e-9) + 1e-12:
            raise RunAbort(f"dual variable {rec.mu_next} exceeds growth bound {bound} at round {rec.t}")
    est = state.estimator
    # steady-state dual level; only monitored, since the transient has no usable constant
    mu_star = 4.0 * ctx.G * ctx.R * np.sqrt(T) / state.xi(ctx)
    above = int(np.sum(mu > mu_star))
    if above:
        log.debug("%s on %s: dual above %.3g in %d rounds", cfg.display_name, stream.name, mu_star, above)
    info = {
        "K_hat": est.K_hat if est else 0,
        "P_hat": est.P_hat if est else None,
        "P_round": P_round,
        "resets": int(np.sum(branch == BRANCH_CODE["reset"])),
        "periodic_corrections": int(np.sum(branch == BRANCH_CODE["periodic"])),
        "xi": state.xi(ctx),
        "mu_star": mu_star,
        "rounds_above_mu_star": above,
        "R": ctx.R, "G": ctx.G, "B": ctx.B, "H": ctx.H,
        "stream": stream.name,
        "fingerprint": stream.fingerprint(),
    }
    return RunTrace(loss=loss, g=g, beta=beta, mu=mu, branch=branch, alpha=alpha, delta=delta,
                    flagged=flagged, x_final=state.x.copy(), algorithm=cfg.display_name, info=info)
