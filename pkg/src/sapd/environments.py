"""Per-round loss/constraint streams for the synthetic scenario classes.

A :class:`Stream` stores a whole horizon as arrays (targets, constraint
coefficients, revealed and true budgets) so that every algorithm can replay
the identical sequence. Indexing a stream yields :class:`Round` objects with
1-based round numbers.
"""
from __future__ import annotations

import hashlib
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Optional

import numpy as np

from .core import BoxDomain, LinearConstraint, LinearLoss, QuadraticLoss

KINDS = ("smooth", "periodic", "sparse", "lower_bound", "dataset")
SMOOTH_MODES = ("incremental", "literal")


class ConfigError(ValueError):
    """Invalid scenario or algorithm configuration."""


@dataclass
class ScenarioConfig:
    """Synthetic scenario description.

    ``B0`` defaults to ``0.5 * d * target_std`` (1.5 for d=10). ``xi`` is the
    Slater margin the generator declares to the learners; ``None`` means the
    learners estimate it online.
    """

    kind: str = "smooth"
    T: int = 10_000
    d: int = 10
    delta_c: float = 1e-3
    period: int = 200
    K: int = 20
    drop_factor: float = 0.5
    drop_width: int = 80
    B0: Optional[float] = None
    amplitude: float = 0.3
    block: int = 500
    smooth_mode: str = "incremental"
    floor_frac: float = 0.05
    target_std: float = 0.3
    noise_sigma: float = 0.0
    seed: int = 0
    xi: Optional[float] = 0.15
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        self.validate()

    @property
    def base_budget(self) -> float:
        return 0.5 * self.d * self.target_std if self.B0 is None else float(self.B0)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.T < 1 or self.d < 1:
            raise ConfigError("T and d must be >= 1")
        if self.kind == "smooth":
            if self.delta_c < 0:
                raise ConfigError("delta_c must be >= 0")
            if self.smooth_mode not in SMOOTH_MODES:
                raise ConfigError(f"smooth_mode must be one of {SMOOTH_MODES}")
            if self.block < 1:
                raise ConfigError("block must be >= 1")
        if self.kind == "periodic" and self.period < 2:
            raise ConfigError("period must be >= 2")
        if self.kind == "sparse":
            if not 0 <= self.K <= self.T - 1:
                raise ConfigError("sparse K must satisfy 0 <= K <= T-1")
            if self.drop_width < 1:
                raise ConfigError("drop_width must be >= 1")
        if self.kind == "lower_bound" and self.K > self.T / 2:
            raise ConfigError(f"lower_bound requires K <= T/2, got K={self.K}, T={self.T}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.xi is not None and self.xi <= 0:
            raise ConfigError("xi must be > 0 when given")
        if self.lo >= self.hi:
            raise ConfigError("lo must be < hi")

    def scenario_id(self) -> str:
        """Short label identifying the stream-shaping parameters (not the seed)."""
        return f"{self.rng_key()}-s{self.noise_sigma:g}"

    def rng_key(self) -> str:
        """Seed key shared by every noise level, so noisy and clean streams pair up."""
        if self.kind == "smooth":
            tag = f"smooth-dc{self.delta_c:g}"
        elif self.kind == "periodic":
            tag = f"periodic-P{self.period}"
        elif self.kind in ("sparse", "lower_bound"):
            tag = f"{self.kind}-K{self.K}"
        else:
            tag = self.kind
        return f"{tag}-T{self.T}-d{self.d}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        data = dict(data)
        if "class" in data:
            data["kind"] = data.pop("class")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(
                f"unknown scenario keys {sorted(unknown)}; valid keys: {sorted(known)}"
            )
        return cls(**data)


@dataclass(frozen=True)
class Round:
    t: int
    loss: object
    constraint: LinearConstraint
    constraint_true: LinearConstraint


@dataclass(frozen=True)
class ProblemConstants:
    """Envelope constants of a stream.

    R is the box diameter, G bounds the loss gradient norm, H bounds the
    constraint gradient norm and B bounds both ``|g_t(x)|`` on the box and the
    per-round sup-distance.
    """

    R: float
    G: float
    H: float
    B: float


@dataclass(eq=False)
class Stream:
    """A materialized horizon of rounds.

    Attributes
    ----------
    loss_params : (T, d) array
        Quadratic targets, or linear coefficients when ``loss_kind == "linear"``.
    A : (T, d) array
        Constraint coefficients (noise never touches these).
    b, b_true : (T,) arrays
        Revealed and noiseless budgets.
    """

    domain: BoxDomain
    loss_kind: str
    loss_params: np.ndarray
    A: np.ndarray
    b: np.ndarray
    b_true: np.ndarray
    xi: Optional[float] = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T, d = self.loss_params.shape
        if self.A.shape != (T, d) or self.b.shape != (T,) or self.b_true.shape != (T,):
            raise ValueError("stream arrays have inconsistent shapes")
        if d != self.domain.dim:
            raise ValueError("stream dimension does not match the domain")
        if self.loss_kind not in ("quadratic", "linear"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        for arr in (self.loss_params, self.A, self.b, self.b_true):
            arr.setflags(write=False)

    @property
    def T(self) -> int:
        return self.b.shape[0]

    @property
    def d(self) -> int:
        return self.domain.dim

    def __len__(self) -> int:
        return self.T

    def loss_at(self, i: int):
        if self.loss_kind == "quadratic":
            return QuadraticLoss(self.loss_params[i])
        return LinearLoss(self.loss_params[i])

    def round(self, t: int) -> Round:
        """Round ``t`` (1-based)."""
        if not 1 <= t <= self.T:
            raise IndexError(f"round {t} outside 1..{self.T}")
        i = t - 1
        revealed = LinearConstraint(self.A[i], self.b[i])
        if self.b[i] == self.b_true[i]:
            true = revealed
        else:
            true = LinearConstraint(self.A[i], self.b_true[i])
        return Round(t, self.loss_at(i), revealed, true)

    def __getitem__(self, i: int) -> Round:
        if i < 0:
            i += self.T
        return self.round(i + 1)

    def __iter__(self) -> Iterator[Round]:
        for t in range(1, self.T + 1):
            yield self.round(t)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.loss_kind.encode())
        for arr in (self.domain.lo, self.domain.hi, self.loss_params, self.A, self.b, self.b_true):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def deltas(self, true: bool = False) -> np.ndarray:
        """Exact sup-distances between consecutive constraints, length T-1."""
        b = self.b_true if true else self.b
        return _consecutive_sup(self.A, b, self.domain)

    def constants(self) -> ProblemConstants:
        lo, hi = self.domain.lo, self.domain.hi
        R = self.domain.diameter
        if self.loss_kind == "quadratic":
            far = np.maximum(np.abs(hi - self.loss_params), np.abs(lo - self.loss_params))
            G = 2.0 * float(np.sqrt((far**2).sum(axis=1)).max())
        else:
            G = float(np.sqrt((self.loss_params**2).sum(axis=1)).max())
        H = float(np.sqrt((self.A**2).sum(axis=1)).max())
        top = np.maximum(self.A * hi, self.A * lo).sum(axis=1)
        bot = np.minimum(self.A * hi, self.A * lo).sum(axis=1)
        gmax = 0.0
        for b in (self.b, self.b_true):
            gmax = max(gmax, float(np.max(np.maximum(np.abs(top - b), np.abs(bot - b)))))
        dmax = float(self.deltas().max()) if self.T > 1 else 0.0
        return ProblemConstants(R=R, G=max(G, 1e-12), H=H, B=max(gmax, dmax))


def _consecutive_sup(A: np.ndarray, b: np.ndarray, domain: BoxDomain) -> np.ndarray:
    c = np.diff(A, axis=0)
    e = np.diff(b)
    ch = c * domain.hi
    cl = c * domain.lo
    upper = np.maximum(ch, cl).sum(axis=1) - e
    lower = e - np.minimum(ch, cl).sum(axis=1)
    return np.maximum(np.maximum(upper, lower), 0.0)


# ---------------------------------------------------------------- seeding

def stream_rng(master_seed: int, scenario_id: str, seed_index: int, lane: int = 0) -> np.random.Generator:
    """Counter-based generator for one (scenario, seed) pair.

    The key is ``(master_seed, crc32(scenario_id), seed_index, lane)``; lane 0
    draws loss targets and lane 1 draws measurement noise.
    """
    key = [int(master_seed), zlib.crc32(scenario_id.encode()), int(seed_index), int(lane)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


# ---------------------------------------------------------------- budgets

def smooth_budgets(T: int, B0: float, delta_c: float, block: int = 500,
                   mode: str = "incremental", floor_frac: float = 0.05) -> np.ndarray:
    """Budgets for rounds 1..T of the drifting class.

    ``incremental`` is a triangle wave that moves by ``delta_c`` per round and
    reverses every ``block`` rounds; ``literal`` evaluates
    ``B0 + delta_c * t * (-1)**(t // block)`` directly, which jumps at block
    boundaries.
    """
    t = np.arange(1, T + 1)
    if mode == "incremental":
        signs = np.where((np.arange(T) // block) % 2 == 0, 1.0, -1.0)
        B = B0 + delta_c * np.cumsum(signs)
    elif mode == "literal":
        B = B0 + delta_c * t * np.where((t // block) % 2 == 0, 1.0, -1.0)
    else:
        raise ConfigError(f"unknown smooth mode {mode!r}")
    return np.maximum(B, floor_frac * B0)


def periodic_budgets(T: int, B0: float, period: int, amplitude: float = 0.3) -> np.ndarray:
    # phase computed modulo the period so B[t + P] == B[t] bit-for-bit
    phase = np.arange(1, T + 1) % period
    return B0 + amplitude * np.sin(2.0 * np.pi * phase / period)


def change_points(T: int, K: int) -> np.ndarray:
    """Uniformly spaced change rounds ``floor(j T / (K + 1))`` for j = 1..K."""
    j = np.arange(1, K + 1)
    return (j * T) // (K + 1)


def sparse_budgets(T: int, B0: float, K: int, drop_factor: float = 0.5,
                   width: int = 80, high: Optional[float] = None) -> np.ndarray:
    """Budget ``high`` (default B0) with drops to ``drop_factor * B0`` on
    ``[tau_j, tau_j + width)`` for each change round ``tau_j``."""
    top = B0 if high is None else high
    B = np.full(T, float(top))
    low = drop_factor * B0
    for tau in change_points(T, K):
        B[tau - 1:min(tau - 1 + width, T)] = low
    return B


def drop_windows(T: int, K: int, width: int) -> list:
    """(start, end) rounds of each drop window, end exclusive and clipped to T+1."""
    return [(int(tau), int(min(tau + width, T + 1))) for tau in change_points(T, K)]


# ---------------------------------------------------------------- generators

def _targets(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    return np.abs(cfg.target_std * rng.standard_normal((cfg.T, cfg.d)))


def _build(cfg: ScenarioConfig, budgets: np.ndarray, master_seed: int, seed_index: Optional[int],
           meta: dict) -> Stream:
    sid = cfg.scenario_id()
    key = cfg.rng_key()
    idx = cfg.seed if seed_index is None else seed_index
    targets = _targets(cfg, stream_rng(master_seed, key, idx, lane=0))
    A = np.ones((cfg.T, cfg.d))
    b_true = budgets.astype(float)
    b = b_true.copy()
    if cfg.noise_sigma > 0:
        b = b_true + cfg.noise_sigma * stream_rng(master_seed, key, idx, lane=1).standard_normal(cfg.T)
    domain = BoxDomain.cube(cfg.d, cfg.lo, cfg.hi)
    return Stream(domain, "quadratic", targets, A, b, b_true, xi=cfg.xi,
                  name=f"{sid}#{idx}", meta=meta)


def gen_smooth(cfg: ScenarioConfig, master_seed: int = 0, seed_index: Optional[int] = None) -> Stream:
    B = smooth_budgets(cfg.T, cfg.base_budget, cfg.delta_c, cfg.block, cfg.smooth_mode, cfg.floor_frac)
    return _build(cfg, B, master_seed, seed_index, {"kind": "smooth", "delta_c": cfg.delta_c})


def gen_periodic(cfg: ScenarioConfig, master_seed: int = 0, seed_index: Optional[int] = None) -> Stream:
    B = periodic_budgets(cfg.T, cfg.base_budget, cfg.period, cfg.amplitude)
    B = np.maximum(B, cfg.floor_frac * cfg.base_budget)
    return _build(cfg, B, master_seed, seed_index, {"kind": "periodic", "period": cfg.period})


def gen_sparse(cfg: ScenarioConfig, master_seed: int = 0, seed_index: Optional[int] = None) -> Stream:
    B = sparse_budgets(cfg.T, cfg.base_budget, cfg.K, cfg.drop_factor, cfg.drop_width)
    B = np.maximum(B, cfg.floor_frac * cfg.base_budget)
    meta = {"kind": "sparse", "K": cfg.K,
            "windows": drop_windows(cfg.T, cfg.K, cfg.drop_width)}
    return _build(cfg, B, master_seed, seed_index, meta)


def gen_lower_bound(cfg: ScenarioConfig, master_seed: int = 0, seed_index: Optional[int] = None) -> Stream:
    """Adversarial alternating instance on [-1, 1].

    The horizon is split into K+1 segments of length ``floor(T / (K + 1))``
    (leftover rounds join the last segment). In segment j the loss is
    ``(-1)**j * x`` and the constraint ``(-1)**j * x - 1/2 <= 0``; ``x = 0`` is
    strictly feasible by 1/2 throughout.
    """
    if cfg.K > cfg.T / 2:
        raise ConfigError(f"lower_bound requires K <= T/2, got K={cfg.K}, T={cfg.T}")
    L = cfg.T // (cfg.K + 1)
    seg = np.minimum(np.arange(cfg.T) // L, cfg.K)
    sign = np.where(seg % 2 == 0, 1.0, -1.0)[:, None]
    b = np.full(cfg.T, 0.5)
    b_true = b.copy()
    if cfg.noise_sigma > 0:
        rng = stream_rng(master_seed, cfg.rng_key(), cfg.seed if seed_index is None else seed_index, 1)
        b = b_true + cfg.noise_sigma * rng.standard_normal(cfg.T)
    domain = BoxDomain(np.array([-1.0]), np.array([1.0]))
    starts = [int(j * L + 1) for j in range(1, cfg.K + 1)]
    return Stream(domain, "linear", sign.copy(), sign.copy(), b, b_true, xi=0.5,
                  name=f"{cfg.scenario_id()}#{seed_index or cfg.seed}",
                  meta={"kind": "lower_bound", "K": cfg.K, "segment_length": L,
                        "switches": starts})


GENERATORS = {
    "smooth": gen_smooth,
    "periodic": gen_periodic,
    "sparse": gen_sparse,
    "lower_bound": gen_lower_bound,
}


def generate(cfg: ScenarioConfig, master_seed: int = 0, seed_index: Optional[int] = None) -> Stream:
    if cfg.kind not in GENERATORS:
        raise ConfigError(f"no synthetic generator for kind {cfg.kind!r}")
    return GENERATORS[cfg.kind](cfg, master_seed, seed_index)


def inject_noise(rnd: Round, sigma: float, rng: np.random.Generator) -> Round:
    """Perturb the revealed budget by N(0, sigma^2); the true constraint is kept."""
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    if sigma == 0:
        return rnd
    noisy = LinearConstraint(rnd.constraint_true.a, rnd.constraint_true.b + sigma * rng.standard_normal())
    return Round(rnd.t, rnd.loss, noisy, rnd.constraint_true)


def slater_margin(stream: Stream, point: np.ndarray) -> float:
    """min over rounds of ``-g_t(point)`` on the true constraints."""
    return float(np.min(stream.b_true - stream.A @ point))
