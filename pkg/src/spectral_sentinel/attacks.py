"""Gradient-space Byzantine attacks.

Each attack maps an :class:`AttackContext` to an ``(n_byz, d)`` array of rows.
Attacks declared with honest-stats knowledge only read ``mu``, ``s`` and the
visible honest rows; detector-aware attacks additionally read ``detector``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from .detector import DetectorConfig, would_trigger
from .errors import InvalidInput


class AttackKind(str, enum.Enum):
    NONE = "none"
    SIGN_FLIP = "sign_flip"
    ALIE = "alie"
    IPM = "ipm"
    MIN_MAX = "min_max"
    FALL_OF_EMPIRES = "fall_of_empires"
    LABEL_FLIP = "label_flip"
    ZERO = "zero"
    GAUSSIAN = "gaussian"
    MODEL_POISON = "model_poison"
    BACKDOOR = "backdoor"
    ADAPTIVE = "adaptive"
    NASH = "nash"
    MOMENT_MATCHED = "moment_matched"


class Knowledge(str, enum.Enum):
    HONEST_STATS = "honest-stats"
    FULL_DETECTOR = "full-detector"


DETECTOR_AWARE = frozenset({AttackKind.ADAPTIVE, AttackKind.NASH})

# the twelve attacks of the comparison grid
GRID_ATTACKS: tuple[AttackKind, ...] = (
    AttackKind.SIGN_FLIP, AttackKind.ALIE, AttackKind.IPM, AttackKind.MIN_MAX,
    AttackKind.FALL_OF_EMPIRES, AttackKind.LABEL_FLIP, AttackKind.ZERO,
    AttackKind.GAUSSIAN, AttackKind.MODEL_POISON, AttackKind.BACKDOOR,
    AttackKind.ADAPTIVE, AttackKind.NASH)


@dataclass(frozen=True)
class AttackSpec:
    """Attack kind plus strength parameters (unused ones are ignored).

    ``None`` strengths pick data-driven defaults documented on each attack.
    """

    kind: AttackKind = AttackKind.NONE
    alpha: float = 10.0
    z: float | None = None
    eps: float | None = None
    lam: float = 1.0
    noise: float | None = None
    drift: float | None = None
    mask_frac: float = 0.05
    target: float | None = None
    bias: float = 0.5
    mc_samples: int = 32
    grid_points: int = 5
    iterations: int = 50
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        for name in ("alpha", "lam", "mask_frac", "bias"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InvalidInput(f"{name} must be finite")
        if self.alpha <= 0:
            raise InvalidInput("alpha must be > 0")
        if self.lam < 0:
            raise InvalidInput("lambda must be >= 0")
        if self.mc_samples < 1 or self.grid_points < 2 or self.iterations < 1:
            raise InvalidInput("mc_samples >= 1, grid_points >= 2, iterations >= 1")

    @property
    def knowledge(self) -> Knowledge:
        return Knowledge.FULL_DETECTOR if self.kind in DETECTOR_AWARE else Knowledge.HONEST_STATS


@dataclass
class AttackContext:
    """What the adversary sees in one round.

    ``honest`` holds the honest rows visible to the attacker, ``own`` the
    gradients the Byzantine clients would have sent if honest.
    """

    mu: np.ndarray
    s: np.ndarray
    n_byz: int
    n_honest: int
    rng: np.random.Generator
    honest: np.ndarray | None = None
    own: np.ndarray | None = None
    detector: DetectorConfig | None = None
    round: int = 0

    @classmethod
    def from_honest(cls, H: np.ndarray, n_byz: int, rng, **kw) -> "AttackContext":
        H = np.asarray(H, dtype=float)
        return cls(mu=H.mean(axis=0), s=H.std(axis=0), n_byz=n_byz, n_honest=len(H),
                   rng=rng, honest=H, **kw)

    @property
    def d(self) -> int:
        return len(self.mu)

    @property
    def n(self) -> int:
        return self.n_byz + self.n_honest

    def tile(self, v) -> np.ndarray:
        return np.tile(np.asarray(v, dtype=float), (self.n_byz, 1))


def _unit(v: np.ndarray) -> np.ndarray:
    nv = float(np.linalg.norm(v))
    return v / nv if nv > 0 else np.zeros_like(v)


def _fixed_rng(spec: AttackSpec, tag: int) -> np.random.Generator:
    """Stream that depends on the attack seed only, so it is fixed across rounds."""
    return np.random.default_rng([spec.seed, tag])


# -- simple attacks

def attack_none(ctx: AttackContext) -> np.ndarray:
    if ctx.own is not None:
        return np.array(ctx.own, dtype=float)
    return ctx.mu + ctx.s * ctx.rng.standard_normal((ctx.n_byz, ctx.d))


def attack_sign_flip(ctx: AttackContext, alpha: float = 10.0) -> np.ndarray:
    if alpha <= 0:
        raise InvalidInput("alpha must be > 0")
    return ctx.tile(-alpha * ctx.mu)


def alie_z(n: int, f: int) -> float:
    """Classical ALIE z_max = Phi^-1((n - f - s) / (n - f)), s = floor(n/2) + 1 - f."""
    s = n // 2 + 1 - f
    p = (n - f - s) / (n - f)
    return float(norm.ppf(min(max(p, 1e-12), 1 - 1e-12)))


def attack_alie(ctx: AttackContext, z: float | None = None) -> np.ndarray:
    if z is None:
        z = max(alie_z(ctx.n, ctx.n_byz), 0.0)
    if z < 0:
        raise InvalidInput("z must be >= 0")
    return ctx.tile(ctx.mu - z * ctx.s)


def attack_ipm(ctx: AttackContext, eps: float | None = None) -> np.ndarray:
    eps = 2.0 if eps is None else eps
    if eps <= 0:
        raise InvalidInput("eps must be > 0")
    return ctx.tile(-eps * ctx.mu)


def attack_fall_of_empires(ctx: AttackContext, eps: float | None = None) -> np.ndarray:
    eps = 0.1 if eps is None else eps
    if eps <= 0:
        raise InvalidInput("eps must be > 0")
    return ctx.tile(-eps * ctx.mu)


def attack_zero(ctx: AttackContext) -> np.ndarray:
    return np.zeros((ctx.n_byz, ctx.d))


def attack_gauss(ctx: AttackContext, noise: float | None = None) -> np.ndarray:
    """mu + N(0, noise^2 I); default noise is 10x the rms honest std."""
    if noise is None:
        noise = 10.0 * float(np.sqrt(np.mean(ctx.s ** 2)))
    if noise < 0:
        raise InvalidInput("noise must be >= 0")
    return ctx.mu + noise * ctx.rng.standard_normal((ctx.n_byz, ctx.d))


def label_flip_mask(d: int, spec: AttackSpec) -> np.ndarray:
    m = np.zeros(d, bool)
    m[_fixed_rng(spec, 1).permutation(d)[: d // 2]] = True
    return m


def attack_label_flip_surrogate(ctx: AttackContext, mask: np.ndarray) -> np.ndarray:
    return ctx.tile(np.where(mask, -ctx.mu, ctx.mu))


def poison_direction(d: int, spec: AttackSpec) -> np.ndarray:
    return _unit(_fixed_rng(spec, 2).standard_normal(d))


def attack_model_poison_surrogate(ctx: AttackContext, u: np.ndarray,
                                  drift: float | None = None) -> np.ndarray:
    """mu + drift * u for a unit u fixed across rounds; default drift = 5 ||s||."""
    if drift is None:
        drift = 5.0 * float(np.linalg.norm(ctx.s))
    return ctx.tile(ctx.mu + drift * u)


def backdoor_mask(d: int, spec: AttackSpec) -> np.ndarray:
    k = max(1, int(round(spec.mask_frac * d)))
    return np.sort(_fixed_rng(spec, 3).permutation(d)[:k])


def attack_backdoor_surrogate(ctx: AttackContext, mask, target=None) -> np.ndarray:
    """mu with the masked coordinates set to target (default mu + 20 s there)."""
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (ctx.d,):
            raise InvalidInput("boolean mask must have length d")
        mask = np.flatnonzero(mask)
    mask = mask.astype(int)
    if len(mask) and (mask.min() < 0 or mask.max() >= ctx.d):
        raise InvalidInput(f"mask index out of range for d={ctx.d}")
    row = ctx.mu.copy()
    if target is None:
        row[mask] = ctx.mu[mask] + 20.0 * ctx.s[mask]
    else:
        row[mask] = target
    return ctx.tile(row)


def min_max_gamma(H: np.ndarray, mu: np.ndarray, p: np.ndarray, tol: float = 1e-6) -> float:
    """Largest gamma with max_i ||mu + gamma p - h_i|| <= max pairwise honest distance."""
    if len(H) < 2 or not np.any(p):
        return 0.0
    sq = np.sum(H * H, axis=1)
    bound = math.sqrt(max(float(np.max(sq[:, None] + sq[None, :] - 2 * H @ H.T)), 0.0))
    if bound == 0.0:
        return 0.0

    def ok(g):
        return float(np.max(np.linalg.norm(mu + g * p - H, axis=1))) <= bound

    lo, hi = 0.0, 1.0
    while ok(hi):
        lo, hi = hi, 2 * hi
    # feasible set is an interval [0, gamma*] (convex distance, feasible at 0)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def attack_min_max(ctx: AttackContext) -> np.ndarray:
    if ctx.honest is None or len(ctx.honest) == 0:
        raise InvalidInput("min-max needs visible honest rows")
    H = ctx.honest
    mu = H.mean(axis=0)
    p = -_unit(mu)
    return ctx.tile(mu + min_max_gamma(H, mu, p) * p)


def attack_moment_matched(ctx: AttackContext, bias: float = 0.5,
                          u: np.ndarray | None = None, sigma: float | None = None) -> np.ndarray:
    """Honest-law rows shifted along a sign vector u by max(0, bias/f - sigma).

    The aggregate mean moves by ``bias`` per coordinate when the shift is
    active. Once sigma * f >= bias the shift vanishes and the rows are
    exact draws from the honest law.
    """
    if sigma is None:
        sigma = float(np.sqrt(np.mean(ctx.s ** 2)))
    f = ctx.n_byz / ctx.n
    if u is None:
        u = ctx.rng.choice([-1.0, 1.0], size=ctx.d)
    shift = max(0.0, bias / f - sigma) if f > 0 else 0.0
    return ctx.mu + sigma * ctx.rng.standard_normal((ctx.n_byz, ctx.d)) + shift * u


# -- detector-aware attacks

def _require_detector(ctx: AttackContext) -> DetectorConfig:
    if ctx.detector is None or ctx.honest is None:
        raise InvalidInput("detector-aware attack needs the detector config and honest rows")
    return ctx.detector


def _triggers(honest: np.ndarray, byz: np.ndarray, cfg: DetectorConfig) -> bool:
    return would_trigger(np.vstack([honest, byz]), cfg)


def attack_adaptive_spectral(ctx: AttackContext, iterations: int = 50) -> np.ndarray:
    """Push rows along -mu as far as the detector allows.

    Rows are mu + s*z_i + t R (-mu/|mu|) with R = ||s||; t in [0, 1] is found
    by bisection on the detector's own trigger. Returns mu when even t = 0
    triggers.
    """
    cfg = _require_detector(ctx)
    H = ctx.honest
    z = ctx.rng.standard_normal((ctx.n_byz, ctx.d))
    base = ctx.mu + ctx.s * z
    R = float(np.linalg.norm(ctx.s))
    p = -_unit(ctx.mu)

    def rows(t):
        return base + (t * R) * p

    if not _triggers(H, rows(1.0), cfg):
        return rows(1.0)
    if _triggers(H, rows(0.0), cfg):
        return ctx.tile(ctx.mu)
    lo, hi = 0.0, 1.0
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if _triggers(H, rows(mid), cfg):
            hi = mid
        else:
            lo = mid
    out = rows(lo)
    assert not _triggers(H, out, cfg), "adaptive attack left the feasible set"
    return out


def nash_path(ctx: AttackContext, z: np.ndarray, R: float):
    p = -_unit(ctx.mu)
    target = R * p

    def rows(t):
        return ctx.mu + (1.0 - t) * (ctx.s * z) + t * (target - ctx.mu)
    return rows


def attack_nash(ctx: AttackContext, lam: float = 0.0, mc_samples: int = 32,
                grid_points: int = 5, iterations: int = 50) -> np.ndarray:
    """Rational attacker trading damage against detection probability.

    Rows follow g(t) = mu + (1-t) s*z + t(-R mu/|mu| - mu), so t = 1 is the
    norm-box boundary R = sigma sqrt(d) along -mu and t = 0 is camouflage.
    Objective: mean ||g - mu||^2 / R^2 - lam * P(t), with P(t) estimated by
    Monte-Carlo over resampled honest rows on a fixed t-grid and linearly
    interpolated; maximized by projected gradient ascent with finite
    differences.
    """
    if lam < 0:
        raise InvalidInput("lambda must be >= 0")
    sigma = float(np.sqrt(np.mean(ctx.s ** 2)))
    R = sigma * math.sqrt(ctx.d)
    z = ctx.rng.standard_normal((ctx.n_byz, ctx.d))
    rows = nash_path(ctx, z, R)
    scale = R * R if R > 0 else 1.0

    def damage(t):
        return float(np.mean(np.sum((rows(t) - ctx.mu) ** 2, axis=1))) / scale

    if lam == 0.0:
        return rows(1.0)
    cfg = _require_detector(ctx)
    grid = np.linspace(0.0, 1.0, grid_points)
    P = np.zeros(grid_points)
    mc = np.random.default_rng(ctx.rng.integers(2 ** 63))
    for _ in range(mc_samples):
        Hs = ctx.mu + ctx.s * mc.standard_normal((ctx.n_honest, ctx.d))
        for j, t in enumerate(grid):
            P[j] += _triggers(Hs, rows(t), cfg)
    P /= mc_samples

    def obj(t):
        return damage(t) - lam * float(np.interp(t, grid, P))

    # start from the best grid point, then refine by projected ascent
    t = float(grid[int(np.argmax([obj(g) for g in grid]))])
    step, h = 0.1, 1e-3
    for _ in range(iterations):
        g = (obj(min(t + h, 1.0)) - obj(max(t - h, 0.0))) / (min(t + h, 1.0) - max(t - h, 0.0))
        cand = min(max(t + step * g, 0.0), 1.0)
        if obj(cand) >= obj(t):
            t = cand
        else:
            step *= 0.5
    return rows(t)


# -- dispatch

def generate(spec: AttackSpec, ctx: AttackContext) -> np.ndarray:
    """Byzantine rows for one round."""
    if ctx.n_byz == 0:
        return np.zeros((0, ctx.d))
    k = spec.kind
    if spec.knowledge is Knowledge.HONEST_STATS:
        # knowledge firewall: honest-stats attacks never see the detector
        ctx = AttackContext(ctx.mu, ctx.s, ctx.n_byz, ctx.n_honest, ctx.rng,
                            honest=ctx.honest, own=ctx.own, detector=None, round=ctx.round)
    table: dict[AttackKind, Callable[[], np.ndarray]] = {
        AttackKind.NONE: lambda: attack_none(ctx),
        AttackKind.SIGN_FLIP: lambda: attack_sign_flip(ctx, spec.alpha),
        AttackKind.ALIE: lambda: attack_alie(ctx, spec.z),
        AttackKind.IPM: lambda: attack_ipm(ctx, spec.eps),
        AttackKind.MIN_MAX: lambda: attack_min_max(ctx),
        AttackKind.FALL_OF_EMPIRES: lambda: attack_fall_of_empires(ctx, spec.eps),
        AttackKind.LABEL_FLIP: lambda: attack_label_flip_surrogate(ctx, label_flip_mask(ctx.d, spec)),
        AttackKind.ZERO: lambda: attack_zero(ctx),
        AttackKind.GAUSSIAN: lambda: attack_gauss(ctx, spec.noise),
        AttackKind.MODEL_POISON: lambda: attack_model_poison_surrogate(
            ctx, poison_direction(ctx.d, spec), spec.drift),
        AttackKind.BACKDOOR: lambda: attack_backdoor_surrogate(
            ctx, backdoor_mask(ctx.d, spec), spec.target),
        AttackKind.ADAPTIVE: lambda: attack_adaptive_spectral(ctx, spec.iterations),
        AttackKind.NASH: lambda: attack_nash(ctx, spec.lam, spec.mc_samples, spec.grid_points,
                                             spec.iterations),
        AttackKind.MOMENT_MATCHED: lambda: attack_moment_matched(
            ctx, spec.bias, _fixed_rng(spec, 4).choice([-1.0, 1.0], size=ctx.d)),
    }
    return np.asarray(table[k](), dtype=float)
