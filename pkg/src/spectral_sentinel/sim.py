"""Synthetic federated training loop and the experiment drivers built on it."""
from __future__ import annotations

import enum
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .aggregators import AggKind, AggregateResult, AggregatorSpec, aggregate
from .attacks import AttackContext, AttackKind, AttackSpec, GRID_ATTACKS, generate
from .detector import (DetectionReport, DetectorConfig, LayeredGradients, Regime,
                       ThresholdTracker, calibrate_tau_ks, detect, detect_layerwise,
                       phase_regime)
from .errors import InvalidInput, SentinelError

DP_DELTA = 1e-5


class Task(str, enum.Enum):
    QUADRATIC = "quadratic"
    LOGISTIC = "logistic"


# -- honest gradient model

@dataclass
class HonestModel:
    """Per-client objectives F_i plus stochastic noise of coordinate std ``sigma``.

    Quadratic: F_i(w) = |w - w* - delta_i|^2 / 2 with the shifts centered over
    honest clients, so the population gradient is exactly w - w*.
    Logistic: each client holds 64 points drawn around its own feature shift.
    """

    task: Task
    d: int
    w_star: np.ndarray
    shifts: np.ndarray
    sigma: float
    sigma_het: float
    honest_ids: np.ndarray
    X: np.ndarray | None = None
    y: np.ndarray | None = None
    reg: float = 0.01

    @classmethod
    def build(cls, task, n: int, d: int, sigma: float, sigma_het: float, honest_ids,
              rng: np.random.Generator, points: int = 64) -> "HonestModel":
        task = Task(task)
        honest_ids = np.asarray(honest_ids, dtype=int)
        w_star = rng.standard_normal(d)
        shifts = sigma_het * rng.standard_normal((n, d))
        if task is Task.QUADRATIC:
            if len(honest_ids):
                shifts = shifts - shifts[honest_ids].mean(axis=0)
            return cls(task, d, w_star, shifts, sigma, sigma_het, honest_ids)
        X = (rng.standard_normal((n, points, d)) + shifts[:, None, :]) / math.sqrt(d)
        p = 1.0 / (1.0 + np.exp(-(X @ w_star)))
        y = (rng.random((n, points)) < p).astype(float)
        return cls(task, d, w_star, shifts, sigma, sigma_het, honest_ids, X, y)

    def client_gradient(self, i: int, w: np.ndarray) -> np.ndarray:
        if self.task is Task.QUADRATIC:
            return w - self.w_star - self.shifts[i]
        Xi = self.X[i]
        p = 1.0 / (1.0 + np.exp(-(Xi @ w)))
        return Xi.T @ (p - self.y[i]) / len(Xi) + self.reg * w

    def full_gradient(self, w: np.ndarray) -> np.ndarray:
        if self.task is Task.QUADRATIC:
            return w - self.w_star
        return np.mean([self.client_gradient(i, w) for i in self.honest_ids], axis=0)

    def loss(self, w: np.ndarray) -> float:
        if self.task is Task.QUADRATIC:
            r = w - self.w_star - self.shifts[self.honest_ids]
            return 0.5 * float(np.mean(np.sum(r * r, axis=1)))
        tot = 0.0
        for i in self.honest_ids:
            z = self.X[i] @ w
            tot += float(np.mean(np.logaddexp(0.0, z) - self.y[i] * z))
        return tot / len(self.honest_ids) + 0.5 * self.reg * float(w @ w)


def honest_gradients(model: HonestModel, w: np.ndarray, ids: Sequence[int],
                     rng: np.random.Generator) -> np.ndarray:
    """Rows grad F_i(w) + xi_i with xi ~ N(0, sigma^2 I), one per id."""
    ids = list(ids)
    G = np.array([model.client_gradient(i, w) for i in ids]).reshape(len(ids), model.d)
    if model.sigma > 0:
        G = G + model.sigma * rng.standard_normal(G.shape)
    return G


def dp_sigma(eps: float, clip: float, delta: float = DP_DELTA) -> float:
    return clip * math.sqrt(2.0 * math.log(1.25 / delta)) / eps


def dp_inject(G, eps: float, clip: float, rng: np.random.Generator,
              delta: float = DP_DELTA) -> np.ndarray:
    """Clip each row to norm ``clip`` and add Gaussian-mechanism noise."""
    if not eps > 0 or not clip > 0:
        raise InvalidInput("dp needs eps > 0 and clip > 0")
    G = np.asarray(G, dtype=float)
    norms = np.linalg.norm(G, axis=1, keepdims=True)
    out = G * np.minimum(1.0, clip / np.maximum(norms, 1e-300))
    if math.isinf(eps):
        return out
    return out + dp_sigma(eps, clip, delta) * rng.standard_normal(G.shape)


# -- configuration and state

@dataclass(frozen=True)
class ExperimentConfig:
    n: int = 50
    f_count: int = 10
    rounds: int = 50
    lr: float = 0.1
    lr_schedule: str = "constant"     # or "inv_sqrt_T": lr / sqrt(rounds)
    task: Task = Task.QUADRATIC
    d: int = 256
    sigma: float = 1.0
    sigma_het: float = 0.0
    aggregator: AggregatorSpec = field(default_factory=lambda: AggregatorSpec(AggKind.SENTINEL))
    attack: AttackSpec = field(default_factory=AttackSpec)
    tau_max: int = 0
    dp_eps: float | None = None
    dp_clip: float | None = None
    online_thresholds: bool = False
    layer_dims: tuple[int, ...] | None = None
    ledger_dir: str | None = None
    honest_only: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        if self.n < 1:
            raise InvalidInput("n must be >= 1")
        if not 0 <= self.f_count or not 2 * self.f_count < self.n:
            raise InvalidInput(f"need 0 <= f_count < n/2, got f={self.f_count}, n={self.n}")
        if not self.lr > 0:
            raise InvalidInput("lr must be > 0")
        if self.rounds < 1:
            raise InvalidInput("rounds must be >= 1")
        if self.tau_max < 0:
            raise InvalidInput("tau_max must be >= 0")
        if self.lr_schedule not in ("constant", "inv_sqrt_T"):
            raise InvalidInput(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.dp_eps is not None and not self.dp_eps > 0:
            raise InvalidInput("dp_eps must be > 0")
        if self.layer_dims is not None and sum(self.layer_dims) != self.d:
            raise InvalidInput("layer_dims must sum to d")

    @property
    def step_size(self) -> float:
        if self.lr_schedule == "inv_sqrt_T":
            return self.lr / math.sqrt(self.rounds)
        return self.lr

    @property
    def byz_ids(self) -> np.ndarray:
        return np.arange(self.n - self.f_count, self.n)

    @property
    def honest_ids(self) -> np.ndarray:
        return np.arange(self.n - self.f_count)


@dataclass
class RoundMetrics:
    round: int
    grad_norm2: float
    agg_error: float
    precision: float
    recall: float
    fpr: float
    n_flagged: int
    flagged: tuple[int, ...]
    loss: float
    regime: str
    sigma2_f2: float
    ks: float
    tau: float
    detected: bool
    n_present: int
    staleness: float
    failed: bool = False

    def row(self) -> dict[str, Any]:
        r = asdict(self)
        r["flagged"] = " ".join(str(i) for i in self.flagged)
        return r


ROUND_FIELDS = [f.name for f in RoundMetrics.__dataclass_fields__.values()]


class _Streams:
    """Independent RNG streams so e.g. async delays never perturb the data noise."""

    names = ("model", "noise", "attack", "shuffle", "delay", "dp")

    def __init__(self, seed: int):
        ss = np.random.SeedSequence(seed)
        for name, child in zip(self.names, ss.spawn(len(self.names))):
            setattr(self, name, np.random.default_rng(child))


@dataclass
class SimState:
    cfg: ExperimentConfig
    model: HonestModel
    w: np.ndarray
    streams: _Streams
    round: int = 0
    last_flagged: frozenset = frozenset()
    tracker: ThresholdTracker | None = None
    pending: list = field(default_factory=list)     # per client: list of (arrival, made, row)
    latest: dict = field(default_factory=dict)       # client -> (made, row)
    ledger: Any = None
    history: list = field(default_factory=list)


def init_state(cfg: ExperimentConfig) -> SimState:
    st = _Streams(cfg.seed)
    model = HonestModel.build(cfg.task, cfg.n, cfg.d, cfg.sigma, cfg.sigma_het,
                              cfg.honest_ids, st.model)
    state = SimState(cfg, model, np.zeros(cfg.d), st)
    state.pending = [[] for _ in range(cfg.n)]
    agg = cfg.aggregator
    if agg.kind is AggKind.SENTINEL and cfg.online_thresholds:
        det = agg.detector
        fallback = det.tau_ks or calibrate_tau_ks(cfg.n, cfg.d)
        state.tracker = ThresholdTracker(fallback, det.window)
    if cfg.ledger_dir is not None:
        from .ledger import Ledger
        state.ledger = Ledger(cfg.ledger_dir)
        state.ledger.register_batch([f"client-{i}" for i in range(cfg.n)], list(range(cfg.n)))
    return state


def _recall_precision(flagged: set, byz: set, present: set) -> tuple[float, float, float]:
    byz_p = byz & present
    hon_p = present - byz
    tp = len(flagged & byz_p)
    recall = tp / len(byz_p) if byz_p else 1.0
    precision = tp / len(flagged) if flagged else 1.0
    fpr = len(flagged & hon_p) / len(hon_p) if hon_p else 0.0
    return recall, precision, fpr


def _fresh_rows(state: SimState) -> dict[int, np.ndarray]:
    """This round's submissions keyed by client id.

    The attacker sees the honest rows before local DP noise; Byzantine rows
    are never clipped or noised.
    """
    cfg, st = state.cfg, state.streams
    hon = cfg.honest_ids
    H = honest_gradients(state.model, state.w, hon, st.noise)
    B = None
    if not cfg.honest_only and cfg.f_count > 0:
        byz = cfg.byz_ids
        own = honest_gradients(state.model, state.w, byz, st.noise)
        det = (cfg.aggregator.detector if cfg.aggregator.kind is AggKind.SENTINEL
               else DetectorConfig())
        ctx = AttackContext.from_honest(H, len(byz), st.attack, own=own, detector=det,
                                        round=state.round)
        B = generate(cfg.attack, ctx)
    if cfg.dp_eps is not None:
        clip = cfg.dp_clip or float(np.median(np.linalg.norm(H, axis=1)))
        H = dp_inject(H, cfg.dp_eps, clip, st.dp)
    rows = {int(i): H[j] for j, i in enumerate(hon)}
    if B is not None:
        rows.update({int(i): B[j] for j, i in enumerate(cfg.byz_ids)})
    return rows


def _available(state: SimState, rows: dict[int, np.ndarray]) -> dict[int, tuple[int, np.ndarray]]:
    """Queue this round's rows behind per-client delays; return the newest arrived ones."""
    cfg, t = state.cfg, state.round
    ids = sorted(rows)
    delays = state.streams.delay.integers(0, cfg.tau_max + 1, size=len(ids))
    for i, dl in zip(ids, delays):
        state.pending[i].append((t + int(dl), t, rows[i]))
    for i in ids:
        keep = []
        for arrival, made, row in state.pending[i]:
            if arrival <= t:
                if i not in state.latest or state.latest[i][0] < made:
                    state.latest[i] = (made, row)
            else:
                keep.append((arrival, made, row))
        state.pending[i] = keep
    return dict(state.latest)


def _sentinel(state: SimState, G: np.ndarray, ids: np.ndarray):
    """Sentinel aggregation with detection period, online tau and layer split."""
    cfg = state.cfg
    det = cfg.aggregator.detector
    period = det.detection_period
    if state.round % period != 0:
        keep = [j for j, i in enumerate(ids) if int(i) not in state.last_flagged]
        if not keep:
            keep = list(range(len(ids)))
        return G[keep].mean(axis=0), None, False
    if state.tracker is not None:
        det = replace(det, tau_ks=state.tracker.tau)
    if cfg.layer_dims is not None and det.layerwise:
        rep = detect_layerwise(LayeredGradients.split(G, cfg.layer_dims), det)
    else:
        rep = detect(G, det)
    if state.tracker is not None:
        state.tracker.observe(rep.ks)
    state.last_flagged = frozenset(int(ids[j]) for j in rep.flagged)
    if not rep.honest:
        return np.median(G, axis=0), rep, True
    return G[list(rep.honest)].mean(axis=0), rep, True


def run_round(state: SimState) -> tuple[SimState, RoundMetrics]:
    cfg, st = state.cfg, state.streams
    t = state.round
    rows = _fresh_rows(state)
    avail = _available(state, rows)
    ids = np.array(sorted(avail), dtype=int)
    ids = ids[st.shuffle.permutation(len(ids))]
    G = np.array([avail[int(i)][1] for i in ids]).reshape(len(ids), cfg.d)
    staleness = float(np.mean([t - avail[int(i)][0] for i in ids])) if len(ids) else 0.0
    byz = set(int(i) for i in cfg.byz_ids) if not cfg.honest_only else set()
    present = set(int(i) for i in ids)
    hon_mask = np.array([int(i) not in byz for i in ids], bool)
    failed, rep, detected = False, None, False
    try:
        if len(ids) == 0:
            raise InvalidInput("no submissions available")
        if cfg.aggregator.kind is AggKind.SENTINEL:
            g, rep, detected = _sentinel(state, G, ids)
        else:
            spec = cfg.aggregator
            if spec.f is None and spec.kind in (AggKind.KRUM, AggKind.MULTIKRUM, AggKind.BULYAN):
                spec = replace(spec, f=cfg.f_count if not cfg.honest_only else 0)
            g = aggregate(G, spec).gradient
        if not np.all(np.isfinite(g)):
            raise InvalidInput("aggregate is not finite")
    except (SentinelError, ValueError, FloatingPointError):
        failed = True
    if state.ledger is not None and len(ids):
        _ledger_commit(state, ids, G, None if failed else g)
    if not failed:
        state.w = state.w - cfg.step_size * g
        err = float(np.sum((g - G[hon_mask].mean(axis=0)) ** 2)) if hon_mask.any() else 0.0
    else:
        err = float("nan")
    flagged = set(int(ids[j]) for j in rep.flagged) if rep is not None else (
        set(state.last_flagged) if cfg.aggregator.kind is AggKind.SENTINEL else set())
    recall, precision, fpr = _recall_precision(flagged, byz, present)
    grad = state.model.full_gradient(state.w)
    m = RoundMetrics(
        round=t, grad_norm2=float(grad @ grad), agg_error=err, precision=precision,
        recall=recall, fpr=fpr, n_flagged=len(flagged), flagged=tuple(sorted(flagged)),
        loss=state.model.loss(state.w),
        regime=(rep.regime.value if rep is not None else ""),
        sigma2_f2=(rep.sigma2_f2 if rep is not None else float("nan")),
        ks=(rep.ks.statistic if rep is not None else float("nan")),
        tau=(rep.ks.threshold if rep is not None else float("nan")),
        detected=detected, n_present=len(ids), staleness=staleness, failed=failed)
    state.round += 1
    state.history.append(m)
    return state, m


def _ledger_commit(state: SimState, ids, G, g):
    from .ledger import canonical_bytes, commit_hash
    L = state.ledger
    r = L.start_round()
    for j, i in enumerate(ids):
        data = canonical_bytes(r, int(i), G[j])
        L.store_blob(data)
        L.submit_update(f"client-{int(i)}", commit_hash(data))
    agg = g if g is not None else np.zeros(G.shape[1])
    L.finalize_round(commit_hash(canonical_bytes(r, 2 ** 64 - 1, agg)))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list[RoundMetrics]
    seconds: float

    def summary(self) -> dict[str, Any]:
        ms = self.metrics
        det = [m for m in ms if m.detected]
        ok = [m for m in ms if not m.failed]
        return {
            "rounds": len(ms),
            "failed_rounds": sum(m.failed for m in ms),
            "final_grad_norm2": ms[-1].grad_norm2,
            "min_grad_norm2": min(m.grad_norm2 for m in ms),
            "final_loss": ms[-1].loss,
            "mean_agg_error": float(np.mean([m.agg_error for m in ok])) if ok else float("nan"),
            "detection_rate": float(np.mean([m.recall for m in det])) if det else float("nan"),
            "fpr": float(np.mean([m.fpr for m in det])) if det else float("nan"),
            "precision": float(np.mean([m.precision for m in det])) if det else float("nan"),
            "detections": len(det),
        }


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    t0 = time.perf_counter()
    state = init_state(cfg)
    for _ in range(cfg.rounds):
        state, _ = run_round(state)
    return ExperimentResult(cfg, state.history, time.perf_counter() - t0)


def run_async(cfg: ExperimentConfig, tau_max: int) -> ExperimentResult:
    return run_experiment(replace(cfg, tau_max=tau_max))


def clean_baseline(cfg: ExperimentConfig) -> ExperimentConfig:
    """FedAvg over the honest population only (no Byzantine submissions)."""
    return replace(cfg, honest_only=True, aggregator=AggregatorSpec(AggKind.MEAN))


# -- detection-only rounds

@dataclass
class DetectionOutcome:
    recall: float
    fpr: float
    precision: float
    report: DetectionReport


def synthetic_detection(n: int, d: int, f: float, sigma: float, attack: AttackSpec,
                        cfg: DetectorConfig, rng: np.random.Generator,
                        dp_eps: float | None = None, dp_clip: float | None = None,
                        mu: np.ndarray | None = None) -> DetectionOutcome:
    """One round: honest rows mu + sigma z with mu ~ N(0, I), attack rows appended, shuffled."""
    nb = int(round(f * n))
    nh = n - nb
    if mu is None:
        mu = rng.standard_normal(d)
    H = mu + sigma * rng.standard_normal((nh, d))
    ctx = AttackContext.from_honest(H, nb, rng, detector=cfg)
    B = generate(attack, ctx) if nb else np.zeros((0, d))
    if dp_eps is not None:
        clip = dp_clip or float(np.median(np.linalg.norm(H, axis=1)))
        H = dp_inject(H, dp_eps, clip, rng)
    G = np.vstack([H, B])
    perm = rng.permutation(n)
    G = G[perm]
    is_byz = perm >= nh
    rep = detect(G, cfg)
    flagged = np.zeros(n, bool)
    flagged[list(rep.flagged)] = True
    tp = int(np.sum(flagged & is_byz))
    recall = tp / nb if nb else 1.0
    fpr = float(np.sum(flagged & ~is_byz)) / nh
    precision = tp / int(flagged.sum()) if flagged.any() else 1.0
    return DetectionOutcome(recall, fpr, precision, rep)


def detection_rate(n, d, f, sigma, attack, cfg, seeds: int, seed: int = 0, **kw) -> dict:
    rs, fs = [], []
    for s in range(seeds):
        rng = np.random.default_rng([seed, s])
        out = synthetic_detection(n, d, f, sigma, attack, cfg, rng, **kw)
        rs.append(out.recall)
        fs.append(out.fpr)
    return {"detection_rate": float(np.mean(rs)), "fpr": float(np.mean(fs)),
            "seeds": seeds}


TABLE1_POINTS = ((0.10, 0.0026), (0.20, 0.0176), (0.30, 0.0250), (0.40, 0.0338),
                 (0.49, 0.0556))


def sigma_for(sigma2_f2: float, f: float) -> float:
    return math.sqrt(sigma2_f2) / f


def detection_table(seeds: int = 200, n: int = 100, d: int = 1000, alpha: float = 10.0,
                    cfg: DetectorConfig | None = None, seed: int = 0,
                    points=TABLE1_POINTS) -> list[dict]:
    cfg = cfg or DetectorConfig()
    out = []
    for f, s2f2 in points:
        r = detection_rate(n, d, f, sigma_for(s2f2, f),
                           AttackSpec(AttackKind.SIGN_FLIP, alpha=alpha), cfg, seeds, seed)
        out.append({"f": f, "sigma2f2": s2f2, **r})
    return out


PHASE_GRID = (0.01, 0.03, 0.05, 0.08, 0.10, 0.12, 0.15, 0.18, 0.22, 0.24,
              0.26, 0.28, 0.30, 0.32, 0.35)


def phase_sweep(points=PHASE_GRID, seeds: int = 200, n: int = 512, d: int = 2048,
                f: float = 0.4, bias: float = 0.5, cfg: DetectorConfig | None = None,
                seed: int = 0) -> list[dict]:
    """Moment-matched adversary across sigma^2 f^2 at fixed f."""
    cfg = cfg or DetectorConfig()
    out = []
    for x in points:
        sigma = sigma_for(x, f)
        r = detection_rate(n, d, f, sigma, AttackSpec(AttackKind.MOMENT_MATCHED, bias=bias,
                                                      seed=seed), cfg, seeds, seed)
        regime, _ = phase_regime(sigma, f)
        out.append({"sigma2f2": x, "detection_rate": r["detection_rate"], "fpr": r["fpr"],
                    "regime": regime.value})
    return out


def dp_comparison(sigma2_f2: float = 0.30, eps: float = 8.0, seeds: int = 100, n: int = 100,
                  d: int = 1000, f: float = 0.3, bias: float = 0.5,
                  cfg: DetectorConfig | None = None, seed: int = 0) -> dict:
    cfg = cfg or DetectorConfig()
    sigma = sigma_for(sigma2_f2, f)
    atk = AttackSpec(AttackKind.MOMENT_MATCHED, bias=bias, seed=seed)
    base = detection_rate(n, d, f, sigma, atk, cfg, seeds, seed)
    dp = detection_rate(n, d, f, sigma, atk, cfg, seeds, seed, dp_eps=eps)
    return {"sigma2f2": sigma2_f2, "eps": eps, "no_dp": base["detection_rate"],
            "dp": dp["detection_rate"], "no_dp_fpr": base["fpr"], "dp_fpr": dp["fpr"]}


# -- training-loop suites

STANDARD_ATTACKS = (AttackKind.SIGN_FLIP, AttackKind.ALIE, AttackKind.IPM,
                    AttackKind.GAUSSIAN, AttackKind.LABEL_FLIP, AttackKind.MIN_MAX)


def standard_config(**kw) -> ExperimentConfig:
    base = dict(n=50, f_count=10, rounds=30, lr=0.1, d=256, sigma=1.0, sigma_het=0.0)
    base.update(kw)
    return ExperimentConfig(**base)


def suite_detection(base: ExperimentConfig, attacks=STANDARD_ATTACKS, seeds: int = 3) -> dict:
    """Mean recall / FPR of the Sentinel over attacks and seeds on the training loop."""
    rows = []
    for a in attacks:
        for s in range(seeds):
            cfg = replace(base, attack=replace(base.attack, kind=a, seed=s), seed=s)
            summ = run_experiment(cfg).summary()
            rows.append({"attack": AttackKind(a).value, "seed": s, **summ})
    rates = [r["detection_rate"] for r in rows if not math.isnan(r["detection_rate"])]
    fprs = [r["fpr"] for r in rows if not math.isnan(r["fpr"])]
    return {"detection_rate": float(np.mean(rates)) if rates else float("nan"),
            "fpr": float(np.mean(fprs)) if fprs else float("nan"),
            "final_grad_norm2": float(np.mean([r["final_grad_norm2"] for r in rows])),
            "cells": rows}


GRID_AGGREGATORS = (AggKind.SENTINEL,) + tuple(k for k in AggKind if k is not AggKind.SENTINEL)


def attack_grid(base: ExperimentConfig, attacks=GRID_ATTACKS, aggregators=GRID_AGGREGATORS,
                seeds: int = 2) -> list[dict]:
    """Final grad-norm metric for every (attack, aggregator) cell, seed-averaged."""
    out = []
    for a in attacks:
        for k in aggregators:
            vals, det, failed, err = [], [], 0, ""
            for s in range(seeds):
                cfg = replace(base, seed=s, attack=replace(base.attack, kind=a, seed=s),
                              aggregator=replace(base.aggregator, kind=k))
                try:
                    summ = run_experiment(cfg).summary()
                except SentinelError as exc:
                    failed += 1
                    err = str(exc)
                    continue
                failed += summ["failed_rounds"] > 0
                vals.append(summ["final_grad_norm2"])
                if not math.isnan(summ["detection_rate"]):
                    det.append(summ["detection_rate"])
            out.append({"attack": AttackKind(a).value, "aggregator": AggKind(k).value,
                        "final_grad_norm2": float(np.mean(vals)) if vals else float("nan"),
                        "detection_rate": float(np.mean(det)) if det else float("nan"),
                        "failed": failed, "error": err})
    return out


def grid_means(rows: list[dict]) -> dict[str, float]:
    by: dict[str, list[float]] = {}
    for r in rows:
        by.setdefault(r["aggregator"], []).append(r["final_grad_norm2"])
    return {k: float(np.mean(v)) for k, v in by.items()}
