import math
from dataclasses import replace

import numpy as np
import pytest

from spectral_sentinel.aggregators import AggKind, AggregatorSpec, aggregate
from spectral_sentinel.attacks import AttackContext, AttackKind, AttackSpec, attack_moment_matched
from spectral_sentinel.detector import DetectorConfig
from spectral_sentinel.errors import InvalidInput
from spectral_sentinel.ledger import Ledger
from spectral_sentinel.sim import (ExperimentConfig, HonestModel, clean_baseline, dp_inject,
                                   dp_sigma, honest_gradients, init_state, run_async,
                                   run_experiment, run_round, sigma_for, standard_config,
                                   synthetic_detection)

MEAN = AggregatorSpec(AggKind.MEAN)


def test_noiseless_rows_are_exact():
    r = np.random.default_rng(0)
    m = HonestModel.build("quadratic", 6, 5, 0.0, 0.0, range(6), r)
    w = r.normal(size=5)
    G = honest_gradients(m, w, range(6), r)
    np.testing.assert_array_equal(G, np.tile(w - m.w_star, (6, 1)))


def test_noise_variance_monte_carlo():
    r = np.random.default_rng(1)
    m = HonestModel.build("quadratic", 4, 8, 1.5, 0.0, range(4), r)
    G = honest_gradients(m, np.zeros(8), [0] * 10_000, r)
    v = G.var(axis=0)
    assert np.all((v >= 0.8 * 2.25) & (v <= 1.2 * 2.25))


def test_heterogeneity_spreads_clients():
    spreads = []
    for het in (0.0, 0.5, 2.0):
        r = np.random.default_rng(2)
        m = HonestModel.build("quadratic", 30, 16, 1.0, het, range(30), r)
        means = np.array([honest_gradients(m, np.zeros(16), [i] * 200, r).mean(axis=0)
                          for i in range(30)])
        spreads.append(float(np.mean(np.var(means, axis=0))))
    assert spreads[0] < spreads[1] < spreads[2]


def test_quadratic_halving_closed_form():
    cfg = ExperimentConfig(n=8, f_count=0, rounds=10, lr=0.5, d=16, sigma=0.0,
                           aggregator=MEAN)
    res = run_experiment(cfg)
    g = [m.grad_norm2 for m in res.metrics]
    for a, b in zip(g, g[1:]):
        assert b == pytest.approx(a / 4, rel=1e-12)


def test_sign_flip_breaks_fedavg_not_sentinel():
    base = standard_config(n=20, f_count=8, rounds=20, d=64,
                           attack=AttackSpec(AttackKind.SIGN_FLIP, alpha=10))
    clean = run_experiment(clean_baseline(base)).summary()["final_grad_norm2"]
    fedavg = run_experiment(replace(base, aggregator=MEAN)).summary()["final_grad_norm2"]
    sent = run_experiment(base).summary()["final_grad_norm2"]
    assert fedavg >= 10 * clean
    assert sent <= 2 * clean


def test_async_zero_delay_is_synchronous():
    cfg = standard_config(n=20, f_count=4, rounds=8, d=32,
                          attack=AttackSpec(AttackKind.ALIE))
    a = [m.row() for m in run_experiment(cfg).metrics]
    b = [m.row() for m in run_async(cfg, 0).metrics]
    assert repr(a) == repr(b)
    assert all(m["staleness"] == 0.0 for m in a)


def test_staleness_follows_uniform_delay_model():
    tau = 4
    cfg = ExperimentConfig(n=60, f_count=0, rounds=300, d=2, sigma=1.0, aggregator=MEAN,
                           tau_max=tau, lr=0.01)
    state = init_state(cfg)
    counts = np.zeros(tau + 1)
    for t in range(cfg.rounds):
        state, _ = run_round(state)
        if t >= 2 * tau:
            for made, _ in state.latest.values():
                counts[t - made] += 1
    # P(staleness >= k) = prod_{j<k} (tau - j) / (tau + 1)
    surv = [1.0]
    for j in range(tau):
        surv.append(surv[-1] * (tau - j) / (tau + 1))
    expected = np.array(surv) - np.array(surv[1:] + [0.0])
    np.testing.assert_allclose(counts / counts.sum(), expected, atol=0.015)


def test_async_excludes_clients_without_updates():
    cfg = standard_config(n=30, f_count=0, rounds=1, d=16, tau_max=10, aggregator=MEAN)
    m = run_experiment(cfg).metrics[0]
    assert m.n_present < 30


def test_dp_examples():
    r = np.random.default_rng(3)
    G = r.normal(size=(10, 20)) * 5
    out = dp_inject(G, math.inf, 1.0, r)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0)
    small = G / 100
    np.testing.assert_array_equal(dp_inject(small, math.inf, 1e3, r), small)
    assert dp_sigma(8.0, 2.0) == pytest.approx(2.0 * math.sqrt(2 * math.log(1.25e5)) / 8.0)
    noisy = dp_inject(G, 8.0, 1.0, np.random.default_rng(0))
    resid = noisy - dp_inject(G, math.inf, 1.0, None)
    assert resid.std() == pytest.approx(dp_sigma(8.0, 1.0), rel=0.1)
    with pytest.raises(InvalidInput):
        dp_inject(G, 0.0, 1.0, r)


def test_dp_rescues_detection_above_transition():
    cfg = DetectorConfig()
    f, s2f2 = 0.3, 0.30
    atk = AttackSpec(AttackKind.MOMENT_MATCHED, bias=0.5)
    no, yes = [], []
    for s in range(6):
        kw = dict(n=100, d=1000, f=f, sigma=sigma_for(s2f2, f), attack=atk, cfg=cfg)
        no.append(synthetic_detection(**kw, rng=np.random.default_rng([s, 0])).recall)
        yes.append(synthetic_detection(**kw, rng=np.random.default_rng([s, 0]), dp_eps=8.0).recall)
    assert np.mean(yes) >= np.mean(no) + 0.2


def test_detection_period_reuses_flags():
    atk = AttackSpec(AttackKind.SIGN_FLIP)
    base = standard_config(n=30, f_count=6, rounds=9, d=64, attack=atk)
    agg = replace(base.aggregator, detector=DetectorConfig(detection_period=3))
    res = run_experiment(replace(base, aggregator=agg))
    det = [m.detected for m in res.metrics]
    assert det == [t % 3 == 0 for t in range(9)]
    byz = tuple(range(24, 30))
    assert all(m.flagged == byz for m in res.metrics)
    assert all(m.recall == 1.0 for m in res.metrics)


def test_ledger_in_loop(tmp_path):
    cfg = standard_config(n=12, f_count=2, rounds=3, d=16, ledger_dir=str(tmp_path),
                          attack=AttackSpec(AttackKind.SIGN_FLIP))
    state = init_state(cfg)
    for _ in range(3):
        state, _ = run_round(state)
    L = state.ledger
    assert len(L.rounds) == 3 and all(r.status.value == "Finalized" for r in L.rounds)
    assert L.audit(2) == {i: True for i in range(12)}
    again = Ledger.replay(Ledger.read_events(tmp_path / "events.jsonl"))
    assert again.snapshot() == L.snapshot()


def test_lower_bound_probe_above_transition():
    n, d, f = 50, 256, 0.4
    sigma = sigma_for(0.30, f)
    floor = 0.5 * 0.30 * d / n
    kinds = [AggKind.MEAN, AggKind.COORD_MEDIAN, AggKind.TRIMMED_MEAN, AggKind.KRUM,
             AggKind.MULTIKRUM, AggKind.GEOMETRIC_MEDIAN, AggKind.SENTINEL]
    errs = {k: [] for k in kinds}
    for s in range(4):
        r = np.random.default_rng(s)
        mu = r.normal(size=d)
        H = mu + sigma * r.normal(size=(30, d))
        B = attack_moment_matched(AttackContext.from_honest(H, 20, r), bias=0.5)
        G = np.vstack([H, B])[r.permutation(n)]
        for k in kinds:
            g = aggregate(G, AggregatorSpec(k, beta=0.2, f=20 if k is not AggKind.KRUM else 10)).gradient
            errs[k].append(float(np.sum((g - H.mean(axis=0)) ** 2)))
    for k in kinds:
        assert np.mean(errs[k]) >= floor, k


@pytest.mark.parametrize("het", [0.0, 0.5, 1.0, 3.0])
def test_honest_runs_keep_fpr_low(het):
    cfg = standard_config(n=40, f_count=0, rounds=15, d=128, sigma_het=het)
    summ = run_experiment(cfg).summary()
    assert summ["fpr"] <= 0.05


def test_failed_round_leaves_state():
    cfg = standard_config(n=10, f_count=2, rounds=1, d=8,
                          aggregator=AggregatorSpec(AggKind.KRUM, f=4))
    state = init_state(cfg)
    w0 = state.w.copy()
    state, m = run_round(state)
    assert m.failed and math.isnan(m.agg_error)
    np.testing.assert_array_equal(state.w, w0)


def test_runs_are_deterministic():
    cfg = standard_config(n=20, f_count=4, rounds=5, d=32, attack=AttackSpec(AttackKind.GAUSSIAN))
    a = [m.row() for m in run_experiment(cfg).metrics]
    b = [m.row() for m in run_experiment(cfg).metrics]
    assert repr(a) == repr(b)
    c = [m.row() for m in run_experiment(replace(cfg, seed=1)).metrics]
    assert repr(a) != repr(c)


def test_logistic_task_trains():
    cfg = ExperimentConfig(n=12, f_count=0, rounds=40, lr=1.0, d=8, sigma=0.0,
                           task="logistic", aggregator=MEAN)
    res = run_experiment(cfg)
    assert res.metrics[-1].loss < res.metrics[0].loss


def test_config_validation():
    for kw in ({"f_count": 25, "n": 50}, {"lr": 0.0}, {"rounds": 0}, {"tau_max": -1},
               {"lr_schedule": "cosine"}, {"dp_eps": 0.0}, {"layer_dims": (10, 10)}):
        with pytest.raises(InvalidInput):
            ExperimentConfig(**kw)
    assert ExperimentConfig(rounds=100, lr=1.0, lr_schedule="inv_sqrt_T").step_size == 0.1
