import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from nextpoi.checkins import Transition, chronological_split, format_checkin, ingest
from nextpoi.errors import ConfigError, SamplingError, TrainingDiverged
from nextpoi.features import FeatureSchema
from nextpoi.model import fused_score, pattern_score, zeros
from nextpoi.spatial import spatial_preference
from nextpoi.synth import SynthConfig, generate
from nextpoi.trainer import (
    BprTriple,
    TrainConfig,
    TrainIndex,
    TripleBatch,
    expected_complete_gradient,
    fixed_triples,
    full_batch_em_epoch,
    gradient_check,
    init_params,
    log_objective,
    responsibilities,
    sample_bpr_triple,
    sgd_step,
    train,
)

from conftest import make_records, random_context, random_model, random_triple

SMALL = SynthConfig(n_users=15, n_pois=25, events_per_user=20, K_true=2, n_categories=3, seed=3)


@pytest.fixture(scope="module")
def small_train():
    return chronological_split(generate(SMALL).dataset, 0.8).train


def quick(**kw):
    base = dict(K=2, D=3, epochs=3, lambda_theta=0.1, learning_rate=0.02, init_sigma=0.1, time_bins=4, seed=5)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- init


def test_init_deterministic():
    schema = FeatureSchema(24)
    a = init_params(TrainConfig(K=2, D=4, seed=9), 3, 7, schema)
    b = init_params(TrainConfig(K=2, D=4, seed=9), 3, 7, schema)
    for x, y in zip(a.param_arrays(), b.param_arrays()):
        assert np.array_equal(x, y)


@pytest.mark.parametrize("lam,target", [(2.0, 1.0), (1.0, 2.0)])
def test_init_variance_matches_prior(lam, target):
    m = init_params(TrainConfig(K=1, D=1000, lambda_theta=lam, seed=1), 1000, 1, FeatureSchema(24))
    draws = m.user_factors.ravel()
    assert draws.size == 10**6
    assert abs(draws.var() - target) <= 0.02 * target


def test_ppdm_init_ties_user_gates():
    m = init_params(TrainConfig(K=3, D=2, mode="ppdm"), 4, 5, FeatureSchema(6))
    assert m.alpha.shape == (4, 3, 13)
    assert all(np.array_equal(m.alpha[0], m.alpha[u]) for u in range(4))


def test_config_validation():
    for bad in (dict(K=0), dict(lambda_theta=0.0), dict(mode="mf"), dict(learning_rate=-1), dict(init_sigma=-1)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


# ---------------------------------------------------------------- negatives


def test_negative_exclusion_rule():
    idx = TrainIndex([0], [0], [0], 3)
    r = np.random.default_rng(0)
    tr = Transition(0, 0, 0, 0.0, 1.0, 0.0)
    seen = {sample_bpr_triple(tr, idx, r).neg for _ in range(200)}
    assert seen == {1, 2}


def test_negative_distribution_uniform():
    idx = TrainIndex([0], [4], [7], 10)
    r = np.random.default_rng(11)
    negs = idx.sample_negatives(np.zeros(10**5, dtype=np.int64), np.full(10**5, 4), r)
    assert not np.any(negs == 7)
    counts = np.bincount(negs, minlength=10)
    assert chisquare(np.delete(counts, 7)).pvalue > 0.01


def test_all_observed_is_an_error():
    idx = TrainIndex([0, 0, 0], [1, 1, 1], [0, 1, 2], 3)
    with pytest.raises(SamplingError):
        idx.sample_negatives([0], [1], np.random.default_rng(0))
    with pytest.raises(SamplingError):
        sample_bpr_triple(Transition(0, 1, 0, 0.0, 1.0, 0.0), idx, np.random.default_rng(0))


# ---------------------------------------------------------------- E-step


def test_single_pattern_responsibility(rng):
    m = random_model(rng, K=1)
    assert responsibilities(m, random_triple(rng, m)).tolist() == [1.0]


def test_symmetric_responsibilities(rng):
    m = random_model(rng, K=3)
    for a in (m.user_factors, m.next_factors_user, m.next_factors_prev, m.prev_factors):
        a[:] = a[0]
    m.rho[:] = m.rho[0]
    m.alpha[:] = m.alpha[0]
    g = responsibilities(m, random_triple(rng, m))
    assert np.allclose(g, 1 / 3, atol=1e-15)


def test_responsibilities_extended_precision(rng):
    mpmath.mp.dps = 50
    for mode in ("global", "per-user"):
        m = random_model(rng, K=3, D=4, gate_mode=mode, scale=1.0)
        t = random_triple(rng, m)
        A = m.gate_weights(t.user)
        terms = []
        for s in range(3):
            delta = (pattern_score(m, s, t.user, t.prev_poi, t.pos, t.d_im)
                     - pattern_score(m, s, t.user, t.prev_poi, t.neg, t.d_in))
            sig = 1 / (1 + mpmath.exp(-mpmath.mpf(delta)))
            terms.append(sig * mpmath.exp(mpmath.mpf(float(A[s] @ t.context))))
        ref = [float(x / sum(terms)) for x in terms]
        got = responsibilities(m, t)
        assert np.max(np.abs(got - ref)) <= 1e-10


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(-30, 30))
def test_responsibilities_normalised_and_shift_invariant(seed, c):
    r = np.random.default_rng(seed)
    m = random_model(r, K=int(r.integers(1, 5)), scale=2.0, gate_mode=r.choice(["global", "per-user"]))
    t = random_triple(r, m)
    g = responsibilities(m, t)
    assert np.all(g >= 0) and abs(g.sum() - 1) <= 1e-12
    w = m.schema.weekday_offset + int(np.flatnonzero(t.context[m.schema.weekday_offset:])[0])
    m.alpha[..., w] += c
    assert np.allclose(responsibilities(m, t), g, rtol=1e-9, atol=1e-13)


# ---------------------------------------------------------------- M-step


def test_saturated_pair_leaves_factors():
    m = zeros(1, 2, 1, 3, FeatureSchema(24), lambda_theta=1e-300)
    r = np.random.default_rng(0)
    for a in (m.user_factors, m.next_factors_user, m.next_factors_prev, m.prev_factors):
        a[:] = r.normal(0, 1, a.shape)
    m.rho[0] = 1e4
    t = BprTriple(0, 0, 1, 2, np.eye(31)[0], 0.0, 50.0)
    before = m.copy()
    sgd_step(m, t, learning_rate=0.1)
    for a, b in zip(m.param_arrays()[:4], before.param_arrays()[:4]):
        assert np.array_equal(a, b)


def test_zero_responsibility_pattern_untouched(rng):
    m = random_model(rng, K=2, D=3)
    ctx = random_context(rng, m)
    on = int(np.flatnonzero(ctx)[0])
    m.alpha[1, on] = -900.0
    t = random_triple(rng, m)
    t = BprTriple(t.user, t.prev_poi, t.pos, t.neg, ctx, t.d_im, t.d_in)
    g = responsibilities(m, t)
    assert g[1] == 0.0
    before = m.copy()
    sgd_step(m, t, gamma=g, learning_rate=0.1)
    for a, b in zip(m.param_arrays(), before.param_arrays()):
        assert np.array_equal(a[1], b[1])
    assert not np.array_equal(m.user_factors[0], before.user_factors[0])


def test_sgd_step_rejects_wrong_gamma(rng):
    m = random_model(rng, K=2)
    with pytest.raises(ValueError):
        sgd_step(m, random_triple(rng, m), gamma=np.array([1.0, 0.0]))


@pytest.mark.parametrize("mode", ["global", "per-user"])
def test_update_matches_finite_differences(rng, mode):
    for _ in range(3):
        m = random_model(rng, K=2, D=3, M=3, N=6, gate_mode=mode, scale=0.8)
        assert gradient_check(m, random_triple(rng, m), h=1e-5) <= 1e-4


def test_sgd_step_explicit_formula(rng):
    m = random_model(rng, K=2, D=3)
    t = random_triple(rng, m)
    g = responsibilities(m, t)
    lr, lam = 0.01, m.lambda_theta
    s = 1
    delta = (pattern_score(m, s, t.user, t.prev_poi, t.pos, t.d_im)
             - pattern_score(m, s, t.user, t.prev_poi, t.neg, t.d_in))
    dlt = 1 - 1 / (1 + math.exp(-delta))
    dV = m.next_factors_user[s, t.pos] - m.next_factors_user[s, t.neg]
    want_u = m.user_factors[s, t.user] + lr * g[s] * (dlt * dV - lam * m.user_factors[s, t.user])
    dinv = spatial_preference(t.d_im) - spatial_preference(t.d_in)
    want_rho = m.rho[s] + lr * g[s] * (dlt * dinv - lam * m.rho[s])
    logits = m.alpha @ t.context
    p = np.exp(logits - logits.max())
    p /= p.sum()
    want_alpha = m.alpha[s] + lr * ((g[s] - p[s]) * t.context - lam * g[s] * m.alpha[s])
    sgd_step(m, t, learning_rate=lr)
    assert np.allclose(m.user_factors[s, t.user], want_u, rtol=1e-12)
    assert m.rho[s] == pytest.approx(want_rho, rel=1e-12)
    assert np.allclose(m.alpha[s], want_alpha, rtol=1e-12, atol=1e-15)


def test_tied_per_user_gates_reproduce_global_update(rng):
    g_model = random_model(rng, K=3, D=2, M=4, N=8, gate_mode="global")
    p_model = g_model.copy()
    p_model.gate_mode = "per-user"
    p_model.alpha = np.repeat(g_model.alpha[None], 4, axis=0)
    triples = [random_triple(rng, g_model) for _ in range(20)]
    # per-triple: the user's gate moves exactly like the shared gate
    t = triples[0]
    a, b = g_model.copy(), p_model.copy()
    sgd_step(a, t, learning_rate=0.05)
    sgd_step(b, t, learning_rate=0.05)
    assert np.allclose(b.alpha[t.user], a.alpha, rtol=1e-13, atol=1e-15)
    others = [u for u in range(4) if u != t.user]
    assert np.array_equal(b.alpha[others], p_model.alpha[others])
    # batch: data part of the per-user gradients sums to the global one
    gam = np.array([responsibilities(g_model, x) for x in triples])
    gg = expected_complete_gradient(g_model, triples, gam)[5] + g_model.lambda_theta * g_model.alpha
    gp = expected_complete_gradient(p_model, triples, gam)[5] + p_model.lambda_theta * p_model.alpha
    assert np.allclose(gp.sum(axis=0), gg, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- objective


def test_zero_model_objective():
    m = zeros(1, 3, 2, 4, FeatureSchema(24))
    r = np.random.default_rng(0)
    ts = [BprTriple(int(r.integers(2)), 0, 1, 2, np.eye(31)[0], 1.0, 1.0) for _ in range(17)]
    assert log_objective(m, ts) == pytest.approx(17 * math.log(0.5), rel=1e-14)


def test_objective_direct_summation(rng):
    m = random_model(rng, K=3, D=4, gate_mode="per-user")
    ts = [random_triple(rng, m) for _ in range(25)]
    total = 0.0
    for t in ts:
        logits = m.gate_weights(t.user) @ t.context
        p = np.exp(logits) / np.exp(logits).sum()
        mix = 0.0
        for s in range(3):
            d = (pattern_score(m, s, t.user, t.prev_poi, t.pos, t.d_im)
                 - pattern_score(m, s, t.user, t.prev_poi, t.neg, t.d_in))
            mix += p[s] / (1 + math.exp(-d))
        total += math.log(mix)
    sq = sum(float(np.sum(a**2)) for a in m.param_arrays())
    total -= 0.5 * m.lambda_theta * sq
    assert log_objective(m, ts) == pytest.approx(total, rel=1e-10)


def test_objective_regulariser_vanishes_at_zero():
    m = zeros(2, 3, 2, 4, FeatureSchema(24), lambda_theta=7.0)
    assert m.squared_norm() == 0.0


def test_full_batch_em_never_decreases(small_train):
    cfg = quick(K=2, D=3, init_sigma=0.3)
    batch, schema = fixed_triples(small_train, cfg, size=300)
    m = init_params(cfg, small_train.n_users, small_train.n_pois, schema, poi_coords=small_train.poi_coords)
    prev, step = log_objective(m, batch), 0.01
    for _ in range(8):
        m, step = full_batch_em_epoch(m, batch, step)
        cur = log_objective(m, batch)
        assert cur >= prev - 1e-6
        prev = cur


# ---------------------------------------------------------------- training


def same_params(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.param_arrays(), b.param_arrays()))


@pytest.mark.parametrize("mode", ["gpdm", "ppdm"])
def test_train_deterministic(small_train, mode):
    a = train(small_train, quick(mode=mode)).model
    b = train(small_train, quick(mode=mode)).model
    assert same_params(a, b)
    assert a.metadata["fingerprint"] == small_train.fingerprint()


def test_train_refuses_test_data():
    sp = chronological_split(generate(SMALL).dataset, 0.8)
    with pytest.raises(ConfigError):
        train(sp.test, quick())


def test_train_diverges_loudly(small_train):
    with pytest.raises(TrainingDiverged) as e:
        train(small_train, quick(learning_rate=1e8, init_sigma=10.0, lambda_theta=1e-3, epochs=5))
    assert e.value.last_good is not None and e.value.last_good.all_finite()


def test_trace_rows(small_train):
    res = train(small_train, quick(epochs=4, convergence_tol=0.0))
    assert [r.epoch for r in res.trace] == [1, 2, 3, 4]
    assert all(np.isfinite(r.audit_objective) for r in res.trace)


def test_cold_users_get_mean_gate():
    visits = {"a": ["p0", "p1", "p2", "p3", "p1"], "b": ["p2", "p0", "p3"], "c": ["p1"]}
    ds = ingest([format_checkin(r) for r in make_records(visits)], 1)
    model = train(ds, quick(mode="ppdm", K=2, D=2, epochs=2)).model
    c = ds.user_index.index("c")
    warm = [ds.user_index.index("a"), ds.user_index.index("b")]
    assert np.allclose(model.alpha[c], model.alpha[warm].mean(axis=0))


def test_single_pattern_frozen_gate(small_train, rng):
    model = train(small_train, quick(K=1, freeze_gate=True, epochs=3)).model
    one_epoch = train(small_train, quick(K=1, freeze_gate=True, epochs=1)).model
    assert np.array_equal(model.alpha, one_epoch.alpha)
    assert not np.array_equal(model.user_factors, one_epoch.user_factors)
    # the mixture collapses to the single pattern's score in every context
    for _ in range(5):
        ctx = random_context(rng, model)
        u, i, l = int(rng.integers(model.M)), int(rng.integers(model.N)), int(rng.integers(model.N))
        assert fused_score(model, u, i, l, ctx, 1.3) == pattern_score(model, 0, u, i, l, 1.3)


def test_triple_batch_round_trip(rng):
    m = random_model(rng)
    ts = [random_triple(rng, m) for _ in range(4)]
    b = TripleBatch.from_triples(ts)
    for k, t in enumerate(ts):
        u = b.triple(k)
        assert (u.user, u.prev_poi, u.pos, u.neg, u.d_im, u.d_in) == (t.user, t.prev_poi, t.pos, t.neg, t.d_im, t.d_in)
        assert np.array_equal(u.context, t.context)
