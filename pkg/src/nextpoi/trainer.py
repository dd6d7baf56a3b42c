"""EM-wrapped sequential BPR training of the latent-behaviour-pattern model.

The E-step computes, for each sampled (u, i, m, n) pair, the posterior over
patterns. The M-step ascends the responsibility-weighted log-likelihood,
either one triple at a time (stochastic mode) or on the whole triple set
with a backtracking line search (full-batch mode, which never lowers the
audit objective).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .checkins import build_transitions, transition_arrays
from .errors import ConfigError, EmptyDatasetError, FitError, SamplingError, TrainingDiverged
from .features import build_feature_schema, dataset_category_to_schema, featurize_arrays
from .model import ModelParams, softmax
from .spatial import DEFAULT_MIN_DISTANCE_KM, fit_displacements, haversine_km, spatial_preference

logger = logging.getLogger(__name__)

MODES = ("gpdm", "ppdm")


@dataclass
class TrainConfig:
    K: int = 6
    D: int = 60
    lambda_theta: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 30
    negatives_per_positive: int = 1
    seed: int = 0
    mode: str = "gpdm"
    # None means the prior's standard deviation sqrt(2 / lambda_theta)
    init_sigma: Optional[float] = None
    convergence_tol: float = 1e-5
    freeze_gate: bool = False
    time_bins: int = 24
    utc_offset_hours: float = 0.0
    max_gap_hours: Optional[float] = None
    min_distance_km: float = DEFAULT_MIN_DISTANCE_KM
    audit_size: int = 2000
    full_batch: bool = False
    m_step_iters: int = 5
    grad_check_every: int = 0
    # epochs during which the gate stays frozen so patterns can specialise first
    gate_warmup_epochs: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("K", "D", "epochs", "negatives_per_positive", "audit_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lambda_theta", "learning_rate"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.init_sigma is not None and self.init_sigma < 0:
            raise ConfigError("init_sigma must be non-negative")

    @property
    def sigma(self):
        return math.sqrt(2.0 / self.lambda_theta) if self.init_sigma is None else self.init_sigma

    @property
    def gate_mode(self):
        return "per-user" if self.mode == "ppdm" else "global"

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class BprTriple:
    user: int
    prev_poi: int
    pos: int
    neg: int
    context: np.ndarray
    d_im: float
    d_in: float


@dataclass
class TripleBatch:
    """Columnar set of BPR triples."""

    users: np.ndarray
    prevs: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    G: np.ndarray
    d_im: np.ndarray
    d_in: np.ndarray

    def __len__(self):
        return self.users.size

    @classmethod
    def from_triples(cls, triples):
        return cls(
            np.array([t.user for t in triples], dtype=np.int64),
            np.array([t.prev_poi for t in triples], dtype=np.int64),
            np.array([t.pos for t in triples], dtype=np.int64),
            np.array([t.neg for t in triples], dtype=np.int64),
            np.array([t.context for t in triples], dtype=float),
            np.array([t.d_im for t in triples], dtype=float),
            np.array([t.d_in for t in triples], dtype=float),
        )

    def triple(self, k):
        return BprTriple(int(self.users[k]), int(self.prevs[k]), int(self.pos[k]), int(self.neg[k]),
                         self.G[k].copy(), float(self.d_im[k]), float(self.d_in[k]))


def _as_batch(triples):
    if isinstance(triples, TripleBatch):
        return triples
    if isinstance(triples, BprTriple):
        return TripleBatch.from_triples([triples])
    return TripleBatch.from_triples(list(triples))


def init_params(config: TrainConfig, M, N, schema, seed=None, poi_coords=None, **model_kw) -> ModelParams:
    """Draw every parameter i.i.d. from N(0, sigma^2), sigma^2 = 2/lambda by
    default. Per-user gates share one draw."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    K, D, F = config.K, config.D, schema.total_F
    sd = config.sigma
    U = rng.normal(0.0, sd, (K, M, D))
    VLU = rng.normal(0.0, sd, (K, N, D))
    VLI = rng.normal(0.0, sd, (K, N, D))
    VIL = rng.normal(0.0, sd, (K, N, D))
    rho = rng.normal(0.0, sd, K)
    alpha = rng.normal(0.0, sd, (K, F))
    if config.mode == "ppdm":
        # every user starts from the same gate so pattern labels agree across users
        alpha = np.repeat(alpha[None], M, axis=0)
    coords = np.zeros((N, 2)) if poi_coords is None else np.asarray(poi_coords, dtype=float)
    return ModelParams(U, VLU, VLI, VIL, rho, alpha, config.gate_mode, schema, coords,
                       lambda_theta=config.lambda_theta, min_distance_km=config.min_distance_km, **model_kw)


class TrainIndex:
    """Observed next POIs per (user, previous POI), for negative sampling."""

    def __init__(self, users, prevs, nexts, n_pois, poi_coords=None):
        self.n_pois = int(n_pois)
        self.poi_coords = poi_coords
        users = np.asarray(users, dtype=np.int64)
        prevs = np.asarray(prevs, dtype=np.int64)
        nexts = np.asarray(nexts, dtype=np.int64)
        N = self.n_pois
        self._keys = np.unique((users * N + prevs) * N + nexts)
        pair = self._keys // N
        self._pairs, self._pair_counts = np.unique(pair, return_counts=True)

    @classmethod
    def from_transitions(cls, transitions, n_pois, poi_coords=None):
        arr = transition_arrays(transitions)
        return cls(arr["user"], arr["prev_poi"], arr["next_poi"], n_pois, poi_coords)

    def observed(self, u, i):
        N = self.n_pois
        lo = np.searchsorted(self._keys, (u * N + i) * N)
        hi = np.searchsorted(self._keys, (u * N + i) * N + N)
        return set((self._keys[lo:hi] % N).tolist())

    def contains(self, u, i, l):
        N = self.n_pois
        key = (np.asarray(u, dtype=np.int64) * N + i) * N + l
        pos = np.searchsorted(self._keys, key)
        pos = np.minimum(pos, self._keys.size - 1)
        return self._keys[pos] == key

    def n_observed(self, u, i):
        pair = np.asarray(u, dtype=np.int64) * self.n_pois + i
        pos = np.minimum(np.searchsorted(self._pairs, pair), self._pairs.size - 1)
        return np.where(self._pairs[pos] == pair, self._pair_counts[pos], 0)

    def sample_negatives(self, users, prevs, rng):
        """Uniform negatives excluding each pair's observed next POIs, by
        vectorised rejection."""
        users = np.asarray(users, dtype=np.int64)
        prevs = np.asarray(prevs, dtype=np.int64)
        if np.any(self.n_observed(users, prevs) >= self.n_pois):
            raise SamplingError("a (user, previous POI) pair has every POI as an observed next POI")
        neg = rng.integers(0, self.n_pois, size=users.size)
        bad = self.contains(users, prevs, neg)
        while np.any(bad):
            idx = np.nonzero(bad)[0]
            neg[idx] = rng.integers(0, self.n_pois, size=idx.size)
            bad[idx] = self.contains(users[idx], prevs[idx], neg[idx])
        return neg


def sample_bpr_triple(transition, train_index: TrainIndex, rng, context=None) -> BprTriple:
    """Pair an observed transition with one uniformly drawn unobserved next
    POI."""
    u, i, m = transition.user, transition.prev_poi, transition.next_poi
    obs = train_index.observed(u, i)
    if len(obs) >= train_index.n_pois:
        raise SamplingError(f"user {u} from POI {i}: every POI is an observed next POI")
    while True:
        n = int(rng.integers(0, train_index.n_pois))
        if n not in obs:
            break
    coords = train_index.poi_coords
    d_in = 0.0 if coords is None else float(haversine_km(*coords[i], *coords[n]))
    ctx = np.zeros(0) if context is None else np.asarray(context, dtype=float)
    return BprTriple(u, i, m, n, ctx, float(transition.distance_km), d_in)


# ------------------------------------------------------------- batch algebra


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _sigmoid(z):
    return np.exp(_log_sigmoid(z))


def _gate_rows(model, batch):
    if model.gate_mode == "global":
        return np.zeros(len(batch), dtype=np.int64)
    return batch.users


def _alpha3(model):
    return model.alpha[None] if model.gate_mode == "global" else model.alpha


def pair_deltas(model, batch):
    """Score differences x(u,i,m) - x(u,i,n) per triple and pattern, (T, K)."""
    b = batch
    U = model.user_factors[:, b.users, :]
    dV = model.next_factors_user[:, b.pos, :] - model.next_factors_user[:, b.neg, :]
    dL = model.next_factors_prev[:, b.pos, :] - model.next_factors_prev[:, b.neg, :]
    Vi = model.prev_factors[:, b.prevs, :]
    dinv = (spatial_preference(b.d_im, model.min_distance_km)
            - spatial_preference(b.d_in, model.min_distance_km))
    out = np.einsum("ktd,ktd->kt", U, dV) + np.einsum("ktd,ktd->kt", dL, Vi) + model.rho[:, None] * dinv[None]
    return out.T


def batch_gate_logits(model, batch):
    A = _alpha3(model)[_gate_rows(model, batch)]  # T x K x F
    return np.einsum("tkf,tf->tk", A, batch.G)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def batch_responsibilities(model, triples):
    b = _as_batch(triples)
    w = _log_sigmoid(pair_deltas(model, b)) + batch_gate_logits(model, b)
    return softmax(w)


def responsibilities(model: ModelParams, triple: BprTriple) -> np.ndarray:
    """Posterior over patterns for one triple, proportional to
    sigmoid(delta_s) * exp(gate logit_s)."""
    return batch_responsibilities(model, [triple])[0]


def log_objective(model: ModelParams, triples) -> float:
    """Sum over triples of ln sum_s sigmoid(delta_s) p(s|c), minus
    (lambda/2) * ||Theta||^2."""
    b = _as_batch(triples)
    w = _log_sigmoid(pair_deltas(model, b)) + _log_softmax(batch_gate_logits(model, b))
    mx = w.max(axis=1, keepdims=True)
    ll = np.sum(mx[:, 0] + np.log(np.exp(w - mx).sum(axis=1)))
    return float(ll - 0.5 * model.lambda_theta * model.squared_norm())


def expected_complete_objective(model, triples, gamma):
    """Full-batch Q: sum_t sum_s gamma_ts [ln sigmoid(delta_ts) + ln p_ts]
    minus (lambda/2) * ||Theta||^2."""
    b = _as_batch(triples)
    w = _log_sigmoid(pair_deltas(model, b)) + _log_softmax(batch_gate_logits(model, b))
    return float(np.sum(gamma * w) - 0.5 * model.lambda_theta * model.squared_norm())


def expected_complete_gradient(model, triples, gamma, update_gate=True):
    """Gradient of :func:`expected_complete_objective`, one array per
    parameter block in ``model.param_arrays()`` order."""
    b = _as_batch(triples)
    lam = model.lambda_theta
    delta = pair_deltas(model, b)
    w = gamma * (1.0 - _sigmoid(delta))  # T x K
    p = softmax(batch_gate_logits(model, b))
    gU = -lam * model.user_factors
    gVLU = -lam * model.next_factors_user
    gVLI = -lam * model.next_factors_prev
    gVIL = -lam * model.prev_factors
    dinv = (spatial_preference(b.d_im, model.min_distance_km)
            - spatial_preference(b.d_in, model.min_distance_km))
    grho = -lam * model.rho + w.T @ dinv
    for s in range(model.K):
        ws = w[:, s, None]
        U = model.user_factors[s, b.users]
        Vi = model.prev_factors[s, b.prevs]
        np.add.at(gU[s], b.users, ws * (model.next_factors_user[s, b.pos] - model.next_factors_user[s, b.neg]))
        np.add.at(gVIL[s], b.prevs, ws * (model.next_factors_prev[s, b.pos] - model.next_factors_prev[s, b.neg]))
        np.add.at(gVLU[s], b.pos, ws * U)
        np.add.at(gVLU[s], b.neg, -ws * U)
        np.add.at(gVLI[s], b.pos, ws * Vi)
        np.add.at(gVLI[s], b.neg, -ws * Vi)
    if update_gate:
        ga = -lam * model.alpha
        coef = gamma - p  # T x K
        if model.gate_mode == "global":
            ga += coef.T @ b.G
        else:
            np.add.at(ga, b.users, coef[:, :, None] * b.G[:, None, :])
    else:
        ga = np.zeros_like(model.alpha)
    return [gU, gVLU, gVLI, gVIL, grho, ga]


def triple_q(model, triple, gamma):
    """Per-triple expected complete-data objective with responsibilities held
    fixed; its gradient is what :func:`sgd_step` ascends.

    Regularisation covers the rows the triple touches, weighted by gamma.
    """
    b = _as_batch(triple)
    t = b.triple(0)
    delta = pair_deltas(model, b)[0]
    logp = _log_softmax(batch_gate_logits(model, b))[0]
    q = 0.0
    lam = model.lambda_theta
    for s in range(model.K):
        a = model.gate_weights(t.user)[s]
        sq = (np.sum(model.user_factors[s, t.user] ** 2) + np.sum(model.prev_factors[s, t.prev_poi] ** 2)
              + np.sum(model.next_factors_user[s, t.pos] ** 2) + np.sum(model.next_factors_user[s, t.neg] ** 2)
              + np.sum(model.next_factors_prev[s, t.pos] ** 2) + np.sum(model.next_factors_prev[s, t.neg] ** 2)
              + model.rho[s] ** 2 + np.sum(a**2))
        q += gamma[s] * (_log_sigmoid(delta[s]) + logp[s] - 0.5 * lam * sq)
    return float(q)


# ------------------------------------------------------------------ updates


def _run_pass(model, batch, order, lr, update_gate=True):
    alpha = _alpha3(model)
    status = _kernels.lbp_sgd_pass(
        model.user_factors, model.next_factors_user, model.next_factors_prev, model.prev_factors,
        model.rho, alpha, _gate_rows(model, batch), batch.users, batch.prevs, batch.pos, batch.neg,
        np.arange(len(batch), dtype=np.int64), batch.G,
        spatial_preference(batch.d_im, model.min_distance_km),
        spatial_preference(batch.d_in, model.min_distance_km),
        np.asarray(order, dtype=np.int64), float(lr), float(model.lambda_theta), bool(update_gate),
    )
    return status


def sgd_step(model: ModelParams, triple: BprTriple, gamma=None, learning_rate=0.05, update_gate=True):
    """One E-step + M-step on a single triple, applied in place.

    Each parameter θ touched by the triple moves by
    ``lr * gamma_s * (delta_s * d(Delta_s)/dθ - lambda * θ)``; gate weights
    move by ``lr * ((gamma_s - p_s) g(c) - lambda * gamma_s * alpha_s)``.
    ``gamma`` is recomputed inside the step; passing it only lets callers
    assert what they expect.
    """
    batch = _as_batch(triple)
    if gamma is not None:
        expect = responsibilities(model, batch.triple(0))
        if not np.allclose(expect, gamma, rtol=1e-9, atol=1e-12):
            raise ValueError("gamma does not match the model's responsibilities for this triple")
    status = _run_pass(model, batch, [0], learning_rate, update_gate)
    if status >= 0:
        raise TrainingDiverged("non-finite parameter after sgd_step")
    return model


def _axpy_params(model, grads, step):
    out = model.copy()
    for a, g in zip(out.param_arrays(), grads):
        a += step * g
    return out


def full_batch_em_epoch(model, batch, step, m_iters=5, update_gate=True):
    """One EM iteration on a fixed triple set.

    The M-step runs ``m_iters`` gradient-ascent steps on Q, halving the step
    until Q does not decrease, so the log objective is non-decreasing.
    Returns ``(model, step)`` with the adapted step size.
    """
    gamma = batch_responsibilities(model, batch)
    q0 = expected_complete_objective(model, batch, gamma)
    for _ in range(m_iters):
        grads = expected_complete_gradient(model, batch, gamma, update_gate)
        for _ in range(60):
            cand = _axpy_params(model, grads, step)
            q1 = expected_complete_objective(cand, batch, gamma)
            if np.isfinite(q1) and q1 >= q0:
                model, q0 = cand, q1
                step *= 1.25
                break
            step *= 0.5
        else:
            break
    return model, step


# ------------------------------------------------------------------ training


@dataclass
class TraceRow:
    epoch: int
    audit_objective: float
    grad_check: str
    wall_time: float


@dataclass
class TrainResult:
    model: ModelParams
    trace: list = field(default_factory=list)


def _grad_check_status(model, batch, k, h=1e-5):
    t = batch.triple(k)
    ok = gradient_check(model, t, h=h) <= 1e-4
    return "ok" if ok else "fail"


def gradient_check(model, triple, h=1e-5, lr=1e-3, skip_below=1e-8):
    """Largest relative error between the ``sgd_step`` direction and central
    finite differences of :func:`triple_q` over the parameters the triple
    touches."""
    gamma = responsibilities(model, triple)
    after = sgd_step(model.copy(), triple, learning_rate=lr)
    worst = 0.0
    for a_name, idx in _touched_entries(model, triple):
        base = getattr(model, a_name)
        implied = (getattr(after, a_name)[idx] - base[idx]) / lr
        probe = model.copy()
        arr = getattr(probe, a_name)
        orig = arr[idx]
        arr[idx] = orig + h
        qp = triple_q(probe, triple, gamma)
        arr[idx] = orig - h
        qm = triple_q(probe, triple, gamma)
        fd = (qp - qm) / (2 * h)
        if abs(fd) < skip_below and abs(implied) < skip_below:
            continue
        worst = max(worst, abs(implied - fd) / max(abs(fd), abs(implied)))
    return worst


def _touched_entries(model, t):
    """(attribute, index) for each scalar parameter a triple can move."""
    out = []
    for s in range(model.K):
        for d in range(model.D):
            out += [("user_factors", (s, t.user, d)), ("prev_factors", (s, t.prev_poi, d)),
                    ("next_factors_user", (s, t.pos, d)), ("next_factors_user", (s, t.neg, d)),
                    ("next_factors_prev", (s, t.pos, d)), ("next_factors_prev", (s, t.neg, d))]
        out.append(("rho", (s,)))
        for j in range(model.F):
            out.append(("alpha", (s, j) if model.gate_mode == "global" else (t.user, s, j)))
    return out


def prepare_training(dataset_train, config: TrainConfig, schema=None):
    """Transitions, context matrix, schema and index for a training set."""
    if dataset_train.provenance == "test":
        raise ConfigError("refusing to train on a dataset tagged as test data")
    transitions = build_transitions(dataset_train, config.max_gap_hours)
    if not transitions:
        raise EmptyDatasetError("training set has no transitions")
    arr = transition_arrays(transitions)
    if schema is None:
        schema = build_feature_schema(dataset_train, config.time_bins, config.utc_offset_hours)
    cat = dataset_category_to_schema(dataset_train, schema)
    G = featurize_arrays(arr["prev_time"], cat[arr["prev_poi"]], schema)
    index = TrainIndex(arr["user"], arr["prev_poi"], arr["next_poi"], dataset_train.n_pois,
                       dataset_train.poi_coords)
    return arr, G, schema, index


def _displacement_fit(distances):
    try:
        return fit_displacements(distances).to_dict()
    except FitError:
        return None


def _make_batch(arr, G, rows, negs, coords):
    prevs = arr["prev_poi"][rows]
    return TripleBatch(
        arr["user"][rows], prevs, arr["next_poi"][rows], negs, G[rows],
        arr["distance_km"][rows],
        haversine_km(coords[prevs, 0], coords[prevs, 1], coords[negs, 0], coords[negs, 1]),
    )


def train(dataset_train, config: TrainConfig, log_every=1) -> TrainResult:
    """Fit a GPDM or PPDM model to a training split."""
    arr, G, schema, index = prepare_training(dataset_train, config)
    T = arr["user"].size
    M, N = dataset_train.n_users, dataset_train.n_pois
    coords = np.asarray(dataset_train.poi_coords)
    init_seq, audit_seq, loop_seq = np.random.SeedSequence(config.seed).spawn(3)
    model = init_params(
        config, M, N, schema, seed=np.random.default_rng(init_seq).integers(2**63), poi_coords=coords,
        poi_category=dataset_category_to_schema(dataset_train, schema),
        user_ids=dataset_train.user_index.ids, poi_ids=dataset_train.poi_index.ids,
        metadata={"fingerprint": dataset_train.fingerprint(), "config": config.to_dict(),
                  "power_law": _displacement_fit(arr["distance_km"])},
    )
    logger.info("training %s K=%d D=%d on %d transitions (M=%d, N=%d)", config.mode, config.K, config.D, T, M, N)

    audit_rng = np.random.default_rng(audit_seq)
    audit_rows = np.sort(audit_rng.choice(T, size=min(T, config.audit_size), replace=False))
    audit = _make_batch(arr, G, audit_rows, index.sample_negatives(
        arr["user"][audit_rows], arr["prev_poi"][audit_rows], audit_rng), coords)

    rng = np.random.default_rng(loop_seq)
    trace = []
    prev_obj = log_objective(model, audit)
    last_good = model.copy()
    step = config.learning_rate
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        update_gate = not config.freeze_gate and epoch > config.gate_warmup_epochs
        if config.full_batch:
            model, step = full_batch_em_epoch(model, audit, step, config.m_step_iters, update_gate)
        else:
            rows = np.repeat(np.arange(T), config.negatives_per_positive)
            negs = index.sample_negatives(arr["user"][rows], arr["prev_poi"][rows], rng)
            batch = _make_batch(arr, G, rows, negs, coords)
            order = rng.permutation(len(batch))
            status = _run_pass(model, batch, order, config.learning_rate, update_gate)
            if status >= 0:
                raise TrainingDiverged(
                    f"non-finite parameter at epoch {epoch}, step {status}; lower the learning rate",
                    last_good=last_good, trace=trace,
                )
        obj = log_objective(model, audit)
        if not np.isfinite(obj):
            raise TrainingDiverged(f"audit objective is {obj} at epoch {epoch}", last_good=last_good, trace=trace)
        check = "skipped"
        if config.grad_check_every and epoch % config.grad_check_every == 0:
            check = _grad_check_status(model, audit, int(rng.integers(len(audit))))
        trace.append(TraceRow(epoch, obj, check, time.perf_counter() - start))
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d audit objective %.6g", epoch, obj)
        last_good = model.copy()
        if abs(obj - prev_obj) <= config.convergence_tol * max(abs(prev_obj), 1e-12):
            break
        prev_obj = obj

    if config.mode == "ppdm":
        _fill_cold_gates(model, np.unique(arr["user"]))
    return TrainResult(model, trace)


def _fill_cold_gates(model, trained_users):
    """Users without training transitions get the mean learned gate."""
    cold = np.setdiff1d(np.arange(model.M), trained_users)
    if cold.size and trained_users.size:
        model.alpha[cold] = model.alpha[trained_users].mean(axis=0)


def fixed_triples(dataset_train, config: TrainConfig, size=None, seed=None):
    """A deterministic triple set, e.g. for full-batch verification runs."""
    arr, G, schema, index = prepare_training(dataset_train, config)
    T = arr["user"].size
    rng = np.random.default_rng(config.seed if seed is None else seed)
    rows = np.arange(T) if size is None or size >= T else np.sort(rng.choice(T, size=size, replace=False))
    negs = index.sample_negatives(arr["user"][rows], arr["prev_poi"][rows], rng)
    return _make_batch(arr, G, rows, negs, np.asarray(dataset_train.poi_coords)), schema


def write_trace(trace, fh):
    fh.write("epoch\taudit_objective\tgrad_check\twall_time_s\n")
    for r in trace:
        fh.write(f"{r.epoch}\t{r.audit_objective!r}\t{r.grad_check}\t{r.wall_time:.3f}\n")
