"""Top-N recommendation, Precision@N on next and next-new POIs, the MF-BPR
baseline, and run reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .checkins import Transition
from .errors import EvaluationError, FingerprintMismatch, TrainingDiverged
from .features import dataset_category_to_schema, featurize_arrays
from .model import ModelParams, softmax
from .spatial import haversine_km, spatial_preference

DEFAULT_CUTOFFS = (1, 5, 10, 20)


# ------------------------------------------------------------------ scoring


def score_batch(model, users, prevs, G):
    """(T, N) scores for many queries. Falls back to ``score_all`` per row
    for models without a batched path."""
    if isinstance(model, ModelParams):
        return _lbp_score_batch(model, users, prevs, G)
    if hasattr(model, "score_batch"):
        return model.score_batch(users, prevs, G)
    return np.array([model.score_all(int(u), int(i), None if G is None else G[k])
                     for k, (u, i) in enumerate(zip(users, prevs))])


def _lbp_score_batch(model, users, prevs, G):
    c = model.poi_coords
    inv_d = spatial_preference(
        haversine_km(c[prevs, 0][:, None], c[prevs, 1][:, None], c[None, :, 0], c[None, :, 1]),
        model.min_distance_km,
    )
    if model.gate_mode == "global":
        p = softmax(G @ model.alpha.T)
    else:
        p = softmax(np.einsum("tkf,tf->tk", model.alpha[users], G))
    out = np.zeros((len(users), model.N))
    for s in range(model.K):
        x = model.user_factors[s, users] @ model.next_factors_user[s].T
        x += model.prev_factors[s, prevs] @ model.next_factors_prev[s].T
        x += model.rho[s] * inv_d
        out += p[:, s, None] * x
    return out


def _default_candidates(n_pois, i):
    mask = np.ones(n_pois, dtype=bool)
    mask[i] = False
    return mask


def recommend_top_n(model, u, i, context, N, candidate_set=None):
    """Top-``N`` ``(poi, score)`` pairs, highest fused score first, ties
    broken by lower POI index. Candidates default to every POI except ``i``."""
    scores = np.asarray(model.score_all(u, i, context), dtype=float)
    if candidate_set is None:
        cand = np.nonzero(_default_candidates(scores.size, i))[0]
    else:
        cand = np.unique(np.asarray(list(candidate_set), dtype=np.int64))
    if cand.size == 0:
        raise EvaluationError("empty candidate set")
    order = np.lexsort((cand, -scores[cand]))
    top = cand[order[:N]]
    return [(int(p), float(scores[p])) for p in top]


def _ranks_of_truth(scores, prevs, truth):
    """Zero-based rank of each true next POI among candidates (all POIs but
    the previous one) under the descending-score, ascending-index order.
    Returns -1 where the truth is not a candidate."""
    T, N = scores.shape
    rows = np.arange(T)
    ts = scores[rows, truth][:, None]
    idx = np.arange(N)[None, :]
    ahead = (scores > ts) | ((scores == ts) & (idx < truth[:, None]))
    ahead[rows, prevs] = False
    ranks = ahead.sum(axis=1)
    return np.where(truth == prevs, -1, ranks)


# ---------------------------------------------------------------- test set


@dataclass
class EvalSet:
    transitions: list
    is_new: np.ndarray
    users: np.ndarray
    prevs: np.ndarray
    truth: np.ndarray
    prev_times: np.ndarray


def evaluation_transitions(split) -> EvalSet:
    """Test transitions; each user's first one starts from their last
    training check-in. A target is new when it never occurs in that user's
    training history."""
    train, test = split.train, split.test
    pidx = train.poi_index
    out, new = [], []
    for u in test.users():
        hist = train.checkins.get(u, ())
        seen = {pidx.index(c.poi_id) for c in hist}
        evts = (hist[-1:] if hist else ()) + tuple(test.checkins[u])
        for a, b in zip(evts, evts[1:]):
            i, l = pidx.index(a.poi_id), pidx.index(b.poi_id)
            d = haversine_km(*train.poi_coords[i], *train.poi_coords[l])
            out.append(Transition(u, i, l, a.timestamp, b.timestamp, d))
            new.append(l not in seen)
    if not out:
        raise EvaluationError("test split yields no transitions")
    return EvalSet(
        out, np.array(new, dtype=bool),
        np.array([t.user for t in out], dtype=np.int64),
        np.array([t.prev_poi for t in out], dtype=np.int64),
        np.array([t.next_poi for t in out], dtype=np.int64),
        np.array([t.prev_time for t in out], dtype=float),
    )


def _context_matrix(model, split, es):
    schema = getattr(model, "schema", None)
    if schema is None:
        return None
    cat = dataset_category_to_schema(split.train, schema)
    return featurize_arrays(es.prev_times, cat[es.prevs], schema)


def truth_ranks(model, split, es=None, chunk=None):
    es = es or evaluation_transitions(split)
    G = _context_matrix(model, split, es)
    N = split.train.n_pois
    chunk = chunk or max(1, 2_000_000 // max(N, 1))
    ranks = np.empty(len(es.truth), dtype=np.int64)
    for lo in range(0, len(es.truth), chunk):
        sl = slice(lo, lo + chunk)
        sc = score_batch(model, es.users[sl], es.prevs[sl], None if G is None else G[sl])
        ranks[sl] = _ranks_of_truth(sc, es.prevs[sl], es.truth[sl])
    return ranks, es


def _user_mean(hits, users, mask=None):
    if mask is not None:
        hits, users = hits[mask], users[mask]
    if users.size == 0:
        return None, {}
    per_user = {}
    for u in np.unique(users):
        per_user[int(u)] = float(hits[users == u].mean())
    return math.fsum(per_user[u] for u in sorted(per_user)) / len(per_user), per_user


def _hits(ranks, N):
    return ((ranks >= 0) & (ranks < N)).astype(float)


def precision_at_n(model, split, N, ranks=None) -> float:
    """Per test transition, hit if the true next POI is in the top ``N``;
    averaged per user, then over users."""
    if ranks is None:
        ranks, es = truth_ranks(model, split)
    else:
        ranks, es = ranks
    value, _ = _user_mean(_hits(ranks, N), es.users)
    return value


def precision_at_n_new(model, split, N, ranks=None) -> float:
    """As :func:`precision_at_n`, restricted to targets the user never
    visited in training; users without such targets are left out."""
    if ranks is None:
        ranks, es = truth_ranks(model, split)
    else:
        ranks, es = ranks
    if not es.is_new.any():
        raise EvaluationError("no new-POI transitions in the test set")
    value, _ = _user_mean(_hits(ranks, N), es.users, es.is_new)
    return value


def _new_fraction(ranks, es, N):
    hits = _hits(ranks, N)
    vals = []
    for u in np.unique(es.users):
        m = es.users == u
        h = hits[m].sum()
        if h > 0:
            vals.append(hits[m][es.is_new[m]].sum() / h)
    return math.fsum(vals) / len(vals) if vals else 0.0


# ----------------------------------------------------------------- baseline


@dataclass
class MFBPRModel:
    """User x POI factorisation trained with BPR; ignores the previous POI
    and the context."""

    user_factors: np.ndarray
    item_factors: np.ndarray
    item_bias: np.ndarray
    poi_ids: tuple = ()
    user_ids: tuple = ()
    metadata: dict = field(default_factory=dict)

    @property
    def N(self):
        return self.item_factors.shape[0]

    @property
    def M(self):
        return self.user_factors.shape[0]

    def score_all(self, u, i=None, context=None):
        return self.user_factors[u] @ self.item_factors.T + self.item_bias

    def score_batch(self, users, prevs, G):
        return self.user_factors[users] @ self.item_factors.T + self.item_bias[None, :]


def mf_pair_loss(model, u, m, n):
    x = model.item_bias[m] - model.item_bias[n] + model.user_factors[u] @ (model.item_factors[m] - model.item_factors[n])
    return -float(np.logaddexp(0.0, -x))


def train_mf_bpr_baseline(dataset_train, config) -> MFBPRModel:
    """BPR over (user, visited POI, unvisited POI) with uniform negatives."""
    if dataset_train.provenance == "test":
        raise EvaluationError("refusing to train on a dataset tagged as test data")
    M, N = dataset_train.n_users, dataset_train.n_pois
    users, items = [], []
    for u in dataset_train.users():
        for p in dataset_train.poi_sequence(u):
            users.append(u)
            items.append(p)
    users = np.array(users, dtype=np.int64)
    items = np.array(items, dtype=np.int64)
    if users.size == 0:
        raise EvaluationError("empty training set")
    visited = np.unique(users * N + items)
    n_vis = np.bincount(visited // N, minlength=M)
    if np.any(n_vis[np.unique(users)] >= N):
        raise EvaluationError("a user has visited every POI; no negatives available")
    rng = np.random.default_rng(config.seed)
    sd = config.sigma
    P = rng.normal(0.0, sd, (M, config.D))
    Q = rng.normal(0.0, sd, (N, config.D))
    b = np.zeros(N)
    for epoch in range(config.epochs):
        rows = np.repeat(np.arange(users.size), config.negatives_per_positive)
        uu, mm = users[rows], items[rows]
        nn = rng.integers(0, N, size=rows.size)
        bad = np.isin(uu * N + nn, visited)
        while bad.any():
            k = np.nonzero(bad)[0]
            nn[k] = rng.integers(0, N, size=k.size)
            bad[k] = np.isin(uu[k] * N + nn[k], visited)
        status = _kernels.mf_bpr_pass(P, Q, b, uu, mm, nn, rng.permutation(rows.size),
                                      float(config.learning_rate), float(config.lambda_theta))
        if status >= 0:
            raise TrainingDiverged(f"MF-BPR diverged at epoch {epoch + 1}")
    return MFBPRModel(P, Q, b, dataset_train.poi_index.ids, dataset_train.user_index.ids,
                      {"fingerprint": dataset_train.fingerprint(), "kind": "mf-bpr"})


# ------------------------------------------------------------------ reports


@dataclass
class EvalReport:
    model_id: str
    dataset_id: str
    precision_at: dict
    precision_new_at: dict
    new_fraction_at: dict
    per_user_breakdown: Optional[dict] = None
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "precision_at": {str(k): v for k, v in self.precision_at.items()},
            "precision_new_at": {str(k): v for k, v in self.precision_new_at.items()},
            "new_fraction_at": {str(k): v for k, v in self.new_fraction_at.items()},
            "per_user_breakdown": self.per_user_breakdown,
            "config": self.config,
        }


def _check_compatible(model, split):
    train = split.train
    if getattr(model, "N", train.n_pois) != train.n_pois or getattr(model, "M", train.n_users) != train.n_users:
        raise EvaluationError("model and dataset have different entity counts")
    ids = getattr(model, "poi_ids", ())
    if ids and tuple(ids) != train.poi_index.ids:
        raise EvaluationError("model and dataset POI indexes differ")
    fp = getattr(model, "metadata", {}).get("fingerprint")
    if fp is not None and fp != train.fingerprint():
        raise FingerprintMismatch("model was trained on a different dataset (fingerprint mismatch)")


def evaluate_run(models, split, cutoffs=DEFAULT_CUTOFFS, model_ids=None, per_user=False, dataset_id=""):
    """Both metrics at every cutoff for every model."""
    cutoffs = sorted(int(c) for c in cutoffs)
    es = evaluation_transitions(split)
    has_new = bool(es.is_new.any())
    reports = []
    for k, model in enumerate(models):
        _check_compatible(model, split)
        ranks, _ = truth_ranks(model, split, es)
        p, pn, nf, breakdown = {}, {}, {}, {}
        for N in cutoffs:
            hits = _hits(ranks, N)
            p[N], pu = _user_mean(hits, es.users)
            pn[N] = _user_mean(hits, es.users, es.is_new)[0] if has_new else 0.0
            nf[N] = _new_fraction(ranks, es, N)
            if per_user:
                for u, v in pu.items():
                    breakdown.setdefault(str(u), {})[str(N)] = v
        mid = model_ids[k] if model_ids else f"model{k}"
        cfg = getattr(model, "metadata", {}).get("config", {})
        reports.append(EvalReport(mid, dataset_id, p, pn, nf, breakdown if per_user else None, cfg))
    return reports


def report_table(reports):
    """Aligned text table, methods as rows and metrics as columns."""
    if not reports:
        return ""
    cutoffs = list(reports[0].precision_at)
    head = ["method"] + [f"P@{n}" for n in cutoffs] + [f"Pnew@{n}" for n in cutoffs]
    rows = [[r.model_id] + [f"{r.precision_at[n]:.6g}" for n in cutoffs]
            + [f"{r.precision_new_at[n]:.6g}" for n in cutoffs] for r in reports]
    widths = [max(len(x[c]) for x in [head] + rows) for c in range(len(head))]
    fmt = lambda row: "  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip()  # noqa: E731
    return "\n".join([fmt(head)] + [fmt(r) for r in rows]) + "\n"


def report_series(reports):
    """Columnar series: cutoff then one column per model and metric."""
    cutoffs = list(reports[0].precision_at)
    head = ["N"] + [f"{r.model_id}:P" for r in reports] + [f"{r.model_id}:Pnew" for r in reports]
    lines = ["\t".join(head)]
    for n in cutoffs:
        lines.append("\t".join([str(n)] + [repr(r.precision_at[n]) for r in reports]
                               + [repr(r.precision_new_at[n]) for r in reports]))
    return "\n".join(lines) + "\n"


def reports_json(reports):
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
