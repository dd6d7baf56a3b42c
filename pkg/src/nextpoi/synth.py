"""Synthetic check-in corpora drawn from a known latent-pattern model, and
brute-force oracles for scoring and ranking."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .checkins import CheckIn, Dataset, _build_dataset, format_checkin
from .features import FeatureSchema, featurize_arrays
from .model import ModelParams, softmax
from .spatial import EARTH_RADIUS_KM, haversine_km

TOP_LEVEL_CATEGORIES = (
    "Arts & Entertainment", "College & University", "Food", "Outdoors",
    "Work", "Nightlife Spot", "Shop", "Travel Spot",
)
KM_PER_DEG = math.pi * EARTH_RADIUS_KM / 180.0
START_TIME = 1_300_000_000


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 200
    n_pois: int = 300
    n_categories: int = 8
    events_per_user: int = 150
    K_true: int = 2
    D_true: int = 4
    gate_sharpness: float = 3.0
    geo_extent_km: float = 20.0
    seed: int = 0
    # std of each pattern-level inner product
    factor_scale: float = 2.0
    rho_scale: float = 1.0
    candidate_pool: int = 200
    time_bins: int = 24
    # share of users whose gate weights are sign-flipped (per-user truth)
    cohort_fraction: float = 0.0
    # category is a function of the previous POI, so gating on it adds
    # nothing a context-free model cannot absorb; off by default
    gate_on_category: bool = False
    # per pattern, this share of POIs gets +hot_boost on latent dimension 0
    hot_fraction: float = 0.0
    hot_boost: float = 3.0
    # "user": hot sets live in the user term, "transition": in the
    # previous-POI term, where per-user factors cannot mimic a flipped gate
    hot_term: str = "user"
    # "random": Gaussian gate weights; "alternating": hour bins assigned to
    # patterns round-robin, so every user spends about equal time in each
    gate_layout: str = "random"
    # with hot_term="transition": previous POIs fall into this many clusters,
    # each with its own hot set per pattern
    hot_clusters: int = 1
    # mean of the exponential part of a short hop between check-ins
    short_gap_hours: float = 4.0
    sparse_user_fraction: float = 0.0
    sparse_events_per_user: int = 25
    center_lat: float = 34.05
    center_lon: float = -118.24

    def __post_init__(self):
        for name in ("n_users", "n_pois", "events_per_user", "K_true", "D_true", "candidate_pool"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hot_term not in ("user", "transition"):
            raise ValueError("hot_term must be 'user' or 'transition'")
        if not 1 <= self.hot_clusters <= self.D_true:
            raise ValueError("hot_clusters must lie in [1, D_true]")
        if self.gate_layout not in ("random", "alternating"):
            raise ValueError("gate_layout must be 'random' or 'alternating'")
        if self.n_categories < 0 or self.gate_sharpness < 0 or self.geo_extent_km <= 0:
            raise ValueError("invalid synthetic config")


@dataclass
class SynthCorpus:
    dataset: Dataset
    truth: ModelParams
    novelty: dict  # user id -> list of bool, True on a user's first visit to a POI
    patterns: dict  # user id -> list of the pattern drawn for each transition
    records: list

    def lines(self):
        return [format_checkin(c) + "\n" for c in self.records]


def category_labels(n):
    if n <= len(TOP_LEVEL_CATEGORIES):
        return TOP_LEVEL_CATEGORIES[:n]
    return tuple(f"c{k + 1}" for k in range(n))


def _place_pois(rng, cfg):
    half = cfg.geo_extent_km / 2.0
    dy = rng.uniform(-half, half, cfg.n_pois)
    dx = rng.uniform(-half, half, cfg.n_pois)
    lat = cfg.center_lat + dy / KM_PER_DEG
    lon = cfg.center_lon + dx / (KM_PER_DEG * math.cos(math.radians(cfg.center_lat)))
    return np.column_stack([lat, lon])


def _draw_gap_seconds(rng, short_hours=4.0):
    # mostly short hops, occasionally a multi-day pause
    if rng.random() < 0.75:
        return 600.0 + rng.exponential(short_hours * 3600.0)
    return 600.0 + rng.exponential(48 * 3600.0)


def make_truth(cfg: SynthConfig, rng, coords, poi_category, schema):
    K, D, M, N, F = cfg.K_true, cfg.D_true, cfg.n_users, cfg.n_pois, schema.total_F
    sd = math.sqrt(cfg.factor_scale) / D**0.25
    U = rng.normal(0.0, sd, (K, M, D))
    VLU = rng.normal(0.0, sd, (K, N, D))
    VLI = rng.normal(0.0, sd, (K, N, D))
    VIL = rng.normal(0.0, sd, (K, N, D))
    rho = cfg.rho_scale * rng.uniform(0.5, 1.5, K)
    if cfg.hot_fraction > 0:
        n_hot = max(1, int(round(cfg.hot_fraction * N)))
        for s in range(K):
            hot = rng.choice(N, size=n_hot, replace=False)
            if cfg.hot_term == "user":
                U[s, :, 0] = rng.uniform(0.75, 1.25, M)
                VLU[s, :, 0] = 0.0
                VLU[s, hot, 0] = cfg.hot_boost
            else:
                r = cfg.hot_clusters
                cluster = rng.integers(0, r, N)
                VIL[s, :, :r] = 0.0
                VIL[s, np.arange(N), cluster] = rng.uniform(0.75, 1.25, N)
                VLI[s, :, :r] = 0.0
                VLI[s, hot, 0] = cfg.hot_boost
                for c in range(1, r):
                    VLI[s, rng.choice(N, size=n_hot, replace=False), c] = cfg.hot_boost
    base = cfg.gate_sharpness * rng.normal(0.0, 1.0, (K, F))
    if cfg.gate_layout == "alternating":
        base[:] = 0.0
        hours = np.arange(schema.time_bins)
        base[hours % K, hours] = cfg.gate_sharpness
    if not cfg.gate_on_category:
        base[:, schema.category_offset:] = 0.0
    if cfg.cohort_fraction > 0:
        signs = np.where(rng.random(M) < cfg.cohort_fraction, -1.0, 1.0)
        alpha = signs[:, None, None] * base[None]
        mode = "per-user"
    else:
        signs = np.ones(M)
        alpha = base
        mode = "global"
    model = ModelParams(
        U, VLU, VLI, VIL, rho, alpha, mode, schema, coords, lambda_theta=1.0, poi_category=poi_category,
        user_ids=tuple(f"u{k:05d}" for k in range(M)), poi_ids=tuple(f"p{k:05d}" for k in range(N)),
        metadata={"kind": "synthetic-truth", "cohort_sign": signs.tolist()},
    )
    return model


def generate(cfg: SynthConfig) -> SynthCorpus:
    """Sample a corpus: POIs uniform in a square, and per user a walk where
    each step draws a pattern from the true gate at the current context and
    then the next POI from the softmax of that pattern's scores over the
    ``candidate_pool`` nearest POIs."""
    rng = np.random.default_rng(cfg.seed)
    coords = _place_pois(rng, cfg)
    labels = category_labels(cfg.n_categories)
    pcat = rng.integers(0, len(labels), cfg.n_pois) if labels else np.full(cfg.n_pois, -1)
    schema = FeatureSchema(cfg.time_bins, tuple(labels), 0.0)
    truth = make_truth(cfg, rng, coords, pcat, schema)

    N = cfg.n_pois
    dist = haversine_km(coords[:, None, 0], coords[:, None, 1], coords[None, :, 0], coords[None, :, 1])
    np.fill_diagonal(dist, np.inf)
    pool = min(cfg.candidate_pool, N - 1)
    neighbours = np.argsort(dist, axis=1, kind="stable")[:, :pool]
    inv_d = 1.0 / np.maximum(dist, truth.min_distance_km)

    n_events = np.full(cfg.n_users, cfg.events_per_user)
    if cfg.sparse_user_fraction > 0:
        sparse = rng.random(cfg.n_users) < cfg.sparse_user_fraction
        n_events[sparse] = cfg.sparse_events_per_user

    records, novelty, patterns = [], {}, {}
    for u in range(cfg.n_users):
        uid = truth.user_ids[u]
        t = START_TIME + rng.uniform(0, 30 * 86400.0)
        i = int(rng.integers(N)) if N > 1 else 0
        seen = {i}
        evts = [CheckIn(uid, truth.poi_ids[i], float(round(t)), float(coords[i, 0]), float(coords[i, 1]),
                        labels[pcat[i]] if labels else None)]
        flags, drawn = [True], []
        alpha_u = truth.gate_weights(u)
        for _ in range(int(n_events[u]) - 1):
            if N < 2:
                break
            g = featurize_arrays([round(t)], [pcat[i] if labels else -1], schema)[0]
            s = int(rng.choice(cfg.K_true, p=softmax(alpha_u @ g)))
            cand = neighbours[i]
            x = (truth.next_factors_user[s, cand] @ truth.user_factors[s, u]
                 + truth.next_factors_prev[s, cand] @ truth.prev_factors[s, i]
                 + truth.rho[s] * inv_d[i, cand])
            l = int(cand[rng.choice(cand.size, p=softmax(x))])
            t += _draw_gap_seconds(rng, cfg.short_gap_hours)
            evts.append(CheckIn(uid, truth.poi_ids[l], float(round(t)), float(coords[l, 0]), float(coords[l, 1]),
                                labels[pcat[l]] if labels else None))
            flags.append(l not in seen)
            seen.add(l)
            drawn.append(s)
            i = l
        records.extend(evts)
        novelty[uid] = flags
        patterns[uid] = drawn
    dataset = _build_dataset(records)
    return SynthCorpus(dataset, truth, novelty, patterns, records)


def config_dict(cfg):
    return asdict(cfg)


def displacement_walk(n_users=100, events_per_user=300, exponent=-1.0, d_min=0.01, d_max=50.0, seed=0,
                      center_lat=34.05, center_lon=-118.24):
    """Walks whose step lengths follow a power law.

    Step lengths have density proportional to ``d**(exponent - 1)`` on
    ``[d_min, d_max]``, so counts in logarithmic distance bins scale as
    ``d**exponent``. Every check-in lands on a fresh POI at the exact
    displaced position.
    """
    rng = np.random.default_rng(seed)
    q = exponent  # exponent of the CDF's power
    records = []
    pid = 0
    for u in range(n_users):
        lat, lon = center_lat, center_lon
        t = START_TIME + u * 60.0
        for e in range(events_per_user):
            if e:
                r = rng.random()
                if q == 0:
                    d = d_min * (d_max / d_min) ** r
                else:
                    d = (d_min**q + r * (d_max**q - d_min**q)) ** (1.0 / q)
                theta = rng.uniform(0, 2 * math.pi)
                lat2 = lat + d * math.cos(theta) / KM_PER_DEG
                lon = lon + d * math.sin(theta) / (KM_PER_DEG * math.cos(math.radians((lat + lat2) / 2)))
                lat = lat2
                t += 3600.0
            records.append(CheckIn(f"u{u:05d}", f"p{pid:07d}", t, lat, lon, None))
            pid += 1
    return _build_dataset(records)


# ------------------------------------------------------------------- oracles


def _dot(a, b):
    return math.fsum(float(x) * float(y) for x, y in zip(a, b))


def brute_force_scores(params: ModelParams, u, i, context, candidates=None):
    """Mixture scores by explicit loops with exactly-rounded accumulation."""
    N = params.N
    cands = [c for c in range(N) if c != i] if candidates is None else list(candidates)
    w = params.gate_weights(u)
    logits = [_dot(w[s], context) for s in range(params.K)]
    mx = max(logits)
    ex = [math.exp(z - mx) for z in logits]
    tot = math.fsum(ex)
    p = [e / tot for e in ex]
    lat_i, lon_i = params.poi_coords[i]
    out = {}
    for c in cands:
        d = haversine_km(float(lat_i), float(lon_i), float(params.poi_coords[c, 0]), float(params.poi_coords[c, 1]))
        inv = 1.0 / max(d, params.min_distance_km)
        terms = []
        for s in range(params.K):
            xs = math.fsum([
                _dot(params.user_factors[s, u], params.next_factors_user[s, c]),
                _dot(params.next_factors_prev[s, c], params.prev_factors[s, i]),
                float(params.rho[s]) * inv,
            ])
            terms.append(p[s] * xs)
        out[c] = math.fsum(terms)
    return out


def brute_force_rank(params: ModelParams, u, i, context, candidates=None):
    """Full candidate ranking: descending score, ties by ascending index."""
    scores = brute_force_scores(params, u, i, context, candidates)
    return sorted(scores, key=lambda c: (-scores[c], c))


def align_truth(truth: ModelParams, dataset: Dataset) -> ModelParams:
    """Ground-truth parameters re-indexed onto the dataset's user and POI
    indexes (POIs never visited in the corpus are dropped)."""
    pu = np.array([truth.user_ids.index(x) for x in dataset.user_index.ids], dtype=np.int64)
    pp = np.array([truth.poi_ids.index(x) for x in dataset.poi_index.ids], dtype=np.int64)
    alpha = truth.alpha if truth.gate_mode == "global" else truth.alpha[pu]
    return ModelParams(
        truth.user_factors[:, pu], truth.next_factors_user[:, pp], truth.next_factors_prev[:, pp],
        truth.prev_factors[:, pp], truth.rho.copy(), alpha.copy(), truth.gate_mode, truth.schema,
        truth.poi_coords[pp], truth.lambda_theta, truth.min_distance_km, truth.poi_category[pp],
        dataset.user_index.ids, dataset.poi_index.ids, {"kind": "synthetic-truth"},
    )
