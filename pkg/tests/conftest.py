import math

import numpy as np
import pytest

from nextpoi.checkins import CheckIn
from nextpoi.features import FeatureSchema, featurize_time
from nextpoi.model import ModelParams
from nextpoi.spatial import haversine_km
from nextpoi.trainer import BprTriple

ACCEPTANCE_LINES = []


def record_acceptance(number, passed, detail):
    line = f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


LA = (34.05, -118.24)


def random_coords(rng, n, extent_deg=0.15):
    return np.column_stack([LA[0] + rng.uniform(-extent_deg, extent_deg, n),
                            LA[1] + rng.uniform(-extent_deg, extent_deg, n)])


def random_model(rng, K=2, D=4, M=5, N=12, gate_mode="global", time_bins=4, categories=("Food", "Shop"),
                 scale=0.5, lambda_theta=None):
    schema = FeatureSchema(time_bins, tuple(categories), 0.0)
    F = schema.total_F
    alpha_shape = (K, F) if gate_mode == "global" else (M, K, F)
    return ModelParams(
        rng.normal(0, scale, (K, M, D)), rng.normal(0, scale, (K, N, D)),
        rng.normal(0, scale, (K, N, D)), rng.normal(0, scale, (K, N, D)),
        rng.normal(0, scale, K), rng.normal(0, scale, alpha_shape), gate_mode, schema,
        random_coords(rng, N),
        lambda_theta=float(rng.uniform(0.01, 1.0)) if lambda_theta is None else lambda_theta,
        poi_category=rng.integers(-1, len(categories), N) if categories else np.full(N, -1),
        user_ids=tuple(f"u{k}" for k in range(M)), poi_ids=tuple(f"p{k}" for k in range(N)),
    )


def random_context(rng, model, i=None):
    ts = float(rng.integers(1_200_000_000, 1_500_000_000))
    labels = model.schema.category_labels
    cat = None
    if i is not None and model.poi_category[i] >= 0:
        cat = labels[model.poi_category[i]]
    return featurize_time(ts, cat, model.schema)


def random_triple(rng, model):
    u = int(rng.integers(model.M))
    i, m, n = (int(x) for x in rng.choice(model.N, size=3, replace=False))
    c = model.poi_coords
    return BprTriple(u, i, m, n, random_context(rng, model, i),
                     haversine_km(c[i, 0], c[i, 1], c[m, 0], c[m, 1]),
                     haversine_km(c[i, 0], c[i, 1], c[n, 0], c[n, 1]))


def make_records(visits, start=1_300_000_000, step=3600.0):
    """``visits`` maps user id to a list of POI ids of the form ``p<k>``; POI k
    sits on a small grid."""
    out = []
    for u, pois in visits.items():
        for k, p in enumerate(pois):
            idx = int(p[1:])
            out.append(CheckIn(u, p, start + k * step, 34.0 + 0.01 * (idx % 10), -118.0 - 0.01 * (idx // 10),
                               "Food" if idx % 2 else "Shop"))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def close(a, b, rel=1e-12, abs_=0.0):
    return math.isclose(a, b, rel_tol=rel, abs_tol=abs_)
