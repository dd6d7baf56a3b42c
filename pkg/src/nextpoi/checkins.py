"""Check-in logs: parsing, filtering, chronological splitting, transition
construction and descriptive statistics."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, EmptyDatasetError, ParseError
from .spatial import DEFAULT_FIT_CUTOFF_KM, PowerLawFit, fit_displacements, haversine_km

logger = logging.getLogger(__name__)

DEFAULT_COLUMNS = ("user", "poi", "timestamp", "lat", "lon", "category")
MANDATORY = ("user", "poi", "timestamp", "lat", "lon")

DEFAULT_DISTANCE_THRESHOLDS_KM = (0.1, 0.5, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 5000, 20100)
WEEKDAY_NAMES = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")


@dataclass(frozen=True)
class CheckIn:
    user_id: str
    poi_id: str
    timestamp: float
    lat: float
    lon: float
    category: Optional[str] = None


def _parse_timestamp(raw):
    try:
        return float(raw)
    except ValueError:
        pass
    # ISO-8601 as found in raw Gowalla dumps ("2010-10-19T23:55:27Z")
    dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def parse_checkin_line(line: str, columns: Sequence[str] = DEFAULT_COLUMNS, lineno: int = 1) -> CheckIn:
    """Parse one tab- or comma-separated check-in record.

    Tab is used as the delimiter whenever the line contains one.
    """
    line = line.rstrip("\r\n")
    sep = "\t" if "\t" in line else ","
    parts = line.split(sep)
    values = {}
    for pos, name in enumerate(columns):
        values[name] = parts[pos].strip() if pos < len(parts) else ""
    for name in MANDATORY:
        if not values.get(name):
            raise ParseError(lineno, name, "missing mandatory field")

    try:
        ts = _parse_timestamp(values["timestamp"])
    except ValueError:
        raise ParseError(lineno, "timestamp", f"malformed timestamp {values['timestamp']!r}") from None
    if not math.isfinite(ts) or ts <= 0:
        raise ParseError(lineno, "timestamp", f"timestamp must be positive, got {values['timestamp']!r}")

    coords = {}
    for name, bound in (("lat", 90.0), ("lon", 180.0)):
        try:
            v = float(values[name])
        except ValueError:
            raise ParseError(lineno, name, f"malformed number {values[name]!r}") from None
        if not (-bound <= v <= bound):
            raise ParseError(lineno, name, f"{name} out of range: {v}")
        coords[name] = v

    category = values.get("category") or None
    return CheckIn(values["user"], values["poi"], ts, coords["lat"], coords["lon"], category)


def read_checkins(lines: Iterable[str], columns: Sequence[str] = DEFAULT_COLUMNS):
    """Parse an iterable of lines, skipping blanks and ``#`` comments."""
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        out.append(parse_checkin_line(line, columns, lineno))
    return out


class IndexMap:
    """Bijection between opaque ids and dense integers 0..n-1."""

    def __init__(self, ids: Iterable[str] = ()):
        self.ids = tuple(ids)
        self._lookup = {k: i for i, k in enumerate(self.ids)}
        if len(self._lookup) != len(self.ids):
            raise ValueError("duplicate ids in index")

    def index(self, key):
        return self._lookup[key]

    def id_of(self, k):
        return self.ids[k]

    def get(self, key, default=None):
        return self._lookup.get(key, default)

    def __contains__(self, key):
        return key in self._lookup

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __eq__(self, other):
        return isinstance(other, IndexMap) and self.ids == other.ids

    def __repr__(self):
        return f"IndexMap(n={len(self.ids)})"


@dataclass(frozen=True)
class Dataset:
    """Per-user, time-sorted check-ins plus dense entity indexes.

    ``checkins`` maps a dense user index to that user's check-ins. Split parts
    share the parent's indexes, so a user may be absent from ``checkins``.
    """

    checkins: dict
    user_index: IndexMap
    poi_index: IndexMap
    category_index: IndexMap
    poi_coords: np.ndarray
    poi_category: np.ndarray
    provenance: str = "full"

    @property
    def n_users(self):
        return len(self.user_index)

    @property
    def n_pois(self):
        return len(self.poi_index)

    @property
    def n_checkins(self):
        return sum(len(v) for v in self.checkins.values())

    @property
    def has_categories(self):
        return len(self.category_index) > 0

    def users(self):
        return sorted(self.checkins)

    def poi_sequence(self, u):
        return [self.poi_index.index(c.poi_id) for c in self.checkins.get(u, ())]

    def category_label(self, poi):
        c = int(self.poi_category[poi])
        return None if c < 0 else self.category_index.id_of(c)

    def iter_checkins(self):
        for u in self.users():
            yield from self.checkins[u]

    def with_checkins(self, checkins, provenance):
        return Dataset(checkins, self.user_index, self.poi_index, self.category_index,
                       self.poi_coords, self.poi_category, provenance)

    def fingerprint(self):
        """Stable digest of the entity indexes and the check-in content."""
        h = hashlib.sha256()
        for part in (self.user_index.ids, self.poi_index.ids, self.category_index.ids):
            h.update(json.dumps(part).encode())
        h.update(np.ascontiguousarray(self.poi_coords, dtype="<f8").tobytes())
        for u in self.users():
            for c in self.checkins[u]:
                h.update(f"{u}\t{self.poi_index.index(c.poi_id)}\t{c.timestamp!r}\n".encode())
        return h.hexdigest()


def _build_dataset(records, provenance="full"):
    by_user = defaultdict(list)
    for r in records:
        by_user[r.user_id].append(r)
    user_index = IndexMap(sorted(by_user))
    poi_first = {}
    for r in records:
        poi_first.setdefault(r.poi_id, r)
    poi_index = IndexMap(sorted(poi_first))
    cat_first = {}
    for r in records:
        if r.category is not None:
            cat_first.setdefault(r.poi_id, r.category)
    category_index = IndexMap(sorted(set(cat_first.values())))
    coords = np.array([[poi_first[p].lat, poi_first[p].lon] for p in poi_index.ids], dtype=float).reshape(-1, 2)
    pcat = np.array(
        [category_index.index(cat_first[p]) if p in cat_first else -1 for p in poi_index.ids], dtype=np.int64
    )
    coords.setflags(write=False)
    pcat.setflags(write=False)
    checkins = {
        user_index.index(uid): tuple(sorted(evts, key=lambda c: c.timestamp)) for uid, evts in by_user.items()
    }
    return Dataset(checkins, user_index, poi_index, category_index, coords, pcat, provenance)


def ingest(lines: Iterable[str], min_user_checkins: int = 10, columns: Sequence[str] = DEFAULT_COLUMNS) -> Dataset:
    """Parse check-ins and keep only users with at least ``min_user_checkins``
    events. Indexes are built over retained users and their POIs only."""
    if min_user_checkins < 1:
        raise ConfigError("min_user_checkins must be >= 1")
    records = read_checkins(lines, columns)
    counts = Counter(r.user_id for r in records)
    kept = [r for r in records if counts[r.user_id] >= min_user_checkins]
    if not kept:
        raise EmptyDatasetError(f"no user has >= {min_user_checkins} check-ins")
    dropped = sum(1 for n in counts.values() if n < min_user_checkins)
    if dropped:
        logger.info("dropped %d users with fewer than %d check-ins", dropped, min_user_checkins)
    return _build_dataset(kept)


def load_dataset(path, min_user_checkins=1, columns=DEFAULT_COLUMNS):
    with open(path, encoding="utf-8") as fh:
        return ingest(fh, min_user_checkins, columns)


def _fmt_ts(ts):
    return str(int(ts)) if float(ts).is_integer() else repr(float(ts))


def format_checkin(c: CheckIn) -> str:
    return "\t".join([c.user_id, c.poi_id, _fmt_ts(c.timestamp), repr(float(c.lat)), repr(float(c.lon)), c.category or ""])


def write_checkins(dataset_or_records, fh):
    records = dataset_or_records.iter_checkins() if isinstance(dataset_or_records, Dataset) else dataset_or_records
    for c in records:
        fh.write(format_checkin(c) + "\n")


@dataclass(frozen=True)
class SplitDataset:
    train: Dataset
    test: Dataset
    split_fraction: float


def _n_train(n, fraction):
    # guard against 0.7*10 == 7.000000000000001
    return min(n, math.ceil(fraction * n - 1e-9))


def chronological_split(dataset: Dataset, fraction: float = 0.8) -> SplitDataset:
    """Per user, the earliest ``ceil(fraction * n)`` events go to train and
    the rest to test. Users with an empty test part are absent from test."""
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"split fraction must be in (0, 1), got {fraction}")
    train, test = {}, {}
    for u, evts in dataset.checkins.items():
        k = _n_train(len(evts), fraction)
        train[u] = evts[:k]
        if k < len(evts):
            test[u] = evts[k:]
    return SplitDataset(dataset.with_checkins(train, "train"), dataset.with_checkins(test, "test"), fraction)


def load_split(train_lines, test_lines, fraction=0.8, columns=DEFAULT_COLUMNS):
    """Rebuild a split from its two files with shared indexes.

    Indexes are built over the union, so they coincide with those of the
    dataset the split was made from.
    """
    train_recs = read_checkins(train_lines, columns)
    test_recs = read_checkins(test_lines, columns)
    if not train_recs:
        raise EmptyDatasetError("train part is empty")
    full = _build_dataset(train_recs + test_recs)
    train_ids = {id(r) for r in train_recs}
    train, test = {}, {}
    for u, evts in full.checkins.items():
        tr = tuple(c for c in evts if id(c) in train_ids)
        te = tuple(c for c in evts if id(c) not in train_ids)
        if tr:
            train[u] = tr
        if te:
            test[u] = te
    return SplitDataset(full.with_checkins(train, "train"), full.with_checkins(test, "test"), fraction)


@dataclass(frozen=True)
class Transition:
    user: int
    prev_poi: int
    next_poi: int
    prev_time: float
    next_time: float
    distance_km: float


def _pair_transitions(dataset, u, evts, max_gap_hours):
    out = []
    for a, b in zip(evts, evts[1:]):
        if max_gap_hours is not None and (b.timestamp - a.timestamp) > max_gap_hours * 3600.0:
            continue
        i = dataset.poi_index.index(a.poi_id)
        l = dataset.poi_index.index(b.poi_id)
        d = haversine_km(*dataset.poi_coords[i], *dataset.poi_coords[l])
        out.append(Transition(u, i, l, a.timestamp, b.timestamp, d))
    return out


def build_transitions(dataset: Dataset, max_gap_hours: Optional[float] = None) -> list:
    """Every consecutive pair of a user's check-ins, optionally dropping
    pairs further apart than ``max_gap_hours``."""
    out = []
    skipped = 0
    for u in dataset.users():
        evts = dataset.checkins[u]
        if len(evts) < 2:
            skipped += 1
            continue
        out.extend(_pair_transitions(dataset, u, evts, max_gap_hours))
    if skipped:
        logger.info("%d users with fewer than 2 events produce no transitions", skipped)
    return out


def transition_arrays(transitions):
    """Columnar view of a transition list."""
    n = len(transitions)
    return {
        "user": np.fromiter((t.user for t in transitions), dtype=np.int64, count=n),
        "prev_poi": np.fromiter((t.prev_poi for t in transitions), dtype=np.int64, count=n),
        "next_poi": np.fromiter((t.next_poi for t in transitions), dtype=np.int64, count=n),
        "prev_time": np.fromiter((t.prev_time for t in transitions), dtype=float, count=n),
        "next_time": np.fromiter((t.next_time for t in transitions), dtype=float, count=n),
        "distance_km": np.fromiter((t.distance_km for t in transitions), dtype=float, count=n),
    }


# ---------------------------------------------------------------- statistics


@dataclass(frozen=True)
class StatsReport:
    distance_cdf: list
    time_gap_cdf: list
    visit_count_histogram: dict
    new_poi_ratio_by_timescale: list
    category_transition_matrix_by_weekday: Optional[list]
    tensor_sparsity: float
    empty_category_rows: list = field(default_factory=list)
    n_users: int = 0
    n_pois: int = 0
    n_checkins: int = 0
    avg_checkins: float = 0.0
    n_transitions: int = 0
    category_labels: list = field(default_factory=list)
    power_law: Optional[PowerLawFit] = None

    def to_dict(self):
        d = {
            "distance_cdf": [list(p) for p in self.distance_cdf],
            "time_gap_cdf": [list(p) for p in self.time_gap_cdf],
            "visit_count_histogram": {str(k): v for k, v in sorted(self.visit_count_histogram.items())},
            "new_poi_ratio_by_timescale": [list(p) for p in self.new_poi_ratio_by_timescale],
            "category_transition_matrix_by_weekday": self.category_transition_matrix_by_weekday,
            "tensor_sparsity": self.tensor_sparsity,
            "empty_category_rows": [list(p) for p in self.empty_category_rows],
            "n_users": self.n_users,
            "n_pois": self.n_pois,
            "n_checkins": self.n_checkins,
            "avg_checkins": self.avg_checkins,
            "n_transitions": self.n_transitions,
            "category_labels": list(self.category_labels),
            "power_law": None if self.power_law is None else self.power_law.to_dict(),
        }
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def to_text(self):
        g = lambda x: f"{x:.6g}"  # noqa: E731
        lines = [
            "# check-in statistics",
            f"n_users = {self.n_users}",
            f"n_pois = {self.n_pois}",
            f"n_checkins = {self.n_checkins}",
            f"avg_checkins = {g(self.avg_checkins)}",
            f"n_transitions = {self.n_transitions}",
            f"tensor_sparsity = {g(self.tensor_sparsity)}",
        ]
        if self.power_law is not None:
            p = self.power_law
            lines.append(f"power_law = a {g(p.a)} k {g(p.k)} r2 {g(p.r_squared)} cutoff_km {g(p.max_distance_km)}")
        lines.append("[distance_cdf] km fraction")
        lines += [f"{g(t)} {g(v)}" for t, v in self.distance_cdf]
        lines.append("[time_gap_cdf] hours fraction")
        lines += [f"{g(t)} {g(v)}" for t, v in self.time_gap_cdf]
        lines.append("[visit_count_histogram] visits fraction_of_pois")
        lines += [f"{k} {g(v)}" for k, v in sorted(self.visit_count_histogram.items())]
        lines.append("[new_poi_ratio_by_timescale] timescale ratio")
        lines += [f"{g(t)} {g(v)}" for t, v in self.new_poi_ratio_by_timescale]
        if self.category_transition_matrix_by_weekday is not None:
            labels = self.category_labels
            for w, mat in enumerate(self.category_transition_matrix_by_weekday):
                lines.append(f"[category_transitions {WEEKDAY_NAMES[w]}] rows=from cols=to " + " ".join(labels))
                for lab, row in zip(labels, mat):
                    lines.append(lab + " " + " ".join(g(v) for v in row))
            if self.empty_category_rows:
                lines.append("[empty_category_rows] weekday category")
                lines += [f"{WEEKDAY_NAMES[w]} {labels[r]}" for w, r in self.empty_category_rows]
        return "\n".join(lines) + "\n"


def _cdf(values, thresholds):
    values = np.sort(np.asarray(values, dtype=float))
    n = values.size
    return [(float(t), float(np.searchsorted(values, t, side="right") / n)) for t in thresholds]


def _gap_thresholds(max_gap_h):
    out = [1.0]
    while out[-1] < max_gap_h:
        out.append(out[-1] * 2)
    return out


def new_poi_ratios(dataset, scales=tuple(i / 10 for i in range(1, 10))):
    """Per time-scale fraction ``t``: the share of each user's check-ins
    after the first ``ceil(t*n)`` events whose POI was not visited in those
    first events; averaged over users with a non-empty remainder."""
    out = []
    for t in scales:
        ratios = []
        for u in dataset.users():
            seq = dataset.poi_sequence(u)
            k = _n_train(len(seq), t)
            after = seq[k:]
            if not after:
                continue
            seen = set(seq[:k])
            ratios.append(sum(1 for p in after if p not in seen) / len(after))
        out.append((float(t), float(np.mean(ratios)) if ratios else 0.0))
    return out


def _local_weekday(ts, utc_offset_hours):
    days = np.floor((np.asarray(ts, dtype=float) + utc_offset_hours * 3600.0) / 86400.0).astype(np.int64)
    # 1970-01-01 was a Thursday
    return (days + 3) % 7


def compute_stats(dataset: Dataset, utc_offset_hours: float = 0.0,
                  distance_thresholds_km=DEFAULT_DISTANCE_THRESHOLDS_KM,
                  fit_cutoff_km: float = DEFAULT_FIT_CUTOFF_KM) -> StatsReport:
    if dataset.n_checkins == 0:
        raise EmptyDatasetError("cannot compute statistics of an empty dataset")
    trans = build_transitions(dataset)
    arr = transition_arrays(trans)
    dists = arr["distance_km"]
    gaps_h = (arr["next_time"] - arr["prev_time"]) / 3600.0

    if len(trans):
        thresholds = list(distance_thresholds_km)
        if dists.max() > thresholds[-1]:
            thresholds.append(float(dists.max()))
        distance_cdf = _cdf(dists, thresholds)
        time_gap_cdf = _cdf(gaps_h, _gap_thresholds(float(gaps_h.max())))
    else:
        distance_cdf, time_gap_cdf = [], []

    visits = Counter(dataset.poi_index.index(c.poi_id) for c in dataset.iter_checkins())
    count_hist = Counter(visits.values())
    n_visited = len(visits)
    visit_hist = {k: v / n_visited for k, v in sorted(count_hist.items())}

    matrices = None
    empty_rows = []
    if dataset.has_categories and len(trans):
        C = len(dataset.category_index)
        counts = np.zeros((7, C, C))
        wd = _local_weekday(arr["prev_time"], utc_offset_hours)
        ci = dataset.poi_category[arr["prev_poi"]]
        cl = dataset.poi_category[arr["next_poi"]]
        ok = (ci >= 0) & (cl >= 0)
        np.add.at(counts, (wd[ok], ci[ok], cl[ok]), 1.0)
        rows = counts.sum(axis=2, keepdims=True)
        mats = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
        empty_rows = [(int(w), int(r)) for w, r in zip(*np.nonzero(rows[:, :, 0] == 0))]
        matrices = mats.tolist()

    cells = {(t.user, t.prev_poi, t.next_poi) for t in trans}
    M, N = dataset.n_users, dataset.n_pois
    sparsity = len(cells) / (M * N * N) if cells else 0.0

    fit = None
    try:
        fit = fit_displacements(dists, max_distance_km=fit_cutoff_km)
    except Exception as exc:  # too few displacements for a fit is not fatal here
        logger.info("power-law fit skipped: %s", exc)

    return StatsReport(
        distance_cdf=distance_cdf,
        time_gap_cdf=time_gap_cdf,
        visit_count_histogram=visit_hist,
        new_poi_ratio_by_timescale=new_poi_ratios(dataset),
        category_transition_matrix_by_weekday=matrices,
        tensor_sparsity=sparsity,
        empty_category_rows=empty_rows,
        n_users=len(dataset.checkins),
        n_pois=N,
        n_checkins=dataset.n_checkins,
        avg_checkins=dataset.n_checkins / max(1, len(dataset.checkins)),
        n_transitions=len(trans),
        category_labels=list(dataset.category_index.ids),
        power_law=fit,
    )
