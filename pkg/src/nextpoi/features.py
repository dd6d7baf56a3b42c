"""One-hot context vectors (hour-of-day, weekday, previous POI category)
that feed the pattern gate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, FeaturizationError

WEEKDAY_SLOTS = 7


@dataclass(frozen=True)
class FeatureSchema:
    time_bins: int = 24
    category_labels: tuple = ()
    utc_offset_hours: float = 0.0

    weekday_slots = WEEKDAY_SLOTS

    def __post_init__(self):
        if self.time_bins < 1 or 24 % self.time_bins:
            raise ConfigError(f"time_bins must divide 24, got {self.time_bins}")

    @property
    def category_slots(self):
        return len(self.category_labels)

    @property
    def total_F(self):
        return self.time_bins + WEEKDAY_SLOTS + self.category_slots

    @property
    def weekday_offset(self):
        return self.time_bins

    @property
    def category_offset(self):
        return self.time_bins + WEEKDAY_SLOTS

    def category_position(self, label):
        try:
            return self.category_labels.index(label)
        except ValueError:
            raise FeaturizationError(f"unknown category label {label!r}") from None

    def feature_names(self):
        hours = 24 // self.time_bins
        names = [f"hour[{b * hours:02d}-{(b + 1) * hours:02d})" for b in range(self.time_bins)]
        names += [f"weekday[{d}]" for d in ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")]
        names += [f"category[{c}]" for c in self.category_labels]
        return names


def build_feature_schema(dataset, time_bins: int = 24, utc_offset: float = 0.0) -> FeatureSchema:
    return FeatureSchema(time_bins, tuple(dataset.category_index.ids), float(utc_offset))


def _local_clock(timestamps, utc_offset_hours):
    local = np.asarray(timestamps, dtype=float) + utc_offset_hours * 3600.0
    days = np.floor(local / 86400.0)
    seconds = local - days * 86400.0
    weekday = (days.astype(np.int64) + 3) % 7  # epoch day 0 is a Thursday
    hour = np.minimum((seconds // 3600.0).astype(np.int64), 23)
    return hour, weekday


def featurize_arrays(prev_times, prev_category_idx, schema: FeatureSchema) -> np.ndarray:
    """Context matrix for many transitions at once.

    ``prev_category_idx`` holds positions in ``schema.category_labels`` or -1
    when the category is unknown.
    """
    prev_times = np.atleast_1d(np.asarray(prev_times, dtype=float))
    cats = np.broadcast_to(np.asarray(prev_category_idx, dtype=np.int64), prev_times.shape)
    T = prev_times.size
    G = np.zeros((T, schema.total_F))
    hour, weekday = _local_clock(prev_times, schema.utc_offset_hours)
    rows = np.arange(T)
    G[rows, hour // (24 // schema.time_bins)] = 1.0
    G[rows, schema.weekday_offset + weekday] = 1.0
    if schema.category_slots:
        has = cats >= 0
        if np.any(cats >= schema.category_slots):
            raise FeaturizationError("category index outside schema")
        G[rows[has], schema.category_offset + cats[has]] = 1.0
    return G


def featurize(transition, prev_category: Optional[str], schema: FeatureSchema) -> np.ndarray:
    """Context vector of one transition from its previous event's local time
    and the previous POI's category."""
    cat = -1 if prev_category is None or not schema.category_slots else schema.category_position(prev_category)
    return featurize_arrays([transition.prev_time], [cat], schema)[0]


def featurize_time(timestamp, prev_category, schema):
    """Context vector for a bare timestamp, as used when recommending."""
    cat = -1 if prev_category is None or not schema.category_slots else schema.category_position(prev_category)
    return featurize_arrays([timestamp], [cat], schema)[0]


def dataset_category_to_schema(dataset, schema):
    """Map the dataset's POI category indices onto schema positions."""
    lookup = np.array([schema.category_position(c) for c in dataset.category_index.ids] + [-1], dtype=np.int64)
    pc = np.asarray(dataset.poi_category)
    return np.where(pc >= 0, lookup[pc], -1)
