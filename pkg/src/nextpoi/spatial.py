"""Geodesic distance, power-law fitting of displacement counts, and the
distance-decay preference term."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FitError

EARTH_RADIUS_KM = 6371.0
DEFAULT_MIN_DISTANCE_KM = 0.01
DEFAULT_FIT_CUTOFF_KM = 50.0
DEFAULT_FIT_BINS = 32


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in kilometres.

    Works on scalars or broadcastable numpy arrays.
    """
    if np.ndim(lat1) == 0 and np.ndim(lat2) == 0 and np.ndim(lon1) == 0 and np.ndim(lon2) == 0:
        p1, p2 = math.radians(lat1), math.radians(lat2)
        dphi = p2 - p1
        dlmb = math.radians(lon2 - lon1)
        h = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlmb / 2) ** 2
        return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(h)))


def distances_from(coords, i):
    """Distances (km) from POI ``i`` to every row of an (N, 2) lat/lon table."""
    return haversine_km(coords[i, 0], coords[i, 1], coords[:, 0], coords[:, 1])


def spatial_preference(distance_km, min_distance_km=DEFAULT_MIN_DISTANCE_KM):
    """Inverse distance with a floor on the distance, so repeated check-ins
    at one venue stay finite."""
    if np.ndim(distance_km) == 0:
        return 1.0 / max(float(distance_km), min_distance_km)
    return 1.0 / np.maximum(distance_km, min_distance_km)


@dataclass(frozen=True)
class PowerLawFit:
    a: float
    k: float
    r_squared: float
    max_distance_km: float
    n_points: int = 0

    def predict(self, distance_km):
        return self.a * np.power(distance_km, self.k)

    def to_dict(self):
        return {
            "a": self.a,
            "k": self.k,
            "r_squared": self.r_squared,
            "max_distance_km": self.max_distance_km,
            "n_points": self.n_points,
        }


def fit_power_law(samples, max_distance_km=DEFAULT_FIT_CUTOFF_KM):
    """Least-squares line through (log d, log freq).

    ``samples`` is an iterable of ``(distance_km, frequency)`` pairs. Only
    pairs with ``0 < d <= max_distance_km`` and positive frequency are used.
    Returns ``a = exp(intercept)`` and ``k = slope``.
    """
    arr = np.asarray(list(samples), dtype=float).reshape(-1, 2)
    d, f = arr[:, 0], arr[:, 1]
    keep = (d > 0) & (d <= max_distance_km) & (f > 0)
    d, f = d[keep], f[keep]
    if np.unique(d).size < 2:
        raise FitError(
            f"need at least 2 distinct positive distances within {max_distance_km} km, got {np.unique(d).size}"
        )
    x = np.log(d)
    y = np.log(f)
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    sxy = np.sum((x - xm) * (y - ym))
    slope = sxy / sxx
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    syy = np.sum((y - ym) ** 2)
    r2 = 1.0 if syy == 0 else max(0.0, 1.0 - np.sum(resid**2) / syy)
    return PowerLawFit(
        a=float(math.exp(intercept)),
        k=float(slope),
        r_squared=float(r2),
        max_distance_km=float(max_distance_km),
        n_points=int(d.size),
    )


def binned_displacement_counts(distances_km, n_bins=DEFAULT_FIT_BINS, lo=DEFAULT_MIN_DISTANCE_KM,
                               hi=DEFAULT_FIT_CUTOFF_KM):
    """Histogram displacements into log-spaced bins over ``[lo, hi]``.

    Returns ``(centers, counts)`` for non-empty bins; centers are geometric
    bin midpoints and counts are raw.
    """
    d = np.asarray(distances_km, dtype=float)
    edges = np.geomspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(d[(d >= lo) & (d <= hi)], bins=edges)
    centers = np.sqrt(edges[:-1] * edges[1:])
    nz = counts > 0
    return centers[nz], counts[nz].astype(float)


def fit_displacements(distances_km, max_distance_km=DEFAULT_FIT_CUTOFF_KM, n_bins=DEFAULT_FIT_BINS):
    """Bin raw displacements and fit the power law to the binned counts."""
    centers, counts = binned_displacement_counts(distances_km, n_bins=n_bins, hi=max_distance_km)
    return fit_power_law(zip(centers, counts), max_distance_km=max_distance_km)
