"""Latent-behaviour-pattern model: parameters, pattern-level and fused
scores, the softmax gate, and the binary model file format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ModelFormatError
from .features import FeatureSchema
from .spatial import DEFAULT_MIN_DISTANCE_KM, distances_from, spatial_preference

MAGIC = b"LBPM"
FORMAT_VERSION = 1
GATE_MODES = ("global", "per-user")


@dataclass(frozen=True)
class PatternParams:
    """Views onto one pattern's block of a :class:`ModelParams`."""

    user_factors: np.ndarray  # U_UL, M x D
    next_factors_user: np.ndarray  # V_LU, N x D
    next_factors_prev: np.ndarray  # V_LI, N x D
    prev_factors: np.ndarray  # V_IL, N x D
    rho: float


@dataclass
class ModelParams:
    """All parameters, stacked over patterns along the leading axis.

    ``alpha`` is ``(K, F)`` for the global gate and ``(M, K, F)`` for the
    per-user gate.
    """

    user_factors: np.ndarray
    next_factors_user: np.ndarray
    next_factors_prev: np.ndarray
    prev_factors: np.ndarray
    rho: np.ndarray
    alpha: np.ndarray
    gate_mode: str
    schema: FeatureSchema
    poi_coords: np.ndarray
    lambda_theta: float = 1.0
    min_distance_km: float = DEFAULT_MIN_DISTANCE_KM
    poi_category: Optional[np.ndarray] = None
    user_ids: tuple = ()
    poi_ids: tuple = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"unknown gate mode {self.gate_mode!r}")
        K, M, D = self.user_factors.shape
        N = self.next_factors_user.shape[1]
        for name in ("next_factors_user", "next_factors_prev", "prev_factors"):
            if getattr(self, name).shape != (K, N, D):
                raise ConfigError(f"{name} has shape {getattr(self, name).shape}, expected {(K, N, D)}")
        if self.rho.shape != (K,):
            raise ConfigError("rho must have shape (K,)")
        F = self.schema.total_F
        want = (K, F) if self.gate_mode == "global" else (M, K, F)
        if self.alpha.shape != want:
            raise ConfigError(f"alpha has shape {self.alpha.shape}, expected {want}")
        if self.poi_coords.shape != (N, 2):
            raise ConfigError("poi_coords must be N x 2")
        if self.poi_category is None:
            self.poi_category = np.full(N, -1, dtype=np.int64)
        if K < 1 or D < 1:
            raise ConfigError("K and D must be >= 1")
        if not self.lambda_theta > 0:
            raise ConfigError("lambda_theta must be positive")
        if not self.user_ids:
            self.user_ids = tuple(f"u{k}" for k in range(M))
        if not self.poi_ids:
            self.poi_ids = tuple(f"p{k}" for k in range(N))

    @property
    def K(self):
        return self.user_factors.shape[0]

    @property
    def M(self):
        return self.user_factors.shape[1]

    @property
    def D(self):
        return self.user_factors.shape[2]

    @property
    def N(self):
        return self.next_factors_user.shape[1]

    @property
    def F(self):
        return self.schema.total_F

    @property
    def patterns(self):
        return [self.pattern(s) for s in range(self.K)]

    def pattern(self, s):
        return PatternParams(
            self.user_factors[s], self.next_factors_user[s], self.next_factors_prev[s],
            self.prev_factors[s], float(self.rho[s]),
        )

    def gate_weights(self, u=None):
        """The ``(K, F)`` gate weights that apply to user ``u``."""
        if self.gate_mode == "global":
            return self.alpha
        if u is None:
            raise ConfigError("per-user gate requires a user index")
        return self.alpha[u]

    def copy(self):
        return ModelParams(
            self.user_factors.copy(), self.next_factors_user.copy(), self.next_factors_prev.copy(),
            self.prev_factors.copy(), self.rho.copy(), self.alpha.copy(), self.gate_mode, self.schema,
            self.poi_coords.copy(), self.lambda_theta, self.min_distance_km, self.poi_category.copy(),
            self.user_ids, self.poi_ids, dict(self.metadata),
        )

    def param_arrays(self):
        return [self.user_factors, self.next_factors_user, self.next_factors_prev,
                self.prev_factors, self.rho, self.alpha]

    def squared_norm(self):
        return float(sum(np.sum(a * a) for a in self.param_arrays()))

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.param_arrays())

    # scoring -----------------------------------------------------------

    def score_all(self, u, i, context):
        """Fused scores of every POI as next location after ``i``."""
        return fused_scores_all(self, u, i, context)


def zeros(K, D, M, N, schema, gate_mode="global", poi_coords=None, **kw):
    F = schema.total_F
    coords = np.zeros((N, 2)) if poi_coords is None else np.asarray(poi_coords, dtype=float)
    return ModelParams(
        np.zeros((K, M, D)), np.zeros((K, N, D)), np.zeros((K, N, D)), np.zeros((K, N, D)),
        np.zeros(K), np.zeros((K, F) if gate_mode == "global" else (M, K, F)),
        gate_mode, schema, coords, **kw,
    )


def _check_index(name, v, n):
    if not (0 <= v < n):
        raise IndexError(f"{name}={v} out of range [0, {n})")


def pattern_score(model: ModelParams, s, u, i, l, distance_km):
    """User preference plus transition preference plus weighted inverse
    distance, for pattern ``s``."""
    _check_index("s", s, model.K)
    _check_index("u", u, model.M)
    _check_index("i", i, model.N)
    _check_index("l", l, model.N)
    return (
        float(model.user_factors[s, u] @ model.next_factors_user[s, l])
        + float(model.next_factors_prev[s, l] @ model.prev_factors[s, i])
        + float(model.rho[s]) * spatial_preference(distance_km, model.min_distance_km)
    )


def gate_logits(model, u, context):
    return model.gate_weights(u) @ np.asarray(context, dtype=float)


def softmax(logits):
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gate_distribution(model: ModelParams, u, context) -> np.ndarray:
    """Pattern probabilities p(s | context), shape ``(K,)``."""
    context = np.asarray(context, dtype=float)
    if context.shape != (model.F,):
        raise ConfigError(f"context has length {context.shape}, expected {model.F}")
    return softmax(gate_logits(model, u, context))


def fused_score(model: ModelParams, u, i, l, context, distance_km):
    p = gate_distribution(model, u, context)
    return float(sum(p[s] * pattern_score(model, s, u, i, l, distance_km) for s in range(model.K)))


def pattern_scores_all(model, u, i, inv_d):
    """``(K, N)`` pattern scores for every candidate given inverse distances."""
    U = model.user_factors[:, u, :]  # K x D
    Vi = model.prev_factors[:, i, :]  # K x D
    s = np.einsum("kd,knd->kn", U, model.next_factors_user)
    s += np.einsum("kd,knd->kn", Vi, model.next_factors_prev)
    s += model.rho[:, None] * inv_d[None, :]
    return s


def fused_scores_all(model, u, i, context):
    inv_d = spatial_preference(distances_from(model.poi_coords, i), model.min_distance_km)
    p = gate_distribution(model, u, context)
    return p @ pattern_scores_all(model, u, i, inv_d)


# -------------------------------------------------------------- serialization

_HEADER = struct.Struct("<4sI6I2dId")


def _pack_labels(labels):
    out = [struct.pack("<I", len(labels))]
    for lab in labels:
        b = str(lab).encode("utf-8")
        out.append(struct.pack("<I", len(b)))
        out.append(b)
    return b"".join(out)


def _labels_size(labels):
    return 4 + sum(4 + len(str(lab).encode("utf-8")) for lab in labels)


def _metadata_bytes(model):
    return json.dumps(model.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")


def expected_size(model: ModelParams) -> int:
    """Byte length of ``serialize(model)`` from the layout alone."""
    K, D, M, N, F = model.K, model.D, model.M, model.N, model.F
    n_alpha = K * F * (M if model.gate_mode == "per-user" else 1)
    return (
        _HEADER.size
        + _labels_size(model.schema.category_labels)
        + _labels_size(model.user_ids)
        + _labels_size(model.poi_ids)
        + 4 + len(_metadata_bytes(model))
        + 4 * N
        + 8 * 2 * N
        + 8 * (K * M * D + 3 * K * N * D + K + n_alpha)
    )


def serialize(model: ModelParams) -> bytes:
    """Binary model file; see the README for the byte layout."""
    if len(model.user_ids) != model.M or len(model.poi_ids) != model.N:
        raise ModelFormatError("id tables do not match model dimensions")
    parts = [
        _HEADER.pack(
            MAGIC, FORMAT_VERSION, model.K, model.D, model.M, model.N, model.F,
            GATE_MODES.index(model.gate_mode), float(model.lambda_theta), float(model.min_distance_km),
            model.schema.time_bins, float(model.schema.utc_offset_hours),
        ),
        _pack_labels(model.schema.category_labels),
        _pack_labels(model.user_ids),
        _pack_labels(model.poi_ids),
    ]
    meta = _metadata_bytes(model)
    parts.append(struct.pack("<I", len(meta)) + meta)
    parts.append(np.ascontiguousarray(model.poi_category, dtype="<i4").tobytes())
    parts.append(np.ascontiguousarray(model.poi_coords, dtype="<f8").tobytes())
    for a in model.param_arrays():
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"truncated model stream at byte {self.pos} (need {n} more)")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def labels(self):
        n = self.u32()
        return tuple(bytes(self.take(self.u32())).decode("utf-8") for _ in range(n))

    def array(self, dtype, shape):
        count = int(np.prod(shape))
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * width), dtype=dtype).reshape(shape).astype(dtype[1:]).copy()


def deserialize(data: bytes) -> ModelParams:
    if len(data) < _HEADER.size:
        raise ModelFormatError("truncated model stream: header incomplete")
    (magic, version, K, D, M, N, F, mode, lam, clamp, time_bins, utc) = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}: not a model file (version error)")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    if mode >= len(GATE_MODES):
        raise ModelFormatError(f"unknown gate mode flag {mode}")
    r = _Reader(data)
    r.pos = _HEADER.size
    cats = r.labels()
    user_ids = r.labels()
    poi_ids = r.labels()
    try:
        schema = FeatureSchema(time_bins, cats, utc)
    except ConfigError as exc:
        raise ModelFormatError(str(exc)) from None
    if schema.total_F != F or len(user_ids) != M or len(poi_ids) != N:
        raise ModelFormatError("dimension inconsistency between header and tables")
    meta = json.loads(bytes(r.take(r.u32())).decode("utf-8"))
    pcat = r.array("<i4", (N,)).astype(np.int64)
    coords = r.array("<f8", (N, 2))
    gate_mode = GATE_MODES[mode]
    arrays = [r.array("<f8", shp) for shp in (
        (K, M, D), (K, N, D), (K, N, D), (K, N, D), (K,),
        (K, F) if gate_mode == "global" else (M, K, F),
    )]
    if r.pos != len(data):
        raise ModelFormatError(f"{len(data) - r.pos} trailing bytes after parameter arrays")
    return ModelParams(*arrays, gate_mode=gate_mode, schema=schema, poi_coords=coords, lambda_theta=lam,
                       min_distance_km=clamp, poi_category=pcat, user_ids=user_ids, poi_ids=poi_ids,
                       metadata=meta)


def save(model, path):
    with open(path, "wb") as fh:
        fh.write(serialize(model))


def load(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())
