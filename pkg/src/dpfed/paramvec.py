"""Layered parameter vectors, update clipping, and Gaussian noising.

A :class:`ParamVector` is an ordered list of named float64 vectors. It is
the common currency for model parameters, per-user updates, and noise.
Instances are immutable (backing arrays are marked read-only) and all
operations return new vectors, so they can be shared freely across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, CorruptUpdateError, ShapeMismatchError


def _safe_norm(a: np.ndarray) -> float:
    """L2 norm robust to under/overflow of squared entries."""
    n2 = float(np.dot(a, a))
    if 1e-280 < n2 < 1e280:
        return math.sqrt(n2)
    # rescale by the peak so subnormal squares don't vanish and huge ones
    # don't overflow
    peak = float(np.max(np.abs(a))) if a.size else 0.0
    if peak == 0.0 or not math.isfinite(peak):
        return peak
    scaled = a / peak
    return peak * math.sqrt(float(np.dot(scaled, scaled)))


class ParamVector:
    """Ordered, named collection of 1-D float64 arrays.

    Two vectors are layout-compatible when their layer names, order, and
    per-layer lengths all agree; arithmetic between incompatible vectors is
    a hard error rather than a broadcast.
    """

    __slots__ = ("_names", "_arrays")

    def __init__(self, layers: Iterable[tuple[str, np.ndarray | Sequence[float]]]):
        names = []
        arrays = []
        for name, values in layers:
            arr = np.asarray(values, dtype=np.float64)
            if arr.ndim != 1:
                raise ValueError(f"layer {name!r} must be 1-D, got shape {arr.shape}")
            arr = arr.copy()
            arr.flags.writeable = False
            names.append(str(name))
            arrays.append(arr)
        if not names:
            raise ValueError("a ParamVector needs at least one layer")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names: {names}")
        self._names = tuple(names)
        self._arrays = tuple(arrays)

    @classmethod
    def _wrap(cls, names: tuple[str, ...], arrays) -> "ParamVector":
        # fast path for freshly-computed (or already frozen) layer arrays:
        # no copy, no re-validation
        self = object.__new__(cls)
        frozen = []
        for a in arrays:
            if a.flags.writeable:
                a.flags.writeable = False
            frozen.append(a)
        self._names = names
        self._arrays = tuple(frozen)
        return self

    # -- structure ---------------------------------------------------------

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def num_layers(self) -> int:
        return len(self._names)

    @property
    def dim(self) -> int:
        return sum(a.size for a in self._arrays)

    def layers(self) -> tuple[tuple[str, np.ndarray], ...]:
        return tuple(zip(self._names, self._arrays))

    def array(self, name: str) -> np.ndarray:
        try:
            return self._arrays[self._names.index(name)]
        except ValueError:
            raise KeyError(f"no layer named {name!r}") from None

    def _check_compatible(self, other: "ParamVector") -> None:
        if self._names != other._names or any(
            a.size != b.size for a, b in zip(self._arrays, other._arrays)
        ):
            raise ShapeMismatchError(
                f"incompatible layouts: {self.describe()} vs {other.describe()}"
            )

    def describe(self) -> str:
        return "[" + ", ".join(f"{n}:{a.size}" for n, a in self.layers()) + "]"

    # -- algebra -----------------------------------------------------------

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check_compatible(other)
        return ParamVector._wrap(
            self._names, [a + b for a, b in zip(self._arrays, other._arrays)]
        )

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check_compatible(other)
        return ParamVector._wrap(
            self._names, [a - b for a, b in zip(self._arrays, other._arrays)]
        )

    def scale(self, c: float) -> "ParamVector":
        return ParamVector._wrap(self._names, [a * c for a in self._arrays])

    def add_scaled(self, other: "ParamVector", c: float) -> "ParamVector":
        """self + c * other in one pass per layer."""
        self._check_compatible(other)
        return ParamVector._wrap(
            self._names, [a + c * b for a, b in zip(self._arrays, other._arrays)]
        )

    def zeros_like(self) -> "ParamVector":
        return ParamVector._wrap(self._names, [np.zeros(a.size) for a in self._arrays])

    def flat_norm(self) -> float:
        """L2 norm of the concatenation of all layers; zero iff all entries are."""
        return math.hypot(*(_safe_norm(a) for a in self._arrays))

    def layer_norms(self) -> tuple[float, ...]:
        return tuple(_safe_norm(a) for a in self._arrays)

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self._arrays)

    def equals(self, other: "ParamVector") -> bool:
        """Exact (bit-level) equality of layout and values."""
        return self._names == other._names and all(
            np.array_equal(a, b) for a, b in zip(self._arrays, other._arrays)
        )

    def allclose(self, other: "ParamVector", rtol: float = 1e-12, atol: float = 0.0) -> bool:
        return self._names == other._names and all(
            a.size == b.size and np.allclose(a, b, rtol=rtol, atol=atol)
            for a, b in zip(self._arrays, other._arrays)
        )

    def __repr__(self) -> str:
        return f"ParamVector({self.describe()}, norm={self.flat_norm():.6g})"

    # -- serialization -----------------------------------------------------

    def to_json_obj(self) -> list[dict]:
        return [
            {"name": n, "length": int(a.size), "values": a.tolist()}
            for n, a in self.layers()
        ]

    @classmethod
    def from_json_obj(cls, obj: list[dict]) -> "ParamVector":
        layers = []
        for rec in obj:
            values = np.asarray(rec["values"], dtype=np.float64)
            if values.size != rec["length"]:
                raise ValueError(
                    f"layer {rec['name']!r}: declared length {rec['length']} "
                    f"but {values.size} values"
                )
            layers.append((rec["name"], values))
        return cls(layers)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_obj(), fh)

    @classmethod
    def load(cls, path) -> "ParamVector":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_obj(json.load(fh))


class ClipMode(Enum):
    FLAT = "flat"
    PER_LAYER = "per_layer"


@dataclass(frozen=True)
class ClipConfig:
    """Clipping strategy plus its bound(s).

    For PER_LAYER, ``layer_bounds`` holds one positive bound per layer and
    ``total`` is derived as sqrt(sum of squared bounds); for FLAT, ``total``
    is the single L2 bound. ``total`` may be ``inf`` to disable clipping.
    """

    mode: ClipMode
    total: float
    layer_bounds: tuple[float, ...] | None = None

    def __post_init__(self):
        if not (self.total > 0):
            raise ConfigError(f"clip bound must be positive, got {self.total}")
        if self.mode is ClipMode.PER_LAYER:
            if self.layer_bounds is None:
                raise ConfigError("per-layer clipping requires layer_bounds")
            if any(not (b > 0) or not math.isfinite(b) for b in self.layer_bounds):
                raise ConfigError(f"layer bounds must be positive finite: {self.layer_bounds}")
        elif self.layer_bounds is not None:
            raise ConfigError("layer_bounds only apply to per-layer clipping")

    @classmethod
    def flat(cls, total: float) -> "ClipConfig":
        return cls(ClipMode.FLAT, float(total))

    @classmethod
    def per_layer(cls, layer_bounds: Sequence[float]) -> "ClipConfig":
        bounds = tuple(float(b) for b in layer_bounds)
        total = math.sqrt(sum(b * b for b in bounds))
        return cls(ClipMode.PER_LAYER, total, bounds)

    @classmethod
    def per_layer_split(cls, total: float, num_layers: int) -> "ClipConfig":
        """Split a total budget evenly: each layer gets total/sqrt(m)."""
        if num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        return cls.per_layer([total / math.sqrt(num_layers)] * num_layers)

    @property
    def enabled(self) -> bool:
        return math.isfinite(self.total)

    def resolved_bounds(self, num_layers: int) -> tuple[float, ...]:
        if self.layer_bounds is None:
            raise ConfigError("flat config has no per-layer bounds")
        if len(self.layer_bounds) != num_layers:
            raise ConfigError(
                f"{len(self.layer_bounds)} layer bounds for {num_layers} layers"
            )
        return self.layer_bounds


def _scale_factor(norm: float, bound: float) -> float:
    # Zero vectors pass through unchanged: factor 1, no division by zero.
    if norm == 0.0 or norm <= bound:
        return 1.0
    return bound / norm


def flat_clip(delta: ParamVector, bound: float) -> ParamVector:
    """L2-project ``delta`` onto the ball of radius ``bound``.

    Returns ``delta * min(1, bound / ||delta||)``; the result is parallel to
    the input and its flat norm never exceeds ``bound``.
    """
    if not (bound > 0):
        raise ConfigError(f"clip bound must be positive, got {bound}")
    if not delta.is_finite():
        raise CorruptUpdateError("update contains non-finite entries")
    factor = _scale_factor(delta.flat_norm(), bound)
    return delta if factor == 1.0 else delta.scale(factor)


def flat_clip_with_norm(
    delta: ParamVector, bound: float, norm: float
) -> ParamVector:
    """flat_clip when the caller already has flat_norm(delta) in hand."""
    if not (bound > 0):
        raise ConfigError(f"clip bound must be positive, got {bound}")
    factor = _scale_factor(norm, bound)
    return delta if factor == 1.0 else delta.scale(factor)


def per_layer_clip(delta: ParamVector, layer_bounds: Sequence[float]) -> ParamVector:
    """Clip each layer independently to its own L2 bound.

    The total norm of the result is at most sqrt(sum of squared bounds).
    """
    if len(layer_bounds) != delta.num_layers:
        raise ConfigError(
            f"{len(layer_bounds)} bounds for {delta.num_layers} layers"
        )
    if not delta.is_finite():
        raise CorruptUpdateError("update contains non-finite entries")
    out = []
    for (name, arr), bound in zip(delta.layers(), layer_bounds):
        if not (bound > 0):
            raise ConfigError(f"clip bound must be positive, got {bound}")
        factor = _scale_factor(_safe_norm(arr), bound)
        out.append((name, arr if factor == 1.0 else arr * factor))
    return ParamVector(out)


def clip_update(delta: ParamVector, cfg: ClipConfig) -> ParamVector:
    if cfg.mode is ClipMode.FLAT:
        if not cfg.enabled:
            if not delta.is_finite():
                raise CorruptUpdateError("update contains non-finite entries")
            return delta
        return flat_clip(delta, cfg.total)
    return per_layer_clip(delta, cfg.resolved_bounds(delta.num_layers))


def add_gaussian_noise(
    v: ParamVector, sigma: float, rng: np.random.Generator
) -> ParamVector:
    """Add independent N(0, sigma^2) noise to every coordinate.

    ``sigma == 0`` returns ``v`` unchanged (and consumes no randomness), so
    noise-free runs are bit-reproducible regardless of the generator state.
    """
    if sigma < 0:
        raise ConfigError(f"sigma must be nonnegative, got {sigma}")
    if not math.isfinite(sigma):
        raise ConfigError(f"sigma must be finite, got {sigma}")
    if sigma == 0.0:
        return v
    return ParamVector._wrap(
        v.names, [a + rng.normal(0.0, sigma, size=a.size) for _, a in v.layers()]
    )
