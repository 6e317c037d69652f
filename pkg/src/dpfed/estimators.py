"""Bounded-sensitivity estimators for weighted-average queries.

Given a Poisson-sampled set C of users, each carrying a weight w_k in [0,1]
and a clipped update delta_k, two estimators of the population weighted
average are supported:

* fixed denominator:    sum_k w_k delta_k / (q W)
* clipped denominator:  sum_k w_k delta_k / max(q W_min, sum_k w_k)

The first is unbiased; the second equals the true weighted average whenever
the realized sample weight reaches q*W_min. Assuming every ||w_k delta_k||
is at most S, adding or removing one user moves the fixed-denominator
estimate by at most S/(qW) and the clipped-denominator estimate by at most
2S/(q W_min); Gaussian noise is calibrated against those bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .paramvec import ParamVector


class EstimatorKind(Enum):
    FIXED_DENOMINATOR = "fixed"
    CLIPPED_DENOMINATOR = "clipped"


@dataclass(frozen=True)
class EstimatorConfig:
    kind: EstimatorKind
    q: float
    W: float
    W_min: float | None = None

    def __post_init__(self):
        if not (0.0 < self.q <= 1.0):
            raise ConfigError(f"sampling probability q must be in (0,1], got {self.q}")
        if not (self.q * self.W > 0):
            raise ConfigError(f"qW must be positive (W={self.W})")
        if self.kind is EstimatorKind.CLIPPED_DENOMINATOR:
            if self.W_min is None or not (0.0 < self.W_min <= self.W):
                raise ConfigError(
                    f"clipped denominator needs 0 < W_min <= W, got W_min={self.W_min}"
                )


@dataclass(frozen=True)
class WeightedUpdate:
    user_id: str
    weight: float
    delta: ParamVector

    def __post_init__(self):
        if not (0.0 <= self.weight <= 1.0):
            raise ConfigError(f"weight must be in [0,1], got {self.weight}")


def _weighted_sum(sample: Sequence[WeightedUpdate]) -> ParamVector:
    template = sample[0].delta
    totals = [np.zeros(a.size) for _, a in template.layers()]
    for upd in sample:
        template._check_compatible(upd.delta)
        for acc, (_, arr) in zip(totals, upd.delta.layers()):
            acc += upd.weight * arr
    return ParamVector._wrap(template.names, totals)


def estimate(
    sample: Sequence[WeightedUpdate],
    cfg: EstimatorConfig,
    zero_like: ParamVector | None = None,
) -> ParamVector:
    """Apply the configured estimator to a sampled set of weighted updates.

    An empty sample yields the zero vector (the model takes no step);
    ``zero_like`` supplies the layout in that case.
    """
    if not sample:
        if zero_like is None:
            raise ConfigError("empty sample needs zero_like to fix the layout")
        return zero_like.zeros_like()
    numerator = _weighted_sum(sample)
    sample_weight = sum(u.weight for u in sample)
    if cfg.kind is EstimatorKind.FIXED_DENOMINATOR:
        denom = cfg.q * cfg.W
    else:
        denom = max(cfg.q * cfg.W_min, sample_weight)
    return numerator.scale(1.0 / denom)


def sensitivity_bound(cfg: EstimatorConfig, S: float) -> float:
    """Worst-case L2 change of the estimate when one user joins or leaves."""
    if not (S > 0):
        raise ConfigError(f"S must be positive, got {S}")
    if cfg.kind is EstimatorKind.FIXED_DENOMINATOR:
        return S / (cfg.q * cfg.W)
    return 2.0 * S / (cfg.q * cfg.W_min)


def calibrate_sigma(cfg: EstimatorConfig, S: float, z: float) -> float:
    """Noise stddev for scale z: sigma = z * sensitivity_bound(cfg, S)."""
    if not (z > 0):
        raise ConfigError(f"z must be positive, got {z}")
    sigma = z * sensitivity_bound(cfg, S)
    if not math.isfinite(sigma):
        raise ConfigError(
            "calibrated sigma is non-finite; clipping must be enabled "
            "(finite S) when noise is on"
        )
    return sigma


def _random_sample(
    cfg: EstimatorConfig, S: float, dim: int, rng: np.random.Generator
) -> list[WeightedUpdate]:
    # Base users mirror what clipping actually produces: ||delta|| <= S and
    # w in [0,1] (the 2S/(q W_min) bound needs that; only the added
    # adversary may trade weight against norm).
    size = int(rng.integers(0, 7))
    sample = []
    for i in range(size):
        w = 1.0 if rng.random() < 0.5 else float(rng.random())
        target = S if rng.random() < 0.5 else float(rng.random()) * S
        vec = rng.standard_normal(dim)
        if rng.random() < 0.25:  # axis-aligned extreme
            vec = np.zeros(dim)
            vec[int(rng.integers(dim))] = 1.0
        norm = float(np.linalg.norm(vec))
        if norm > 0:
            vec = vec * (target / norm)
        sample.append(WeightedUpdate(f"u{i}", w, ParamVector([("x", vec)])))
    return sample


def empirical_sensitivity(
    cfg: EstimatorConfig,
    S: float,
    trials: int,
    rng: np.random.Generator,
    dim: int = 8,
) -> float:
    """Search for the largest estimate shift caused by one extra user.

    Each trial draws a random base sample C, then adds an adversarial user
    whose scaled contribution w_k*delta_k has norm exactly S, pointed along
    a random, axis-aligned, or numerator-(anti)aligned direction. Returns
    the maximum observed ||estimate(C + k) - estimate(C)||; by construction
    this can never exceed ``sensitivity_bound(cfg, S)``.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    template = ParamVector([("x", np.zeros(dim))])
    observed = 0.0
    for _ in range(trials):
        base = _random_sample(cfg, S, dim, rng)
        est_base = estimate(base, cfg, zero_like=template)

        mode = rng.random()
        if mode < 0.4:
            direction = rng.standard_normal(dim)
        elif mode < 0.6:
            direction = np.zeros(dim)
            direction[int(rng.integers(dim))] = 1.0
        else:
            # align with or against the current numerator: the regime that
            # stresses the clipped denominator's second error term
            direction = np.array(
                sum(u.weight * u.delta.array("x") for u in base)
                if base
                else rng.standard_normal(dim)
            )
            if float(np.linalg.norm(direction)) == 0.0:
                direction = rng.standard_normal(dim)
            if rng.random() < 0.5:
                direction = -direction
        norm = float(np.linalg.norm(direction))
        if norm == 0.0:
            direction = np.ones(dim)
            norm = float(np.linalg.norm(direction))

        w = 1.0 if rng.random() < 0.5 else max(float(rng.random()), 1e-3)
        delta = ParamVector([("x", direction * (S / (norm * w)))])
        extra = WeightedUpdate("adversary", w, delta)

        est_new = estimate(base + [extra], cfg, zero_like=template)
        observed = max(observed, (est_new - est_base).flat_norm())
    return observed
