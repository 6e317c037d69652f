"""Federated training loop with user sampling, clipping, noising, accounting.

Each round: Bernoulli-sample users, compute their local updates in parallel
against the frozen global parameters, clip, form the weighted-average
estimate, add calibrated Gaussian noise, apply the step, and charge the
moments accountant. Two local update rules are supported: multi-step local
SGD (fed_avg) and a single clipped gradient step (fed_sgd).

Determinism: every random draw comes from a substream keyed by
(seed, purpose, round[, user]) and per-round aggregation always sums in
ascending user-index order, so results are bit-identical across reruns,
worker counts, and checkpoint/resume splits.
"""

from __future__ import annotations

import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .accountant import MomentsAccountant
from .data import TokenDataset, shard_windows
from .errors import ConfigError
from .estimators import (
    EstimatorConfig,
    EstimatorKind,
    WeightedUpdate,
    calibrate_sigma,
    estimate,
)
from .models import Batch, ModelSpec, evaluate
from .paramvec import (
    ClipConfig,
    ClipMode,
    ParamVector,
    add_gaussian_noise,
    clip_update,
    flat_clip_with_norm,
)
from .rng import substream


class Algorithm(Enum):
    FED_AVG = "fedavg"
    FED_SGD = "fedsgd"


class FedTrainError(RuntimeError):
    """Training aborted (non-finite loss, gradient, or parameters)."""


@dataclass
class TrainingConfig:
    rounds: int
    q: float | None = None
    fixed_sample_size: int | None = None
    example_cap: float = 1600.0
    z: float = 1.0
    noise_enabled: bool = False
    estimator: EstimatorKind = EstimatorKind.FIXED_DENOMINATOR
    w_min_fraction: float = 0.9
    clip: ClipConfig = field(default_factory=lambda: ClipConfig.flat(math.inf))
    algorithm: Algorithm = Algorithm.FED_AVG
    local_epochs: int = 1
    batch_size: int | None = 8  # windows per local batch; None = full shard
    learning_rate: float = 6.0
    seed: int = 0
    delta: float = 1e-9  # reference delta for logged epsilon
    eval_every: int = 20
    eval_smoothing: int = 5
    greedy_clip: bool = True  # project inside the local loop, not only at the end
    workers: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.q is None and self.fixed_sample_size is None:
            raise ConfigError("set q, fixed_sample_size, or both")
        if self.q is not None and not (0.0 < self.q <= 1.0):
            raise ConfigError(f"q must be in (0,1], got {self.q}")
        if self.fixed_sample_size is not None and self.fixed_sample_size < 1:
            raise ConfigError("fixed_sample_size must be >= 1")
        if not (self.z > 0):
            raise ConfigError(f"z must be positive, got {self.z}")
        if not (0.0 < self.w_min_fraction <= 1.0):
            raise ConfigError(f"w_min_fraction must be in (0,1], got {self.w_min_fraction}")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1 (or None for full shard)")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")
        if not (0.0 < self.delta < 1.0):
            raise ConfigError(f"delta must be in (0,1), got {self.delta}")
        if self.eval_every < 1 or self.eval_smoothing < 1:
            raise ConfigError("eval_every and eval_smoothing must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.noise_enabled and not self.clip.enabled:
            raise ConfigError("noise requires a finite clip bound to calibrate sigma")

    def sampling_probability(self, num_users: int) -> float:
        if self.q is not None:
            return self.q
        return self.fixed_sample_size / num_users


@dataclass
class RoundLog:
    round: int
    sampled_users: int
    preclip_norm_min: float
    preclip_norm_median: float
    preclip_norm_max: float
    frac_clipped: float
    sigma: float
    epsilon: float
    accuracy_top1: float | None = None
    loss: float | None = None

    # fixed metric-column order for CSV emission
    CSV_FIELDS = ("round", "accuracy_top1", "loss", "epsilon", "sigma", "frac_clipped")


@dataclass
class TrainResult:
    params: ParamVector
    round_logs: list[RoundLog]
    final_epsilon: float
    accountant: MomentsAccountant


def sample_users(
    num_users: int,
    q: float,
    rng: np.random.Generator,
    fixed_sample_size: int | None = None,
) -> np.ndarray:
    """Round participant indices, ascending.

    Bernoulli(q) per user by default; with ``fixed_sample_size`` set,
    exactly that many distinct users uniformly at random.
    """
    if fixed_sample_size is not None:
        if fixed_sample_size > num_users:
            raise ConfigError(
                f"fixed sample {fixed_sample_size} exceeds population {num_users}"
            )
        return np.sort(rng.choice(num_users, size=fixed_sample_size, replace=False))
    return np.flatnonzero(rng.random(num_users) < q)


def _local_batches(
    num_windows: int, batch_size: int | None, rng: np.random.Generator, shuffle: bool
) -> list[np.ndarray]:
    order = rng.permutation(num_windows) if shuffle else np.arange(num_windows)
    if batch_size is None or batch_size >= num_windows:
        return [order]
    return [order[i : i + batch_size] for i in range(0, num_windows, batch_size)]


def _clip_changed(before: ParamVector, after: ParamVector) -> bool:
    return any(
        a is not b for (_, a), (_, b) in zip(before.layers(), after.layers())
    )


def user_update_fedavg(
    shard_tokens: np.ndarray,
    theta0: ParamVector,
    model: ModelSpec,
    cfg: TrainingConfig,
    unroll: int,
    rng: np.random.Generator,
    user_label: str,
) -> tuple[ParamVector, float, bool]:
    """Local SGD for one user; returns (clipped delta, pre-clip norm, clipped?).

    The cumulative deviation theta - theta0 is projected back into the clip
    ball after every local batch (greedy), or only once at the end when
    cfg.greedy_clip is off. The reported pre-clip norm is the deviation
    norm just before the final projection.
    """
    inputs, targets = shard_windows(shard_tokens, unroll)
    theta = theta0
    was_clipped = False
    # with clipping disabled the in-loop projection is the identity: skip it
    project_each_batch = cfg.greedy_clip and cfg.clip.enabled
    preclip_norm = 0.0
    for epoch in range(cfg.local_epochs):
        for b, batch_idx in enumerate(
            _local_batches(inputs.shape[0], cfg.batch_size, rng, True)
        ):
            grad = model.gradient(theta, (inputs[batch_idx], targets[batch_idx]))
            if not grad.is_finite():
                raise FedTrainError(
                    f"non-finite gradient for user {user_label} (epoch {epoch}, batch {b})"
                )
            theta = theta.add_scaled(grad, -cfg.learning_rate)
            if project_each_batch:
                deviation = theta - theta0
                preclip_norm = deviation.flat_norm()
                if cfg.clip.mode is ClipMode.FLAT:
                    clipped = flat_clip_with_norm(deviation, cfg.clip.total, preclip_norm)
                else:
                    clipped = clip_update(deviation, cfg.clip)
                was_clipped = was_clipped or _clip_changed(deviation, clipped)
                theta = theta0 + clipped
    delta = theta - theta0
    if not project_each_batch:
        preclip_norm = delta.flat_norm()
        clipped = clip_update(delta, cfg.clip)
        was_clipped = _clip_changed(delta, clipped)
        delta = clipped
    return delta, preclip_norm, was_clipped


def user_update_fedsgd(
    shard_tokens: np.ndarray,
    theta0: ParamVector,
    model: ModelSpec,
    cfg: TrainingConfig,
    unroll: int,
    rng: np.random.Generator,
    user_label: str,
) -> tuple[ParamVector, float, bool]:
    """One clipped gradient step on a single local batch (full shard if
    batch_size is None or >= the shard's window count)."""
    inputs, targets = shard_windows(shard_tokens, unroll)
    num_windows = inputs.shape[0]
    if cfg.batch_size is None or cfg.batch_size >= num_windows:
        batch_idx = np.arange(num_windows)
    else:
        batch_idx = rng.choice(num_windows, size=cfg.batch_size, replace=False)
    grad = model.gradient(theta0, (inputs[batch_idx], targets[batch_idx]))
    if not grad.is_finite():
        raise FedTrainError(f"non-finite gradient for user {user_label}")
    raw = grad.scale(-cfg.learning_rate)
    preclip_norm = raw.flat_norm()
    delta = clip_update(raw, cfg.clip)
    return delta, preclip_norm, _clip_changed(raw, delta)


_UPDATE_FNS = {
    Algorithm.FED_AVG: user_update_fedavg,
    Algorithm.FED_SGD: user_update_fedsgd,
}


def smoothed_accuracy(logs: Sequence[RoundLog], window: int = 5) -> float:
    """Mean of the last ``window`` evaluated accuracies."""
    accs = [lg.accuracy_top1 for lg in logs if lg.accuracy_top1 is not None]
    if not accs:
        raise ConfigError("no evaluations recorded")
    return float(np.mean(accs[-window:]))


def run_training(
    cfg: TrainingConfig,
    dataset: TokenDataset,
    model: ModelSpec,
    eval_set: Batch | None = None,
    start_round: int = 0,
    init_params: ParamVector | None = None,
    accountant: MomentsAccountant | None = None,
    round_callback: Callable[[RoundLog, ParamVector, MomentsAccountant], None] | None = None,
) -> TrainResult:
    """Run cfg.rounds rounds starting at ``start_round``.

    Resuming: pass the checkpointed round index, parameters, and accountant;
    because all randomness is keyed by absolute round number, a resumed run
    continues bit-identically to an uninterrupted one.
    """
    K = dataset.num_users
    q = cfg.sampling_probability(K)
    weights = dataset.weights(cfg.example_cap)
    W = float(weights.sum())
    est_cfg = EstimatorConfig(
        cfg.estimator,
        q,
        W,
        W_min=cfg.w_min_fraction * W
        if cfg.estimator is EstimatorKind.CLIPPED_DENOMINATOR
        else None,
    )
    sigma = (
        calibrate_sigma(est_cfg, cfg.clip.total, cfg.z) if cfg.noise_enabled else 0.0
    )
    if accountant is None:
        accountant = MomentsAccountant(q)
    params = init_params if init_params is not None else model.init(substream(cfg.seed, "init"))
    model.check_params(params)
    update_fn = _UPDATE_FNS[cfg.algorithm]
    unroll = dataset.unroll

    def compute_update(user_idx: int):
        shard = dataset.users[user_idx]
        rng = substream(cfg.seed, "local", round_idx, user_idx)
        delta, preclip, clipped = update_fn(
            shard.tokens, params, model, cfg, unroll, rng, shard.user_id
        )
        return user_idx, delta, preclip, clipped

    logs: list[RoundLog] = []
    for round_idx in range(start_round, start_round + cfg.rounds):
        sample_rng = substream(cfg.seed, "sample", round_idx)
        sampled = sample_users(K, q, sample_rng, cfg.fixed_sample_size)

        if cfg.workers > 1 and len(sampled) > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(compute_update, sampled))
        else:
            results = [compute_update(i) for i in sampled]
        results.sort(key=lambda r: r[0])  # canonical accumulation order

        updates = [
            WeightedUpdate(dataset.users[i].user_id, float(weights[i]), delta)
            for i, delta, _, _ in results
        ]
        preclip_norms = [r[2] for r in results]
        clipped_flags = [r[3] for r in results]

        mean_update = estimate(updates, est_cfg, zero_like=params)
        noise_rng = substream(cfg.seed, "noise", round_idx)
        released = params + add_gaussian_noise(mean_update, sigma, noise_rng)
        if not released.is_finite():
            raise FedTrainError(f"non-finite parameters after round {round_idx}")
        params = released

        if cfg.noise_enabled:
            accountant.accum_priv_spending(cfg.z)
            epsilon = accountant.get_privacy_spent(cfg.delta)
        else:
            epsilon = math.inf

        log = RoundLog(
            round=round_idx,
            sampled_users=len(sampled),
            preclip_norm_min=min(preclip_norms) if preclip_norms else math.nan,
            preclip_norm_median=statistics.median(preclip_norms) if preclip_norms else math.nan,
            preclip_norm_max=max(preclip_norms) if preclip_norms else math.nan,
            frac_clipped=(sum(clipped_flags) / len(clipped_flags)) if clipped_flags else 0.0,
            sigma=sigma,
            epsilon=epsilon,
        )
        if eval_set is not None and (round_idx + 1) % cfg.eval_every == 0:
            m = evaluate(model, params, eval_set)
            log.accuracy_top1 = m["accuracy_top1"]
            log.loss = m["loss"]
        logs.append(log)
        if round_callback is not None:
            round_callback(log, params, accountant)

    final_eps = accountant.get_privacy_spent(cfg.delta) if accountant.history else math.inf
    return TrainResult(params, logs, final_eps, accountant)
