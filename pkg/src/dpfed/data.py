"""User-sharded token datasets: synthesis, windowing, and JSONL storage.

Each user owns a single token sequence. Training examples are fixed-length
windows cut from that sequence (cyclically, so every token is predicted
exactly once per epoch regardless of alignment).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .rng import substream


@dataclass(frozen=True)
class UserShard:
    user_id: str
    tokens: np.ndarray  # 1-D int64

    def __post_init__(self):
        arr = np.asarray(self.tokens, dtype=np.int64).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "tokens", arr)
        if arr.ndim != 1 or arr.size == 0:
            raise ConfigError(f"user {self.user_id}: tokens must be a nonempty 1-D array")

    @property
    def num_tokens(self) -> int:
        return int(self.tokens.size)


@dataclass(frozen=True)
class TokenDataset:
    users: tuple[UserShard, ...]
    vocab_size: int
    unroll: int = 10

    def __post_init__(self):
        object.__setattr__(self, "users", tuple(self.users))
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.unroll < 1:
            raise ConfigError(f"unroll must be >= 1, got {self.unroll}")
        for shard in self.users:
            if shard.tokens.min() < 0 or shard.tokens.max() >= self.vocab_size:
                raise ConfigError(f"user {shard.user_id}: token outside vocabulary")

    @property
    def num_users(self) -> int:
        return len(self.users)

    def weights(self, example_cap: float) -> np.ndarray:
        """Per-user weights w_k = min(n_k / cap, 1)."""
        if not (example_cap > 0):
            raise ConfigError(f"example cap must be positive, got {example_cap}")
        counts = np.array([s.num_tokens for s in self.users], dtype=np.float64)
        return np.minimum(counts / example_cap, 1.0)

    def total_weight(self, example_cap: float) -> float:
        return float(self.weights(example_cap).sum())

    def all_windows(self) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated (inputs, targets) windows over every user."""
        ins, tgts = [], []
        for shard in self.users:
            i, t = shard_windows(shard.tokens, self.unroll)
            ins.append(i)
            tgts.append(t)
        return np.concatenate(ins, axis=0), np.concatenate(tgts, axis=0)


def shard_windows(tokens: np.ndarray, unroll: int) -> tuple[np.ndarray, np.ndarray]:
    """Cut a token sequence into cyclic, non-overlapping prediction windows.

    Window i covers positions [i*unroll, (i+1)*unroll); targets are the
    inputs shifted by one, wrapping at the end of the sequence. A sequence
    of n tokens yields ceil(n / unroll) windows.
    """
    n = tokens.size
    num_windows = -(-n // unroll)
    starts = np.arange(num_windows) * unroll
    offsets = np.arange(unroll)
    idx = (starts[:, None] + offsets[None, :]) % n
    return tokens[idx], tokens[(idx + 1) % n]


def synthesize_dataset(
    num_users: int,
    tokens_per_user: int,
    vocab_size: int,
    heterogeneity: float,
    seed: int,
    unroll: int = 10,
    stream: str = "train",
) -> TokenDataset:
    """Generate a population of users with per-user Markov-chain text.

    Every user samples from a mixture chain: with probability
    (1 - heterogeneity) the next token follows a population-shared
    transition matrix, otherwise it follows the user's own preference
    distribution, which concentrates on a per-user preferred token
    (user index mod vocab). heterogeneity=0 makes all users identically
    distributed; heterogeneity=1 makes them fully idiosyncratic.

    Deterministic in (seed, stream); ``stream`` separates e.g. train and
    eval populations drawn from the same process.
    """
    if num_users < 1:
        raise ConfigError(f"num_users must be >= 1, got {num_users}")
    if vocab_size < 2:
        raise ConfigError(f"vocab_size must be >= 2, got {vocab_size}")
    if not (0.0 <= heterogeneity <= 1.0):
        raise ConfigError(f"heterogeneity must be in [0,1], got {heterogeneity}")

    # the population-shared chain depends only on the seed, so users from
    # different streams (train/eval) follow the same underlying language
    shared_rng = substream(seed, "synth", "shared-chain")
    shared = shared_rng.dirichlet(np.ones(vocab_size), size=vocab_size)
    shared_cdf = np.cumsum(shared, axis=1)

    shards = []
    for u in range(num_users):
        rng = substream(seed, "synth", stream, "user", u)
        preferred = u % vocab_size
        own = 0.4 * rng.dirichlet(np.ones(vocab_size))
        own[preferred] += 0.6
        own_cdf = np.cumsum(own)

        uniforms = rng.random(tokens_per_user)
        use_own = rng.random(tokens_per_user) < heterogeneity
        tokens = np.empty(tokens_per_user, dtype=np.int64)
        cur = int(rng.integers(vocab_size))
        for t in range(tokens_per_user):
            if use_own[t]:
                cur = int(np.searchsorted(own_cdf, uniforms[t]))
            else:
                cur = int(np.searchsorted(shared_cdf[cur], uniforms[t]))
            cur = min(cur, vocab_size - 1)  # guard the u ~ 1.0 edge
            tokens[t] = cur
        shards.append(UserShard(f"u{u:06d}", tokens))

    return TokenDataset(tuple(shards), vocab_size, unroll)


def save_jsonl(dataset: TokenDataset, path) -> None:
    """One record per user: {"user_id": str, "tokens": [int, ...]}."""
    with open(path, "w", encoding="utf-8") as fh:
        for shard in dataset.users:
            rec = {"user_id": shard.user_id, "tokens": shard.tokens.tolist()}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_jsonl(path, vocab_size: int, unroll: int = 10) -> TokenDataset:
    shards = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            shards.append(
                UserShard(rec["user_id"], np.asarray(rec["tokens"], dtype=np.int64))
            )
    if not shards:
        raise ConfigError(f"dataset file {path} contains no users")
    return TokenDataset(tuple(shards), vocab_size, unroll)
