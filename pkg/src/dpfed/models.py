"""Built-in next-token models with analytic gradients.

The federated loop only needs three callables per model: loss, gradient,
and metrics, all functions of a ParamVector and a batch of token windows.
A batch is a pair of equal-shape int arrays ``(inputs, targets)`` of shape
(num_windows, unroll).

Two small models are provided:

* ``bigram_softmax``: per-token logits are a table row plus a bias, i.e.
  multinomial logistic regression on the previous token. Convex, so it
  doubles as an optimizer-sanity workhorse in tests.
* ``tiny_rnn``: a single tanh recurrent cell whose input embedding is tied
  to the output projection. Its layers (embedding / recurrent / bias) have
  very different gradient scales, which is what per-layer clipping is for.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .paramvec import ParamVector

Batch = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layer_dims: tuple[tuple[str, int], ...]
    init: Callable[[np.random.Generator], ParamVector]
    loss: Callable[[ParamVector, Batch], float]
    gradient: Callable[[ParamVector, Batch], ParamVector]
    metrics: Callable[[ParamVector, Batch], dict[str, float]]

    def check_params(self, params: ParamVector) -> None:
        expected = tuple((n, d) for n, d in self.layer_dims)
        actual = tuple((n, a.size) for n, a in params.layers())
        if expected != actual:
            raise ShapeMismatchError(
                f"{self.name} expects layers {expected}, got {actual}"
            )

    def zeros(self) -> ParamVector:
        return ParamVector((n, np.zeros(d)) for n, d in self.layer_dims)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_batch(batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    inputs, targets = batch
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    if inputs.shape != targets.shape or inputs.ndim != 2:
        raise ConfigError(
            f"batch arrays must be 2-D with equal shape, got {inputs.shape} vs {targets.shape}"
        )
    if inputs.size == 0:
        raise ConfigError("batch is empty")
    return inputs, targets


def bigram_softmax(vocab_size: int) -> ModelSpec:
    """Next-token logistic regression: logits[next] = table[cur, next] + bias[next]."""
    V = vocab_size
    dims = (("table", V * V), ("bias", V))

    def unpack(params: ParamVector) -> tuple[np.ndarray, np.ndarray]:
        return params.array("table").reshape(V, V), params.array("bias")

    def loss(params: ParamVector, batch: Batch) -> float:
        inputs, targets = _check_batch(batch)
        table, bias = unpack(params)
        cur, nxt = inputs.ravel(), targets.ravel()
        logp = _log_softmax(table[cur] + bias)
        return float(-logp[np.arange(cur.size), nxt].mean())

    def gradient(params: ParamVector, batch: Batch) -> ParamVector:
        inputs, targets = _check_batch(batch)
        table, bias = unpack(params)
        cur, nxt = inputs.ravel(), targets.ravel()
        probs = _softmax(table[cur] + bias)
        probs[np.arange(cur.size), nxt] -= 1.0
        probs /= cur.size
        # scatter-add of probs rows into table rows, as a one-hot matmul
        onehot = np.zeros((cur.size, V))
        onehot[np.arange(cur.size), cur] = 1.0
        grad_table = onehot.T @ probs
        return ParamVector._wrap(
            ("table", "bias"), [grad_table.ravel(), probs.sum(axis=0)]
        )

    def metrics(params: ParamVector, batch: Batch) -> dict[str, float]:
        inputs, targets = _check_batch(batch)
        table, bias = unpack(params)
        total_nll = 0.0
        correct = 0
        count = 0
        for lo in range(0, inputs.shape[0], 2048):
            cur = inputs[lo : lo + 2048].ravel()
            nxt = targets[lo : lo + 2048].ravel()
            logp = _log_softmax(table[cur] + bias)
            total_nll -= float(logp[np.arange(cur.size), nxt].sum())
            correct += int((logp.argmax(axis=1) == nxt).sum())
            count += cur.size
        return {"accuracy_top1": correct / count, "loss": total_nll / count}

    def init(rng: np.random.Generator) -> ParamVector:
        del rng  # zero start: uniform predictions, loss log(V)
        return ParamVector((n, np.zeros(d)) for n, d in dims)

    return ModelSpec("bigram_softmax", dims, init, loss, gradient, metrics)


def tiny_rnn(vocab_size: int, hidden: int = 16) -> ModelSpec:
    """One tanh recurrence with tied input/output embedding.

    h_t = tanh(h_{t-1} W + embed[x_t] + b), logits_t = h_t embed^T.
    """
    V, H = vocab_size, hidden
    dims = (("embedding", V * H), ("recurrent", H * H), ("bias", H))

    def unpack(params):
        return (
            params.array("embedding").reshape(V, H),
            params.array("recurrent").reshape(H, H),
            params.array("bias"),
        )

    def forward(params, inputs):
        emb, rec, bias = unpack(params)
        B, U = inputs.shape
        states = np.zeros((U, B, H))
        h = np.zeros((B, H))
        for t in range(U):
            h = np.tanh(h @ rec + emb[inputs[:, t]] + bias)
            states[t] = h
        return emb, rec, states

    def loss(params: ParamVector, batch: Batch) -> float:
        inputs, targets = _check_batch(batch)
        emb, _, states = forward(params, inputs)
        B, U = inputs.shape
        total = 0.0
        for t in range(U):
            logp = _log_softmax(states[t] @ emb.T)
            total -= float(logp[np.arange(B), targets[:, t]].sum())
        return total / (B * U)

    def gradient(params: ParamVector, batch: Batch) -> ParamVector:
        inputs, targets = _check_batch(batch)
        emb, rec, states = forward(params, inputs)
        B, U = inputs.shape
        n = B * U
        d_emb = np.zeros((V, H))
        d_rec = np.zeros((H, H))
        d_bias = np.zeros(H)
        d_h_next = np.zeros((B, H))
        for t in range(U - 1, -1, -1):
            h = states[t]
            probs = _softmax(h @ emb.T)
            probs[np.arange(B), targets[:, t]] -= 1.0
            probs /= n
            # output path: logits = h @ emb.T
            d_emb += probs.T @ h
            d_h = probs @ emb + d_h_next
            # through tanh
            d_pre = d_h * (1.0 - h * h)
            d_bias += d_pre.sum(axis=0)
            h_prev = states[t - 1] if t > 0 else np.zeros((B, H))
            d_rec += h_prev.T @ d_pre
            np.add.at(d_emb, inputs[:, t], d_pre)
            d_h_next = d_pre @ rec.T
        return ParamVector._wrap(
            ("embedding", "recurrent", "bias"), [d_emb.ravel(), d_rec.ravel(), d_bias]
        )

    def metrics(params: ParamVector, batch: Batch) -> dict[str, float]:
        inputs, targets = _check_batch(batch)
        total_nll = 0.0
        correct = 0
        count = 0
        for lo in range(0, inputs.shape[0], 512):
            inp = inputs[lo : lo + 512]
            tgt = targets[lo : lo + 512]
            emb, _, states = forward(params, inp)
            B, U = inp.shape
            for t in range(U):
                logp = _log_softmax(states[t] @ emb.T)
                total_nll -= float(logp[np.arange(B), tgt[:, t]].sum())
                correct += int((logp.argmax(axis=1) == tgt[:, t]).sum())
            count += B * U
        return {"accuracy_top1": correct / count, "loss": total_nll / count}

    def init(rng: np.random.Generator) -> ParamVector:
        return ParamVector(
            [
                ("embedding", 0.1 * rng.standard_normal(V * H)),
                ("recurrent", 0.1 * rng.standard_normal(H * H)),
                ("bias", np.zeros(H)),
            ]
        )

    return ModelSpec("tiny_rnn", dims, init, loss, gradient, metrics)


def builtin_models(vocab_size: int, hidden: int = 16) -> dict[str, ModelSpec]:
    return {
        "bigram_softmax": bigram_softmax(vocab_size),
        "tiny_rnn": tiny_rnn(vocab_size, hidden),
    }


def evaluate(spec: ModelSpec, params: ParamVector, eval_set: Batch) -> dict[str, float]:
    """accuracy_top1 and mean loss of ``params`` on an evaluation window set."""
    spec.check_params(params)
    inputs, _ = eval_set
    if np.asarray(inputs).size == 0:
        raise ConfigError("evaluation set is empty")
    return spec.metrics(params, eval_set)
