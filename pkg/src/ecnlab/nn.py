"""Minimal dense-network numerics: forward, hand-derived backward, Adam.

Everything is float64 numpy. A network is a list of (W, b) layers with a
per-layer activation tag ("relu" or "linear"). Backward returns parameter
gradients in the same shapes; update applies Adam with bias correction and
refuses (as a counted no-op) to apply non-finite gradients.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

RELU = "relu"
LINEAR = "linear"
CHECKPOINT_SCHEMA = 1


class CheckpointError(ValueError):
    """Checkpoint document malformed or shape-inconsistent."""


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # each (fan_out, fan_in)
    biases: list[np.ndarray]  # each (fan_out,)
    activations: list[str]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )


class MlpGrads(NamedTuple):
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def finite(self) -> bool:
        return all(np.isfinite(g).all() for g in self.weights + self.biases)


def zeros_like_grads(p: MlpParams) -> MlpGrads:
    return MlpGrads([np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases])


def add_grads(acc: MlpGrads, extra: MlpGrads) -> None:
    for a, e in zip(acc.weights, extra.weights):
        a += e
    for a, e in zip(acc.biases, extra.biases):
        a += e


def init_mlp(rng: np.random.Generator, sizes: list[int], activations: list[str] | None = None) -> MlpParams:
    """Uniform fan-in init: W, b ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Default activations: relu on every hidden layer, linear output.
    """
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    n_layers = len(sizes) - 1
    if activations is None:
        activations = [RELU] * (n_layers - 1) + [LINEAR]
    if len(activations) != n_layers:
        raise ValueError(f"expected {n_layers} activation tags, got {len(activations)}")
    for a in activations:
        if a not in (RELU, LINEAR):
            raise ValueError(f"unknown activation {a!r}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(weights, biases, list(activations))


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def forward(p: MlpParams, x: np.ndarray) -> np.ndarray:
    """Apply the network; accepts a single vector or an (N, n_in) batch."""
    xb, squeeze = _as_batch(x)
    a = xb
    for w, b, act in zip(p.weights, p.biases, p.activations):
        z = a @ w.T + b
        a = np.maximum(z, 0.0) if act == RELU else z
    return a[0] if squeeze else a


def forward_with_cache(p: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Like forward but keeps per-layer inputs and pre-activations for backward."""
    xb, _ = _as_batch(x)
    cache = []
    a = xb
    for w, b, act in zip(p.weights, p.biases, p.activations):
        z = a @ w.T + b
        cache.append((a, z))
        a = np.maximum(z, 0.0) if act == RELU else z
    return a, cache


def backward(
    p: MlpParams, x: np.ndarray, upstream: np.ndarray, cache: list | None = None
) -> tuple[MlpGrads, np.ndarray]:
    """Gradients of sum(upstream * output) w.r.t. parameters and input.

    Batch inputs sum parameter gradients over the batch; the returned input
    gradient keeps the batch shape. relu' at exactly 0 is taken as 0.
    With a precomputed cache, x may be None (the cache holds the inputs).
    """
    if x is None:
        if cache is None:
            raise ValueError("backward needs either x or a forward cache")
        xb, squeeze = cache[0][0], False
    else:
        xb, squeeze = _as_batch(x)
    if cache is None:
        _, cache = forward_with_cache(p, xb)
    up, _ = _as_batch(upstream)
    if up.shape[0] != xb.shape[0]:
        raise ValueError("upstream batch size does not match input")
    d = up
    grads_w = [None] * len(p.weights)
    grads_b = [None] * len(p.weights)
    for li in range(len(p.weights) - 1, -1, -1):
        a_in, z = cache[li]
        if p.activations[li] == RELU:
            d = d * (z > 0.0)
        grads_w[li] = d.T @ a_in
        grads_b[li] = d.sum(axis=0)
        d = d @ p.weights[li]
    return MlpGrads(grads_w, grads_b), (d[0] if squeeze else d)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0
    m_w: list[np.ndarray] = field(default_factory=list)
    v_w: list[np.ndarray] = field(default_factory=list)
    m_b: list[np.ndarray] = field(default_factory=list)
    v_b: list[np.ndarray] = field(default_factory=list)


def init_optimizer(p: MlpParams, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        m_w=[np.zeros_like(w) for w in p.weights],
        v_w=[np.zeros_like(w) for w in p.weights],
        m_b=[np.zeros_like(b) for b in p.biases],
        v_b=[np.zeros_like(b) for b in p.biases],
    )


def update(p: MlpParams, opt: OptimizerState, grads: MlpGrads) -> bool:
    """One Adam step in place. Non-finite gradients skip the whole step."""
    if not grads.finite():
        opt.skipped += 1
        log.warning("skipping optimizer step %d: non-finite gradient", opt.step + 1)
        return False
    opt.step += 1
    c1 = 1.0 - opt.beta1**opt.step
    c2 = 1.0 - opt.beta2**opt.step

    def adam(theta, m, v, g):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * np.square(g)
        theta -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)

    for w, m, v, g in zip(p.weights, opt.m_w, opt.v_w, grads.weights):
        adam(w, m, v, g)
    for b, m, v, g in zip(p.biases, opt.m_b, opt.v_b, grads.biases):
        adam(b, m, v, g)
    return True


def params_to_doc(p: MlpParams) -> dict:
    return {
        "layers": [
            {
                "shape": [int(w.shape[0]), int(w.shape[1])],
                "weights": w.reshape(-1).tolist(),
                "bias": b.tolist(),
                "activation": act,
            }
            for w, b, act in zip(p.weights, p.biases, p.activations)
        ]
    }


def params_from_doc(doc: dict) -> MlpParams:
    try:
        layers = doc["layers"]
        weights, biases, acts = [], [], []
        for l in layers:
            out_n, in_n = (int(v) for v in l["shape"])
            w = np.asarray(l["weights"], dtype=float)
            if w.size != out_n * in_n:
                raise CheckpointError(f"layer {l['shape']}: {w.size} weights, expected {out_n * in_n}")
            b = np.asarray(l["bias"], dtype=float)
            if b.size != out_n:
                raise CheckpointError(f"layer {l['shape']}: {b.size} biases, expected {out_n}")
            if l["activation"] not in (RELU, LINEAR):
                raise CheckpointError(f"unknown activation {l['activation']!r}")
            weights.append(w.reshape(out_n, in_n))
            biases.append(b)
            acts.append(l["activation"])
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"malformed network document: {e}") from e
    if not weights:
        raise CheckpointError("network document has no layers")
    for prev, nxt in zip(weights, weights[1:]):
        if prev.shape[0] != nxt.shape[1]:
            raise CheckpointError("consecutive layer shapes do not chain")
    return MlpParams(weights, biases, acts)


def save_checkpoint(path, doc: dict) -> None:
    doc = dict(doc)
    doc.setdefault("schema_version", CHECKPOINT_SCHEMA)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"unsupported checkpoint schema {doc.get('schema_version')!r}")
    return doc
