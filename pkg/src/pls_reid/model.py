"""Embedding MLP, batchnorm/dropout classifier head, exact backward pass and Adam.

Shapes: inputs are ``(n, D)``, embeddings ``(n, E)``, logits ``(n, C)``.
Weight matrices are stored ``(fan_in, fan_out)`` so a layer is ``x @ W + b``.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from pls_reid.errors import (
    DimensionMismatchError,
    InvalidParameterError,
    MalformedFileError,
    StaleActivationError,
)

TRAIN = "train"
EVAL = "eval"
BN_EPS = 1e-5
CHECKPOINT_VERSION = 1

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(z.dtype)),
}


@dataclass
class ModelParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: np.ndarray
    bn_scale: np.ndarray
    bn_bias: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    dropout_rate: float = 0.5
    bn_momentum: float = 0.1
    activation: str = "tanh"
    # fixed input standardization: (x - input_shift) / input_scale
    input_shift: np.ndarray | None = None
    input_scale: float = 1.0

    def __post_init__(self):
        if self.input_shift is None:
            self.input_shift = np.zeros(self.weights[0].shape[0])

    @property
    def D(self) -> int:
        return self.weights[0].shape[0]

    @property
    def E(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def C(self) -> int:
        return self.head.shape[1]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"weights.{k}", w))
            out.append((f"biases.{k}", b))
        out += [("head", self.head), ("bn_scale", self.bn_scale), ("bn_bias", self.bn_bias)]
        return out

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return self.named_arrays() + [
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
            ("input_shift", self.input_shift),
            ("input_scale", np.array([self.input_scale])),
        ]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, a in self.state_arrays():
            h.update(name.encode())
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(repr((self.dropout_rate, self.bn_momentum, self.activation)).encode())
        return h.hexdigest()

    def copy(self) -> ModelParams:
        return copy.deepcopy(self)


@dataclass
class ModelSnapshot:
    params: ModelParams
    rng_state: dict | None = None


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: np.ndarray
    bn_scale: np.ndarray
    bn_bias: np.ndarray
    inputs: np.ndarray | None = None

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"weights.{k}", w))
            out.append((f"biases.{k}", b))
        out += [("head", self.head), ("bn_scale", self.bn_scale), ("bn_bias", self.bn_bias)]
        return out


@dataclass
class Trace:
    """Activations recorded by TRAIN-mode forward passes, consumed by :func:`backward`."""

    inputs: np.ndarray | None = None
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    embeddings: np.ndarray | None = None
    xhat: np.ndarray | None = None
    inv_std: np.ndarray | None = None
    mask: np.ndarray | None = None
    dropped: np.ndarray | None = None


def init_model(
    D: int,
    hidden_sizes=(64,),
    E: int = 32,
    C: int = 2,
    dropout_rate: float = 0.5,
    seed: int = 0,
    activation: str = "tanh",
    bn_momentum: float = 0.1,
    input_stats: tuple[np.ndarray, float] | None = None,
) -> tuple[ModelParams, ModelSnapshot]:
    """Seeded fan-in scaled weights, zero biases, identity batchnorm state.

    ``input_stats=(shift, scale)`` fixes the input standardization; typically the
    per-dimension mean and the overall standard deviation of the training inputs.
    """
    if D < 1 or E < 1 or C < 1 or any(h < 1 for h in hidden_sizes):
        raise InvalidParameterError("layer sizes must be >= 1")
    if not 0.0 <= dropout_rate < 1.0:
        raise InvalidParameterError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
    if activation not in _ACTIVATIONS:
        raise InvalidParameterError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    rng_state = copy.deepcopy(rng.bit_generator.state)
    sizes = [D, *hidden_sizes, E]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    head = rng.normal(0.0, 1.0 / np.sqrt(E), size=(E, C))
    params = ModelParams(
        weights=weights,
        biases=biases,
        head=head,
        bn_scale=np.ones(E),
        bn_bias=np.zeros(E),
        running_mean=np.zeros(E),
        running_var=np.ones(E),
        dropout_rate=float(dropout_rate),
        bn_momentum=float(bn_momentum),
        activation=activation,
    )
    if input_stats is not None:
        shift, scale = input_stats
        if not scale > 0:
            raise InvalidParameterError("input scale must be > 0")
        params.input_shift = np.asarray(shift, dtype=np.float64).copy()
        params.input_scale = float(scale)
    return params, ModelSnapshot(params.copy(), rng_state)


def input_statistics(inputs) -> tuple[np.ndarray, float]:
    """Per-dimension mean and a single overall scale (keeps relative geometry)."""
    x = np.asarray(inputs, dtype=np.float64)
    shift = x.mean(axis=0)
    scale = float(np.sqrt(np.mean(np.sum((x - shift) ** 2, axis=1)) / x.shape[1]))
    return shift, scale if scale > 0 else 1.0


def embed(params: ModelParams, inputs, mode: str = EVAL, trace: Trace | None = None) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.D:
        raise DimensionMismatchError(f"expected inputs of shape (n, {params.D}), got {x.shape}")
    if mode not in (TRAIN, EVAL):
        raise InvalidParameterError(f"mode must be {TRAIN!r} or {EVAL!r}")
    act, _ = _ACTIVATIONS[params.activation]
    record = mode == TRAIN and trace is not None
    h = (x - params.input_shift) / params.input_scale
    if record:
        trace.inputs = h
        trace.pre, trace.post = [], []
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = z if k == last else act(z)
        if record:
            trace.pre.append(z)
            trace.post.append(h)
    if record:
        trace.embeddings = h
    return h


def classify(
    params: ModelParams,
    embeddings,
    mode: str = EVAL,
    dropout_seed=None,
    trace: Trace | None = None,
) -> np.ndarray:
    """Logits ``W^T dropout(BN(embedding))``; TRAIN mode updates running stats in place."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[1] != params.E:
        raise DimensionMismatchError(f"expected embeddings of shape (n, {params.E}), got {e.shape}")
    if mode == EVAL:
        xhat = (e - params.running_mean) / np.sqrt(params.running_var + BN_EPS)
        return (params.bn_scale * xhat + params.bn_bias) @ params.head
    if mode != TRAIN:
        raise InvalidParameterError(f"mode must be {TRAIN!r} or {EVAL!r}")
    if dropout_seed is None:
        raise InvalidParameterError("TRAIN mode requires a dropout seed")

    n = e.shape[0]
    mu = e.mean(axis=0)
    var = e.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (e - mu) * inv_std
    y = params.bn_scale * xhat + params.bn_bias

    m = params.bn_momentum
    unbiased = var * n / (n - 1) if n > 1 else var
    params.running_mean = (1 - m) * params.running_mean + m * mu
    params.running_var = (1 - m) * params.running_var + m * unbiased

    keep = 1.0 - params.dropout_rate
    rng = np.random.default_rng(dropout_seed)
    mask = (rng.random(y.shape) < keep) / keep
    dropped = y * mask
    if trace is not None:
        trace.embeddings = e if trace.embeddings is None else trace.embeddings
        trace.xhat, trace.inv_std, trace.mask, trace.dropped = xhat, inv_std, mask, dropped
    return dropped @ params.head


def backward(
    params: ModelParams,
    trace: Trace,
    grad_embeddings=None,
    grad_logits=None,
) -> Gradients:
    """Exact gradients of a scalar loss given its gradients w.r.t. embeddings and/or logits."""
    if trace.inputs is None or trace.embeddings is None:
        raise StaleActivationError("no recorded TRAIN-mode forward pass")
    n, E = trace.embeddings.shape
    g_emb = np.zeros((n, E))
    head_grad = np.zeros_like(params.head)
    scale_grad = np.zeros_like(params.bn_scale)
    bias_grad = np.zeros_like(params.bn_bias)

    if grad_logits is not None:
        gl = np.asarray(grad_logits, dtype=np.float64)
        if trace.dropped is None:
            raise StaleActivationError("logit gradients given but classify was not recorded")
        if gl.shape != (n, params.C):
            raise StaleActivationError(f"logit gradients {gl.shape} do not match ({n}, {params.C})")
        head_grad = trace.dropped.T @ gl
        dy = (gl @ params.head.T) * trace.mask
        scale_grad = np.sum(dy * trace.xhat, axis=0)
        bias_grad = np.sum(dy, axis=0)
        dxhat = dy * params.bn_scale
        g_emb += (trace.inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - trace.xhat * np.sum(dxhat * trace.xhat, axis=0)
        )
    if grad_embeddings is not None:
        ge = np.asarray(grad_embeddings, dtype=np.float64)
        if ge.shape != (n, E):
            raise StaleActivationError(f"embedding gradients {ge.shape} do not match ({n}, {E})")
        g_emb += ge

    _, dact = _ACTIVATIONS[params.activation]
    L = len(params.weights)
    wg, bg = [None] * L, [None] * L
    g = g_emb
    for k in range(L - 1, -1, -1):
        if k != L - 1:
            g = g * dact(trace.pre[k], trace.post[k])
        h_in = trace.inputs if k == 0 else trace.post[k - 1]
        wg[k] = h_in.T @ g
        bg[k] = g.sum(axis=0)
        g = g @ params.weights[k].T
    return Gradients(wg, bg, head_grad, scale_grad, bias_grad, inputs=g / params.input_scale)


def snapshot(params: ModelParams, rng_state=None) -> ModelSnapshot:
    return ModelSnapshot(params.copy(), copy.deepcopy(rng_state))


def restore(snap: ModelSnapshot) -> ModelParams:
    return snap.params.copy()


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


# bn scale/bias belong to the new head block, not the pretrained backbone
HEAD_PARAMS = ("head", "bn_scale", "bn_bias")


def adam_step(
    params: ModelParams,
    grads: Gradients,
    state: AdamState,
    lr_backbone: float = 0.00035,
    lr_head: float = 0.0035,
) -> ModelParams:
    """One in-place Adam update; embedding layers and head use separate learning rates."""
    live = dict(params.named_arrays())
    gmap = dict(grads.named_arrays())
    if live.keys() != gmap.keys():
        raise DimensionMismatchError("gradient structure does not match parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in live.items():
        g = gmap[name]
        if g.shape != p.shape:
            raise DimensionMismatchError(f"{name}: gradient shape {g.shape} != {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        lr = lr_head if name in HEAD_PARAMS else lr_backbone
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def save_checkpoint(params: ModelParams, path) -> None:
    """npz archive: arrays by name plus a JSON ``meta`` entry carrying the format version."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "layers": len(params.weights),
        "dropout_rate": params.dropout_rate,
        "bn_momentum": params.bn_momentum,
        "activation": params.activation,
    }
    arrays = {name: a for name, a in params.state_arrays()}
    buf = io.BytesIO()
    np.savez(buf, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> ModelParams:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            arrays = {k: z[k].copy() for k in z.files if k != "meta"}
    except (OSError, ValueError, KeyError) as exc:
        raise MalformedFileError(f"unreadable model checkpoint: {exc}") from None
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise MalformedFileError(f"unsupported checkpoint version {meta.get('format_version')!r}")
    L = meta["layers"]
    return ModelParams(
        weights=[arrays[f"weights.{k}"] for k in range(L)],
        biases=[arrays[f"biases.{k}"] for k in range(L)],
        head=arrays["head"],
        bn_scale=arrays["bn_scale"],
        bn_bias=arrays["bn_bias"],
        running_mean=arrays["running_mean"],
        running_var=arrays["running_var"],
        dropout_rate=meta["dropout_rate"],
        bn_momentum=meta["bn_momentum"],
        activation=meta["activation"],
        input_shift=arrays["input_shift"],
        input_scale=float(arrays["input_scale"][0]),
    )


def params_to_dict(params: ModelParams) -> dict[str, Any]:
    return {name: a.tolist() for name, a in params.state_arrays()}
