"""Small dense networks and the Adam optimiser.

Parameters live in a :class:`ParamStore`: a flat ``name -> float64
array`` map plus Adam moment buffers and a step counter.  The same
store can be evaluated two ways:

* :func:`forward` records the computation on a tape Var-by-Var, for
  gradient work;
* :func:`forward_batch` runs plain vectorised numpy over a batch of
  input rows and keeps the activations so :func:`vjp_batch` can pull a
  batch of output cotangents back to parameter gradients.

Both paths share the same parameter layout (``w0/b0/w1/b1/...`` with an
optional prefix) and agree to float64 roundoff; a test pins that.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ContractError
from .stochastics import RngKey, split

_HEADS = ("linear", "log_softmax", "sigmoid_logit")


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes ``(in, hidden..., out)`` with ReLU between layers."""

    sizes: tuple
    head: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 2 or any(s < 1 for s in self.sizes):
            raise ContractError(f"MlpSpec: bad sizes {self.sizes}")
        if self.head not in _HEADS:
            raise ContractError(f"MlpSpec: head must be one of {_HEADS}")
        if self.head == "sigmoid_logit" and self.sizes[-1] != 1:
            raise ContractError("sigmoid_logit head requires an output size of 1")

    @property
    def n_layers(self):
        return len(self.sizes) - 1


@dataclass
class ParamStore:
    """Flat parameter map with Adam state."""

    values: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise ContractError(f"parameter {name!r} already registered")
        arr = np.asarray(value, dtype=np.float64)
        self.values[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]


def glorot_init(spec: MlpSpec, key: RngKey, prefix: str = "") -> dict:
    """Glorot-uniform weights, zero biases: ``U(+-sqrt(6/(fan_in+fan_out)))``."""
    out = {}
    for layer in range(spec.n_layers):
        fan_in, fan_out = spec.sizes[layer], spec.sizes[layer + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        u = split(key, layer).uniforms(fan_out * fan_in)
        out[f"{prefix}w{layer}"] = (u * 2.0 - 1.0).reshape(fan_out, fan_in) * bound
        out[f"{prefix}b{layer}"] = np.zeros(fan_out)
    return out


def init_store(spec: MlpSpec, key: RngKey, prefix: str = "") -> ParamStore:
    store = ParamStore()
    for name, value in glorot_init(spec, key, prefix).items():
        store.add(name, value)
    return store


def forward(store: ParamStore, spec: MlpSpec, x, tape: dc.Tape,
            prefix: str = "") -> dc.Var:
    """Tape-recorded forward pass; returns the output Var (length out)."""
    h = x if isinstance(x, dc.Var) else tape.constant(np.asarray(x, dtype=np.float64))
    for layer in range(spec.n_layers):
        w = tape.param(f"{prefix}w{layer}", store[f"{prefix}w{layer}"])
        b = tape.param(f"{prefix}b{layer}", store[f"{prefix}b{layer}"])
        h = dc.matvec(w, h) + b
        if layer < spec.n_layers - 1:
            h = dc.relu(h)
    if spec.head == "log_softmax":
        h = h - dc.logsumexp(h)
    return h


def forward_batch(store: ParamStore, spec: MlpSpec, x: np.ndarray,
                  prefix: str = ""):
    """Vectorised forward over rows of ``x``; returns (output, cache)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.sizes[0]:
        raise ContractError(f"forward_batch: expected (B, {spec.sizes[0]}) input")
    pre, post = [], [x]
    h = x
    for layer in range(spec.n_layers):
        z = h @ store[f"{prefix}w{layer}"].T + store[f"{prefix}b{layer}"]
        pre.append(z)
        if layer < spec.n_layers - 1:
            h = np.maximum(z, 0.0)
            post.append(h)
        else:
            h = z
    if spec.head == "log_softmax":
        m = np.max(h, axis=1, keepdims=True)
        h = h - (m + np.log(np.sum(np.exp(h - m), axis=1, keepdims=True)))
    return h, (pre, post)


def vjp_batch(store: ParamStore, spec: MlpSpec, cache, cotangent: np.ndarray,
              prefix: str = "") -> dict:
    """Parameter gradients for a batch of output cotangents.

    ``cotangent`` has one row per input row; rows may be zero for inputs
    that ended up unused.  Gradients are summed over the batch.
    """
    pre, post = cache
    g = np.asarray(cotangent, dtype=np.float64)
    if spec.head == "log_softmax":
        sm = np.exp(pre[-1] - np.max(pre[-1], axis=1, keepdims=True))
        sm /= np.sum(sm, axis=1, keepdims=True)
        g = g - sm * np.sum(g, axis=1, keepdims=True)
    grads = {}
    for layer in reversed(range(spec.n_layers)):
        grads[f"{prefix}w{layer}"] = g.T @ post[layer]
        grads[f"{prefix}b{layer}"] = np.sum(g, axis=0)
        if layer > 0:
            g = (g @ store[f"{prefix}w{layer}"]) * (pre[layer - 1] > 0.0)
    return grads


def adam_step(store: ParamStore, grads: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update in place; ``lr=0`` leaves values as-is."""
    store.step += 1
    t = store.step
    for name, g in grads.items():
        if name not in store.values:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        g = np.asarray(g, dtype=np.float64)
        store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        m_hat = store.m[name] / (1.0 - beta1 ** t)
        v_hat = store.v[name] / (1.0 - beta2 ** t)
        store.values[name] = store.values[name] - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# checkpoints: flat name -> float64 array; .npz is bit-exact, .json readable


def save_checkpoint(path, values: dict) -> None:
    path = str(path)
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in values.items()}
    if path.endswith(".npz"):
        np.savez(path, **arrays)
    elif path.endswith(".json"):
        payload = {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                   for k, v in arrays.items()}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
    else:
        raise ContractError("checkpoint path must end in .npz or .json")


def load_checkpoint(path) -> dict:
    path = str(path)
    if path.endswith(".npz"):
        with np.load(path) as data:
            return {k: np.asarray(data[k], dtype=np.float64) for k in data.files}
    if path.endswith(".json"):
        with open(path) as fh:
            payload = json.load(fh)
        return {k: np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
                for k, spec in payload.items()}
    raise ContractError("checkpoint path must end in .npz or .json")
