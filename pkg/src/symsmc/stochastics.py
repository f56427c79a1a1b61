"""Counter-based splittable randomness and discrete distributions.

Random numbers are a pure function of ``(seed, path, draw index)``: a
key never carries mutable state, so any particle, time step or choice
point can be given its own key and the draw it produces is independent
of program order.  Splitting appends a label to the path; the chain of
64-bit states is a splitmix-style hash, implemented twice with the same
constants - once on Python ints, once vectorised on numpy uint64 - and
the two are bit-identical.

Distributions hold their parameters as tape Vars so log-probabilities
stay differentiable.  Sampling itself only reads forward values:
inverse CDF over the declared label order on a single uniform draw.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import Var, concat, exp as _exp, gather, logsumexp
from .errors import ContractError

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_SEED_TWEAK = 0x5851F42D4C957F2D
_DRAW_WEYL = 0xD1B54A32D192ED03
_FOLD_SHIFT = 0x6A09E667F3BCC909


def _mix(z: int) -> int:
    z &= _MASK
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK
    z ^= z >> 31
    return z


def _fold(state: int, label: int) -> int:
    return _mix(state ^ ((label * _GOLDEN + _FOLD_SHIFT) & _MASK))


def _draw_bits(state: int, index: int) -> int:
    return _mix(state ^ ((index * _DRAW_WEYL + _GOLDEN) & _MASK))


class RngKey:
    """Immutable key identified by a seed and a tuple of path labels."""

    __slots__ = ("seed", "path", "_state")

    def __init__(self, seed: int, path: Sequence = (), _state: int | None = None):
        self.seed = int(seed)
        self.path = tuple(path)
        if _state is None:
            _state = _mix((self.seed & _MASK) ^ _SEED_TWEAK)
            for label in self.path:
                _state = _fold(_state, _label_to_int(label))
        self._state = _state

    def __eq__(self, other):
        return (isinstance(other, RngKey)
                and self.seed == other.seed and self.path == other.path)

    def __hash__(self):
        return hash((self.seed, self.path))

    def __repr__(self):
        return f"RngKey(seed={self.seed}, path={self.path})"

    @property
    def state(self) -> int:
        return self._state

    def uniform(self, index: int = 0) -> float:
        """Uniform float64 in [0, 1) for the given draw index."""
        return ((_draw_bits(self._state, int(index) & _MASK)) >> 11) * 2.0 ** -53

    def uniforms(self, n: int) -> np.ndarray:
        return uniform_array(np.uint64(self._state), np.arange(n, dtype=np.uint64))


def _label_to_int(label) -> int:
    """Deterministic 64-bit encoding of a split label.

    Accepts ints (wrapped mod 2^64), strings (byte fold; independent of
    the process hash seed) and tuples of those (element-wise fold).
    """
    if isinstance(label, (bool, np.bool_)):
        return int(label)
    if isinstance(label, (int, np.integer)):
        return int(label) & _MASK
    if isinstance(label, str):
        acc = _mix((len(label) & _MASK) ^ _SEED_TWEAK)
        for b in label.encode("utf-8"):
            acc = _mix(acc ^ ((b * _GOLDEN) & _MASK))
        return acc
    if isinstance(label, tuple):
        acc = _mix(((len(label) * _DRAW_WEYL) & _MASK) ^ _GOLDEN)
        for item in label:
            acc = _fold(acc, _label_to_int(item))
        return acc
    raise ContractError(
        f"rng split labels must be int, str or tuples of those, got "
        f"{type(label).__name__}")


def split(key: RngKey, label) -> RngKey:
    """Child key with ``label`` appended to the path."""
    return RngKey(key.seed, key.path + (label,),
                  _state=_fold(key._state, _label_to_int(label)))


def split_many(key: RngKey, *labels) -> RngKey:
    for label in labels:
        key = split(key, label)
    return key


# ---------------------------------------------------------------------------
# vectorised mirror (bit-identical to the scalar path, used by the
# array-shaped filters where one key per particle would be too slow)


def mix_array(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


def fold_array(state, labels) -> np.ndarray:
    """Vectorised :func:`split`: fold an array of labels into a state."""
    labels = np.asarray(labels, dtype=np.uint64)
    state = np.uint64(state) if np.isscalar(state) or np.ndim(state) == 0 else np.asarray(state, dtype=np.uint64)
    # uint64 wraparound is the splitmix contract, not an error
    with np.errstate(over="ignore"):
        return mix_array(state ^ (labels * np.uint64(_GOLDEN) + np.uint64(_FOLD_SHIFT)))


def uniform_array(states, indices) -> np.ndarray:
    """Vectorised :meth:`RngKey.uniform` over states and/or draw indices."""
    states = np.asarray(states, dtype=np.uint64)
    indices = np.asarray(indices, dtype=np.uint64)
    with np.errstate(over="ignore"):
        bits = mix_array(states ^ (indices * np.uint64(_DRAW_WEYL) + np.uint64(_GOLDEN)))
    return (bits >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


# ---------------------------------------------------------------------------
# distributions


@dataclass
class CategoricalDist:
    """Finite categorical with differentiable logits over fixed labels."""

    logits: Var
    labels: tuple

    def __post_init__(self):
        self.labels = tuple(self.labels)
        if self.logits.value.ndim != 1:
            raise ContractError("CategoricalDist: logits must be a vector")
        if self.logits.value.shape[0] != len(self.labels) or not self.labels:
            raise ContractError("CategoricalDist: need one logit per label")


@dataclass
class BernoulliDist:
    """Two-point distribution over (True, False) from a scalar logit."""

    logit: Var

    def __post_init__(self):
        if self.logit.value.ndim != 0:
            raise ContractError("BernoulliDist: logit must be a scalar")

    @property
    def labels(self):
        return (True, False)


@dataclass
class Deterministic:
    """Single-support pseudo-distribution; consumes no randomness."""

    value: object

    @property
    def labels(self):
        return (self.value,)


def _categorical_logits(dist) -> Var:
    if isinstance(dist, CategoricalDist):
        return dist.logits
    if isinstance(dist, BernoulliDist):
        zero = dist.logit.tape.constant(0.0)
        return concat(dist.logit, zero)
    raise ContractError(f"not a finite distribution: {dist!r}")


def log_prob(dist, label) -> Var:
    """Differentiable log-probability of ``label`` under ``dist``.

    Deterministic choices carry no tape and have log-probability zero;
    callers handle them without going through here.
    """
    if isinstance(dist, Deterministic):
        raise ContractError("Deterministic has no logits; its log-probability is 0")
    logits = _categorical_logits(dist)
    try:
        idx = dist.labels.index(label)
    except ValueError:
        raise ContractError(f"label {label!r} not in support {dist.labels}") from None
    return gather(logits, idx) - logsumexp(logits)


def probs(dist) -> np.ndarray:
    """Forward probability values in label order (no tape growth)."""
    if isinstance(dist, Deterministic):
        return np.ones(1)
    logits = dist.logits.value if isinstance(dist, CategoricalDist) else \
        np.array([float(dist.logit.value), 0.0])
    m = np.max(logits)
    e = np.exp(logits - m)
    return e / np.sum(e)


def sample(dist, key: RngKey, index: int = 0):
    """Inverse-CDF draw over the declared label order; returns a label."""
    if isinstance(dist, Deterministic):
        return dist.value
    p = probs(dist)
    u = key.uniform(index)
    cum = 0.0
    for k in range(p.size - 1):
        cum += p[k]
        if u < cum:
            return dist.labels[k]
    return dist.labels[-1]


def enumerate_support(dist) -> list:
    """``[(label, probability Var)]`` in declared order.

    Probabilities are ``exp(log_prob)`` on the owning tape, so they stay
    differentiable and sum to one up to roundoff.
    """
    if isinstance(dist, Deterministic):
        raise ContractError("Deterministic support carries no tape; handle separately")
    logits = _categorical_logits(dist)
    lse = logsumexp(logits)
    return [(label, _exp(gather(logits, i) - lse))
            for i, label in enumerate(dist.labels)]
