"""Dense linear algebra helpers, stable probability transforms, and seeded RNG.

Matrices are plain 2-D float64 numpy arrays (row-major). Every public
operation validates shapes and rejects non-finite inputs so that bad values
surface where they are created instead of three modules later.

The random generator is written out explicitly (instead of delegating to a
library) so that any reimplementation, in any language, can reproduce the
exact same streams from the same 64-bit seed. The recurrences are:

splitmix64 (used for seed derivation and state initialization)::

    state = (state + 0x9E3779B97F4A7C15) mod 2^64
    z = state
    z = ((z XOR (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2^64
    z = ((z XOR (z >> 27)) * 0x94D049BB133111EB) mod 2^64
    output = z XOR (z >> 31)

xorshift64* (the draw stream; state is never zero)::

    x = state
    x = x XOR (x >> 12)
    x = (x XOR (x << 25)) mod 2^64
    x = x XOR (x >> 27)
    state = x
    output = (x * 0x2545F4914F6CDD1D) mod 2^64

Derived quantities:

* float in [0, 1): top 53 bits of the output, ``(u64 >> 11) * 2**-53``.
* bounded int in [0, n): Lemire multiply-shift, ``(u64 * n) >> 64``.
* standard normal: Box-Muller on two floats (the first resampled until
  nonzero), ``r = sqrt(-2 ln u1)``, returning ``r*cos(2 pi u2)`` and caching
  ``r*sin(2 pi u2)`` for the next call.
* permutation of n: Fisher-Yates, swapping index i (descending from n-1)
  with ``next_below(i + 1)``.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_XORSHIFT_MULT = 0x2545F4914F6CDD1D
_TWO_POW_NEG53 = 2.0 ** -53


def mix64(x: int) -> int:
    """splitmix64 finalizer: a bijective 64-bit mix with good avalanche."""
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, stream: int) -> int:
    """Return the ``stream``-th output of the splitmix64 sequence at ``seed``.

    Used to spawn independent deterministic sub-streams (model init, one per
    training epoch, ...) from a single run seed.
    """
    return mix64((seed + (stream + 1) * _GOLDEN) & _MASK64)


class Rng:
    """Seedable xorshift64* generator; identical seed, identical stream."""

    def __init__(self, seed: int):
        state = derive_seed(seed, 0)
        # xorshift has a fixed point at zero; remap that one seed.
        self._state = state if state != 0 else _GOLDEN
        self._spare_normal: float | None = None

    def next_uint64(self) -> int:
        x = self._state
        x ^= x >> 12
        x = (x ^ (x << 25)) & _MASK64
        x ^= x >> 27
        self._state = x
        return (x * _XORSHIFT_MULT) & _MASK64

    def next_float(self) -> float:
        """Uniform draw in [0, 1) with 53 bits of resolution."""
        return (self.next_uint64() >> 11) * _TWO_POW_NEG53

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n) via the multiply-shift reduction."""
        if n <= 0:
            raise ValueError(f"bound must be positive, got {n}")
        return (self.next_uint64() * n) >> 64

    def normal(self) -> float:
        """Standard normal via Box-Muller; draws two uniforms per pair."""
        if self._spare_normal is not None:
            value = self._spare_normal
            self._spare_normal = None
            return value
        u1 = self.next_float()
        while u1 == 0.0:
            u1 = self.next_float()
        u2 = self.next_float()
        radius = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare_normal = radius * math.sin(theta)
        return radius * math.cos(theta)

    def normals(self, shape: tuple[int, ...]) -> np.ndarray:
        out = np.empty(int(np.prod(shape)), dtype=np.float64)
        for i in range(out.size):
            out[i] = self.normal()
        return out.reshape(shape)

    def uniforms(self, shape: tuple[int, ...], lo: float, hi: float) -> np.ndarray:
        out = np.empty(int(np.prod(shape)), dtype=np.float64)
        span = hi - lo
        for i in range(out.size):
            out[i] = lo + span * self.next_float()
        return out.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.next_below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def _require_finite(m: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains NaN or Inf")


def gemm(a, b, transpose_a: bool = False, transpose_b: bool = False) -> np.ndarray:
    """Dense matrix product with optional operand transposes.

    Raises ValueError when the inner dimensions disagree, naming both shapes.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    _require_finite(a, "gemm operand a")
    _require_finite(b, "gemm operand b")
    left = a.T if transpose_a else a
    right = b.T if transpose_b else b
    if left.shape[1] != right.shape[0]:
        raise ValueError(
            f"gemm shape mismatch: ({left.shape[0]}x{left.shape[1]}) @ "
            f"({right.shape[0]}x{right.shape[1]})"
        )
    return left @ right


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    m = as_matrix(m)
    _require_finite(m, "softmax input")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(m) -> np.ndarray:
    """Row-wise log-softmax in the fused stable form x - max - log(sum(exp))."""
    m = as_matrix(m)
    _require_finite(m, "log_softmax input")
    shifted = m - m.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(target, log_probs) -> float:
    """Cross-entropy -sum(target * log_probs) for one length-K sample."""
    target = np.asarray(target, dtype=np.float64)
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if target.shape != log_probs.shape or target.ndim != 1:
        raise ValueError(
            f"cross_entropy length mismatch: target {target.shape} vs "
            f"log_probs {log_probs.shape}"
        )
    total = float(target.sum())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"target is not a distribution (sums to {total!r})")
    return float(-np.dot(target, log_probs))
