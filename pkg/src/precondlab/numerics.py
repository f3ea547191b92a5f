"""Dense float64 linear algebra, seeded counter-based RNG, and numeric helpers.

Everything here is pure and single-threaded; values are safe to share
read-only across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, NonSquareError, NotSymmetricError, ShapeMismatchError

_MASK64 = (1 << 64) - 1


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return a 2-D float64 array with finite entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeMismatchError(f"{name} must be 2-D with at least one row and column, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ShapeMismatchError(f"{name} must be 1-D and nonempty, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return v


def frob_norm(m) -> float:
    """Frobenius norm: sqrt of the sum of squared entries."""
    return float(np.sqrt(np.sum(np.square(as_matrix(m)))))


def softplus(x):
    """ln(1 + e^x), overflow-safe for large |x|. Accepts scalars or arrays."""
    out = np.logaddexp(0.0, np.asarray(x, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass
class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    Two instances with the same key produce bitwise-identical sequences no
    matter how other streams are interleaved. ``substream`` derives an
    independent child stream without consuming any state, so a derivation
    tree can be replayed from the key alone.
    """

    seed: int
    stream_id: int = 0
    counter: int = field(default=0, init=False)

    def __post_init__(self):
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64))
        )

    def substream(self, *indices: int) -> "RngStream":
        sid = self.stream_id & _MASK64
        for ix in indices:
            sid = _splitmix64(sid ^ _splitmix64(ix & _MASK64))
        return RngStream(self.seed, sid)

    def normal(self, shape=()) -> np.ndarray:
        self.counter += 1
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, low=0.0, high=1.0, shape=()) -> np.ndarray:
        self.counter += 1
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high, shape=()) -> np.ndarray:
        self.counter += 1
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._gen.permutation(n)


def spectral_radius_sym_similar(a, iters: int = 500, tol: float = 1e-12, similarity=None, seed: int = 0):
    """Largest |eigenvalue| of a matrix similar to a symmetric one.

    ``similarity``, when given, is a positive vector s such that
    diag(1/s) @ a @ diag(s) is symmetric (the I - P@H family with P = diag(s^2)
    positive and H symmetric). Without it, ``a`` itself must be symmetric;
    general non-normal matrices are rejected rather than mis-estimated.

    Returns (radius, converged). Power iteration, seeded start vector.
    """
    m = as_matrix(a, "a")
    if m.shape[0] != m.shape[1]:
        raise NonSquareError(f"expected square matrix, got {m.shape}")
    if similarity is not None:
        s = as_vector(similarity, "similarity")
        if s.shape[0] != m.shape[0]:
            raise ShapeMismatchError("similarity length must match matrix order")
        if np.any(s <= 0):
            raise NotSymmetricError("similarity vector must be strictly positive")
        m = (m * s[np.newaxis, :]) / s[:, np.newaxis]
    scale = np.max(np.abs(m))
    if scale == 0.0:
        return 0.0, True
    if np.max(np.abs(m - m.T)) > 1e-8 * max(scale, 1.0):
        raise NotSymmetricError("matrix is not symmetric (pass `similarity` for the I - P@H family)")
    m = 0.5 * (m + m.T)

    v = RngStream(seed, stream_id=0x5EC7).normal((m.shape[0],))
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max(1, iters)):
        w = m @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, True
        new_est = nw / np.linalg.norm(v)
        v = w / nw
        if abs(new_est - est) <= tol * max(1.0, new_est):
            return float(new_est), True
        est = new_est
    return float(est), False


def central_fd_grad(f, p, h: float) -> np.ndarray:
    """Central-difference gradient of a scalar function at p.

    Entry i is (f(p + h e_i) - f(p - h e_i)) / (2h); exact for polynomials
    of degree <= 2 up to floating rounding.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    p = as_vector(p, "p")
    grad = np.empty_like(p)
    for i in range(p.size):
        bumped = p.copy()
        bumped[i] = p[i] + h
        up = float(f(bumped))
        bumped[i] = p[i] - h
        down = float(f(bumped))
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"function evaluation non-finite at coordinate {i}")
        grad[i] = (up - down) / (2.0 * h)
    return grad
