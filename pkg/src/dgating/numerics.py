"""Dense linear algebra helpers and a seeded Gaussian sampler.

Vectors and matrices are plain float64 numpy arrays. The helpers here only add
the shape checks the rest of the package relies on.
"""

import math

import numpy as np

__all__ = [
    "ContractError",
    "DivergenceError",
    "Rng",
    "as_vector",
    "as_matrix",
    "dot",
    "matvec",
    "spectral_norm_sq",
    "gauss",
]


class ContractError(ValueError):
    """Raised when an argument violates a documented precondition."""


class DivergenceError(RuntimeError):
    """Raised when an optimizer produces a non-finite loss or state."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite value encountered at step {step}")


def as_vector(a, name="vector"):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


def as_matrix(a, name="matrix"):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be two-dimensional, got shape {arr.shape}")
    return arr


def dot(a, b):
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ContractError(f"length mismatch: {a.size} vs {b.size}")
    return float(a @ b)


def matvec(M, v):
    M = as_matrix(M, "M")
    v = as_vector(v, "v")
    if M.shape[1] != v.size:
        raise ContractError(f"cannot multiply {M.shape} matrix by length-{v.size} vector")
    return M @ v


class Rng:
    """Seeded generator producing uniforms and Box-Muller normals.

    Uniform draws come from PCG64, whose output stream is fixed by the seed
    independently of platform. Normals are built from pairs of uniforms with
    the Box-Muller transform so fixtures do not depend on numpy's internal
    normal sampler.

    An instance must not be shared between threads.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self._spare = None

    def uniform(self, size=None):
        """Uniform draws on [0, 1)."""
        return self._gen.random(size)

    def gauss(self):
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self._gen.random()  # (0, 1], keeps log finite
        u2 = self._gen.random()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def normal(self, size, scale=1.0):
        """Array of independent N(0, scale^2) draws, vectorised Box-Muller."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        count = int(np.prod(shape))
        pairs = (count + 1) // 2
        u = self._gen.random((pairs, 2))
        r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.column_stack([r * np.cos(theta), r * np.sin(theta)]).ravel()[:count]
        return scale * z.reshape(shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def spawn(self, index):
        """Independent generator for job ``index`` (seed xor index)."""
        return Rng(self.seed ^ int(index))

    def derive(self, tag):
        """Generator for a named sub-stream, decorrelated from this seed's own stream."""
        state = np.random.SeedSequence([self.seed, int(tag)]).generate_state(2, np.uint32)
        return Rng((int(state[0]) << 32) | int(state[1]))


def gauss(rng):
    """One standard normal variate drawn from ``rng``."""
    return rng.gauss()


def spectral_norm_sq(M, iters=100, seed=None):
    """Power-iteration estimate of the squared largest singular value of ``M``.

    The Rayleigh quotient of ``M.T @ M`` is returned, which never exceeds the
    true value and does not decrease with more iterations.

    Parameters
    ----------
    M : array_like, shape (m, n)
    iters : int
        Number of power iterations, at least 1.
    seed : Rng or int, optional
        Source of the random starting vector.
    """
    M = as_matrix(M, "M")
    if iters < 1:
        raise ContractError("iters must be >= 1")
    rng = seed if isinstance(seed, Rng) else Rng(0 if seed is None else seed)
    v = rng.normal(M.shape[1])
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return 0.0
    v /= norm
    est = 0.0
    for _ in range(iters):
        u = M.T @ (M @ v)
        norm = np.linalg.norm(u)
        if norm == 0.0:
            return 0.0
        v = u / norm
        Mv = M @ v
        est = max(est, float(Mv @ Mv))
    return est
