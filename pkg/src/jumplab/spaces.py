"""Discretized evolution triple on a uniform interval grid.

A :class:`GridSpace` realizes the nested-space setup V inside H inside V'
at desk scale: interior nodal values on (0, 1) with zero Dirichlet
boundary.  Two grid configurations are supported —

* ``SOBOLEV``: H is the weighted l2 norm of nodal values, V the p-norm of
  forward differences (a discrete first-order Sobolev norm);
* ``NEGATIVE``: H is the inverse-Laplacian weighted norm, V the plain
  grid p-norm (the setting for saturation-type diffusions);

plus a ``EUCLIDEAN`` mode for small explicit systems (no grid, weight 1),
used by custom finite-dimensional drifts.

All vector arguments are plain numpy arrays with the node axis last, so
every operation here is batched: shapes (n,), (m, n), (a, b, n)
all work.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ._tridiag import solve_tridiag


class Mode(str, Enum):
    SOBOLEV = "sobolev"
    NEGATIVE = "negative"
    EUCLIDEAN = "euclidean"


class DimensionMismatchError(ValueError):
    """Vector length does not match the space it is used with."""


class UnsupportedModeError(ValueError):
    """Operation not defined for this space mode."""


@dataclass(frozen=True)
class GridSpace:
    """Uniform 1-D Dirichlet grid with its three norms and pairing.

    ``n`` interior nodes, spacing ``h`` (= 1/(n+1) in the grid modes,
    1 in EUCLIDEAN mode), growth exponent ``p`` >= 2.
    """

    n: int
    p: float
    mode: Mode
    h: float = field(default=0.0)

    def __post_init__(self):
        if self.mode not in (Mode.SOBOLEV, Mode.NEGATIVE, Mode.EUCLIDEAN):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.p < 2:
            raise ValueError(f"exponent p must be >= 2, got {self.p}")
        if self.mode is Mode.EUCLIDEAN:
            if self.n < 1:
                raise ValueError("euclidean space needs dimension >= 1")
            object.__setattr__(self, "h", 1.0)
        else:
            if self.n < 2:
                raise ValueError("grid needs at least 2 interior nodes")
            object.__setattr__(self, "h", 1.0 / (self.n + 1))
            assert abs(self.h * (self.n + 1) - 1.0) < 1e-14

    @classmethod
    def interval(cls, n: int, p: float, mode: Mode = Mode.SOBOLEV) -> "GridSpace":
        return cls(n=n, p=float(p), mode=mode)

    @classmethod
    def euclidean(cls, dim: int, p: float = 2.0) -> "GridSpace":
        return cls(n=dim, p=float(p), mode=Mode.EUCLIDEAN)

    # -- validation -------------------------------------------------------

    def check_vector(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != self.n:
            raise DimensionMismatchError(
                f"vector of length {v.shape[-1]} on space of dimension {self.n}")
        if not np.all(np.isfinite(v)):
            raise ValueError("vector has non-finite entries")
        return v

    # -- Laplacian machinery ----------------------------------------------

    def _require_grid(self):
        if self.mode is Mode.EUCLIDEAN:
            raise UnsupportedModeError("no grid Laplacian in euclidean mode")

    def neg_laplacian(self, v: np.ndarray) -> np.ndarray:
        """Apply the three-point Dirichlet stencil -(v_{i+1}-2v_i+v_{i-1})/h^2."""
        self._require_grid()
        v = self.check_vector(v)
        out = 2.0 * v
        out[..., :-1] -= v[..., 1:]
        out[..., 1:] -= v[..., :-1]
        return out / self.h**2

    def _dirichlet_bands(self, scale: float, shift: float):
        # bands of shift*I + scale*(-Laplacian)
        diag = np.full(self.n, shift + 2.0 * scale / self.h**2)
        off = np.full(self.n, -scale / self.h**2)
        return off, diag, off

    def inv_laplacian(self, v: np.ndarray) -> np.ndarray:
        """Solve -Lap w = v with zero Dirichlet data (direct tridiagonal)."""
        self._require_grid()
        v = self.check_vector(v)
        lo, di, up = self._dirichlet_bands(1.0, 0.0)
        flat = v.reshape(-1, self.n)
        w = solve_tridiag(lo, di, up, flat.T).T
        return w.reshape(v.shape)

    def resolvent(self, eps: float, f: np.ndarray) -> np.ndarray:
        """Solve u - eps*Lap u = f; contracts every grid l_p norm (N = 1)."""
        if eps <= 0:
            raise ValueError(f"resolvent needs eps > 0, got {eps}")
        self._require_grid()
        f = self.check_vector(f)
        lo, di, up = self._dirichlet_bands(eps, 1.0)
        flat = f.reshape(-1, self.n)
        u = solve_tridiag(lo, di, up, flat.T).T
        return u.reshape(f.shape)

    def eigenvalue(self, k: int) -> float:
        """k-th eigenvalue of the discrete Dirichlet -Laplacian (k >= 1)."""
        self._require_grid()
        return (2.0 / self.h**2) * (1.0 - np.cos(k * np.pi * self.h))

    def eigenvector(self, k: int) -> np.ndarray:
        self._require_grid()
        i = np.arange(1, self.n + 1)
        return np.sin(k * np.pi * i * self.h)

    # -- norms and pairings -------------------------------------------------

    def norm_h(self, v: np.ndarray) -> np.ndarray:
        v = self.check_vector(v)
        if self.mode is Mode.NEGATIVE:
            w = self.inv_laplacian(v)
            q = self.h * np.sum(w * v, axis=-1)
            return np.sqrt(np.maximum(q, 0.0))
        return np.sqrt(self.h * np.sum(v * v, axis=-1))

    def norm_v(self, v: np.ndarray) -> np.ndarray:
        v = self.check_vector(v)
        if self.mode is Mode.SOBOLEV:
            z = np.zeros(v.shape[:-1] + (1,))
            ext = np.concatenate([z, v, z], axis=-1)
            d = np.abs(np.diff(ext, axis=-1) / self.h)
        else:
            d = np.abs(v)
        return (self.h * np.sum(d**self.p, axis=-1)) ** (1.0 / self.p)

    def dual_pairing(self, f: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Weighted coefficient pairing h*sum(f_i v_i) (the pivot pairing)."""
        f = self.check_vector(f)
        v = self.check_vector(v)
        return self.h * np.sum(f * v, axis=-1)

    def inner_h(self, f: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Inner product of H.

        Coincides with :meth:`dual_pairing` except in NEGATIVE mode, where
        the pivot is the inverse Laplacian: <f, v> = h * (invLap f) . v.
        """
        if self.mode is Mode.NEGATIVE:
            f = self.check_vector(f)
            v = self.check_vector(v)
            return self.h * np.sum(self.inv_laplacian(f) * v, axis=-1)
        return self.dual_pairing(f, v)

    # -- estimated constants ------------------------------------------------

    def _probe_directions(self, trials: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        dirs = [rng.standard_normal((trials, self.n))]
        dirs.append(np.eye(self.n))
        if self.mode is not Mode.EUCLIDEAN:
            ks = range(1, min(self.n, 8) + 1)
            dirs.append(np.stack([self.eigenvector(k) for k in ks]))
        return np.concatenate(dirs, axis=0)

    def embedding_constant(self, trials: int = 1000, seed: int = 0) -> float:
        """Sampled constant c with |v|_H <= c |v|_V (max of ratios).

        Exact for p = 2 in SOBOLEV mode (the first eigenvector is included
        in the probe set) and in EUCLIDEAN mode.  Not available in
        NEGATIVE mode.
        """
        if self.mode is Mode.NEGATIVE:
            raise UnsupportedModeError(
                "embedding constant is not provided in negative mode")
        if self.mode is Mode.EUCLIDEAN and self.p == 2.0:
            return 1.0
        dirs = self._probe_directions(trials, seed)
        nh = self.norm_h(dirs)
        nv = self.norm_v(dirs)
        mask = nv > 0
        return float(np.max(nh[mask] / nv[mask]))

    def dual_norm(self, f: np.ndarray, trials: int = 256, seed: int = 0) -> float:
        """Estimate from below of the V' norm: max pairing(f, v)/|v|_V."""
        f = self.check_vector(f)
        if f.ndim != 1:
            raise DimensionMismatchError("dual_norm takes a single vector")
        dirs = self._probe_directions(trials, seed)
        num = np.abs(self.dual_pairing(np.broadcast_to(f, dirs.shape), dirs))
        den = self.norm_v(dirs)
        mask = den > 0
        return float(np.max(num[mask] / den[mask]))
