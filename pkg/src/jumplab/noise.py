"""Finite-activity Poisson jump noise: mark spaces, couplings, streams.

The driving measure is a Poisson random measure on time x marks whose
intensity is Lebesgue tensor a *finite discrete* mark measure.  The
compensated integral splits into instantaneous jumps ``u += G(u-, z)``
and a deterministic drift ``-sum_i m_i G(u, z_i)`` between jumps; both
pieces live here.

Every sampling function takes an explicit numpy Generator.  Ensembles
derive one substream per trajectory index through ``substream`` —
counter-based (Philox) and splittable (SeedSequence spawn keys), so
members are independent and reproducible regardless of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .spaces import GridSpace


def substream(base_seed: int, index: int) -> np.random.Generator:
    """Independent reproducible substream for trajectory `index`."""
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(index,))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class MarkSpace:
    """Finite discrete mark space: ids with strictly positive masses."""

    ids: tuple
    masses: np.ndarray

    def __post_init__(self):
        masses = np.asarray(self.masses, dtype=float)
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "ids", tuple(self.ids))
        if len(self.ids) != masses.shape[0]:
            raise ValueError("ids and masses must have equal length")
        if masses.size and not np.all(masses > 0):
            raise ValueError("mark masses must be strictly positive")
        if not np.all(np.isfinite(masses)):
            raise ValueError("mark masses must be finite")

    @classmethod
    def of(cls, pairs: Sequence[tuple]) -> "MarkSpace":
        ids = tuple(p[0] for p in pairs)
        masses = np.array([p[1] for p in pairs], dtype=float)
        return cls(ids=ids, masses=masses)

    @classmethod
    def empty(cls) -> "MarkSpace":
        return cls(ids=(), masses=np.zeros(0))

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.masses))


class CouplingKind(str, Enum):
    ADDITIVE = "additive"
    MULT_SCALAR = "mult_scalar"
    MULT_LIPSCHITZ = "mult_lipschitz"


@dataclass(frozen=True)
class JumpCoupling:
    """State-to-jump map G(x, z) for each mark z.

    ADDITIVE: G(x, z_i) = g_i (fixed vectors).
    MULT_SCALAR: G(x, z_i) = sigma_i * x.
    MULT_LIPSCHITZ: G(x, z_i) = sigma_i * phi(x), phi vectorized over the
    leading axes with a declared Lipschitz constant.
    """

    kind: CouplingKind
    vectors: Optional[np.ndarray] = None        # (K, n) for ADDITIVE
    sigmas: Optional[np.ndarray] = None         # (K,) for MULT kinds
    phi: Optional[Callable[[np.ndarray], np.ndarray]] = None
    lipschitz_const: float = 1.0

    @classmethod
    def additive(cls, vectors) -> "JumpCoupling":
        return cls(kind=CouplingKind.ADDITIVE,
                   vectors=np.atleast_2d(np.asarray(vectors, dtype=float)))

    @classmethod
    def mult_scalar(cls, sigmas) -> "JumpCoupling":
        return cls(kind=CouplingKind.MULT_SCALAR,
                   sigmas=np.atleast_1d(np.asarray(sigmas, dtype=float)))

    @classmethod
    def mult_lipschitz(cls, sigmas, phi, lipschitz_const) -> "JumpCoupling":
        return cls(kind=CouplingKind.MULT_LIPSCHITZ,
                   sigmas=np.atleast_1d(np.asarray(sigmas, dtype=float)),
                   phi=phi, lipschitz_const=float(lipschitz_const))

    @classmethod
    def none(cls, n: int) -> "JumpCoupling":
        return cls(kind=CouplingKind.ADDITIVE, vectors=np.zeros((0, n)))

    def n_marks_expected(self) -> Optional[int]:
        if self.kind is CouplingKind.ADDITIVE:
            return self.vectors.shape[0]
        return self.sigmas.shape[0]

    def jump(self, x: np.ndarray, mark_index: int) -> np.ndarray:
        """Increment G(x, z_i); x may carry leading batch axes."""
        x = np.asarray(x, dtype=float)
        if self.kind is CouplingKind.ADDITIVE:
            g = self.vectors[mark_index]
            return np.broadcast_to(g, x.shape).copy()
        if self.kind is CouplingKind.MULT_SCALAR:
            return self.sigmas[mark_index] * x
        return self.sigmas[mark_index] * self.phi(x)

    def all_jumps(self, x: np.ndarray) -> np.ndarray:
        """Stack of increments over marks, shape (K,) + x.shape."""
        x = np.asarray(x, dtype=float)
        if self.kind is CouplingKind.ADDITIVE:
            k = self.vectors.shape[0]
            out = np.empty((k,) + x.shape)
            for i in range(k):
                out[i] = self.vectors[i]
            return out
        if self.kind is CouplingKind.MULT_SCALAR:
            return self.sigmas.reshape((-1,) + (1,) * x.ndim) * x
        return self.sigmas.reshape((-1,) + (1,) * x.ndim) * self.phi(x)


@dataclass(frozen=True)
class NoiseSpec:
    """Mark space plus its coupling — everything the integrator needs."""

    marks: MarkSpace
    coupling: JumpCoupling

    def __post_init__(self):
        expected = self.coupling.n_marks_expected()
        if expected is not None and expected != self.marks.size:
            raise ValueError(
                f"coupling declares {expected} marks, mark space has {self.marks.size}")

    @classmethod
    def silent(cls, n: int) -> "NoiseSpec":
        return cls(marks=MarkSpace.empty(), coupling=JumpCoupling.none(n))


@dataclass(frozen=True)
class JumpStream:
    """One realized event list on (0, T]: sorted times with mark indices."""

    times: np.ndarray
    mark_indices: np.ndarray
    horizon: float

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        m = np.asarray(self.mark_indices, dtype=int)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "mark_indices", m)
        if t.shape != m.shape:
            raise ValueError("times and marks must align")
        if t.size and not np.all(np.diff(t) > 0):
            raise ValueError("event times must be strictly increasing")

    @property
    def count(self) -> int:
        return int(self.times.size)

    def window(self, lo: float, hi: float) -> "JumpStream":
        """Events with lo < t <= hi (jump at the left endpoint excluded)."""
        sel = (self.times > lo) & (self.times <= hi)
        return JumpStream(self.times[sel], self.mark_indices[sel], self.horizon)

    def shifted(self, offset: float) -> "JumpStream":
        return JumpStream(self.times + offset, self.mark_indices, self.horizon)


def sample_stream(ms: MarkSpace, horizon: float,
                  rng: np.random.Generator) -> JumpStream:
    """Poisson stream on (0, horizon]: exponential gaps, categorical marks."""
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    lam = ms.total_mass
    if lam == 0.0:
        return JumpStream(np.zeros(0), np.zeros(0, dtype=int), horizon)
    times = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / lam)
        if t > horizon:
            break
        times.append(t)
    times = np.array(times)
    probs = ms.masses / lam
    marks = rng.choice(ms.size, size=times.size, p=probs)
    return JumpStream(times, marks.astype(int), horizon)


def g_norm_sq(space: GridSpace, coupling: JumpCoupling, ms: MarkSpace,
              x: np.ndarray) -> np.ndarray:
    """Mark-integrated squared H-size of the jumps: sum_i m_i |G(x,z_i)|_H^2."""
    x = space.check_vector(x)
    total = np.zeros(x.shape[:-1])
    for i in range(ms.size):
        total = total + ms.masses[i] * space.norm_h(coupling.jump(x, i)) ** 2
    return total


def compensator_drift(coupling: JumpCoupling, ms: MarkSpace,
                      x: np.ndarray) -> np.ndarray:
    """Mean jump rate sum_i m_i G(x, z_i), subtracted between jumps."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for i in range(ms.size):
        out += ms.masses[i] * coupling.jump(x, i)
    return out
