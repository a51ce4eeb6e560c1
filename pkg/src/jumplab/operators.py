"""Monotone drift operators, their smooth regularizations, and the
statistical checkers that certify structural conditions on sampled states.

Shipped drift families (all 1-D, acting on the last axis):

* ``LINEAR_DIFFUSION`` — the discrete Dirichlet Laplacian;
* ``P_LAPLACE`` — divergence-form nonlinearity with a scalar monotone
  flux applied to forward differences;
* ``POROUS_MEDIA`` — Laplacian of a monotone scalar function of the
  state, living on the NEGATIVE-mode space;
* ``CUSTOM_FD`` — an explicit user map on a small euclidean space.

The regularization composes three layers exactly as the continuum
construction does: an elliptic resolvent on both sides, with a mollified
Yosida approximation of the flux (divergence form) or a truncated and
mollified nonlinearity (porous media) in between.

Condition checkers draw Gaussian states at several amplitudes, evaluate
the relevant inequality gap, and fit the free constants by nonnegative
least squares.  A report certifies the sampled set only, never a proof.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy.optimize import nnls

from .noise import JumpCoupling, MarkSpace, NoiseSpec
from .spaces import GridSpace, Mode


class OperatorKind(str, Enum):
    LINEAR_DIFFUSION = "linear_diffusion"
    P_LAPLACE = "p_laplace"
    POROUS_MEDIA = "porous_media"
    CUSTOM_FD = "custom_fd"


class OperatorEvaluationError(RuntimeError):
    """Operator produced a non-finite output (misconfigured drift)."""


def power_flux(p: float, scale: float = 1.0):
    """Monotone power flux xi -> scale*|xi|^(p-2)*xi with its derivative."""
    q = p - 2.0

    def a(xi):
        xi = np.asarray(xi, dtype=float)
        return scale * np.abs(xi) ** q * xi

    def a_prime(xi):
        xi = np.asarray(xi, dtype=float)
        return scale * (p - 1.0) * np.abs(xi) ** q

    return a, a_prime


def linear_flux(slope: float = 1.0):
    def a(xi):
        return slope * np.asarray(xi, dtype=float)

    def a_prime(xi):
        xi = np.asarray(xi, dtype=float)
        return np.full_like(xi, slope)

    return a, a_prime


@dataclass(frozen=True)
class MonotoneOperatorSpec:
    """A drift together with the space it acts on.

    ``flux``/``beta``/``custom_map`` must be vectorized over arbitrary
    leading axes.  Optional analytic derivatives speed up the implicit
    solver; finite differences are used otherwise.
    """

    kind: OperatorKind
    space: GridSpace
    flux: Optional[Callable] = None
    flux_prime: Optional[Callable] = None
    beta: Optional[Callable] = None
    beta_prime: Optional[Callable] = None
    custom_map: Optional[Callable] = None

    def __post_init__(self):
        if self.kind is OperatorKind.P_LAPLACE:
            if self.flux is None:
                raise ValueError("p_laplace operator needs a flux")
            self._validate_flux_growth()
        elif self.kind is OperatorKind.POROUS_MEDIA:
            if self.beta is None:
                raise ValueError("porous_media operator needs beta")
            if self.space.mode is not Mode.NEGATIVE:
                raise ValueError("porous_media lives on a NEGATIVE-mode space")
            self._validate_beta()
        elif self.kind is OperatorKind.CUSTOM_FD:
            if self.custom_map is None:
                raise ValueError("custom operator needs a map")
            if self.space.mode is not Mode.EUCLIDEAN:
                raise ValueError("custom operators use a euclidean space")

    def _validate_flux_growth(self):
        # sampled polynomial-growth check |a(xi)| <= K(|xi|^(p-1)+1)
        xi = np.linspace(-50.0, 50.0, 501)
        vals = np.asarray(self.flux(xi), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("flux produced non-finite values on sample grid")
        ratio = np.abs(vals) / (np.abs(xi) ** (self.space.p - 1.0) + 1.0)
        if not np.all(np.isfinite(ratio)):
            raise ValueError("flux growth check failed")

    def _validate_beta(self):
        x = np.linspace(-50.0, 50.0, 501)
        vals = np.asarray(self.beta(x), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("beta produced non-finite values on sample grid")
        if np.any(np.diff(vals) < -1e-12 * np.max(np.abs(vals) + 1.0)):
            raise ValueError("beta must be nondecreasing (sampled check)")
        big = np.abs(x) >= 1.0
        lower = (x[big] * vals[big]) / np.abs(x[big]) ** self.space.p
        if np.min(lower) <= 0:
            raise ValueError("beta fails the sampled coercivity bound")

    # -- factories ---------------------------------------------------------

    @classmethod
    def linear_diffusion(cls, space: GridSpace) -> "MonotoneOperatorSpec":
        return cls(kind=OperatorKind.LINEAR_DIFFUSION, space=space)

    @classmethod
    def p_laplace(cls, space, flux, flux_prime=None) -> "MonotoneOperatorSpec":
        return cls(kind=OperatorKind.P_LAPLACE, space=space,
                   flux=flux, flux_prime=flux_prime)

    @classmethod
    def porous_media(cls, space, beta, beta_prime=None) -> "MonotoneOperatorSpec":
        return cls(kind=OperatorKind.POROUS_MEDIA, space=space,
                   beta=beta, beta_prime=beta_prime)

    @classmethod
    def custom(cls, space, custom_map) -> "MonotoneOperatorSpec":
        return cls(kind=OperatorKind.CUSTOM_FD, space=space,
                   custom_map=custom_map)


@dataclass(frozen=True)
class RegularizationParams:
    """Shared smoothing width plus quadrature/rootfinding knobs."""

    eps: float
    quad_points: int = 33
    newton_tol: float = 1e-12

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.quad_points < 8:
            raise ValueError("quad_points must be at least 8")
        if self.newton_tol <= 0:
            raise ValueError("newton_tol must be positive")


# ---------------------------------------------------------------------------
# application


def _forward_diffs(space: GridSpace, u: np.ndarray) -> np.ndarray:
    z = np.zeros(u.shape[:-1] + (1,))
    ext = np.concatenate([z, u, z], axis=-1)
    return np.diff(ext, axis=-1) / space.h


def _neg_divergence(space: GridSpace, flux_vals: np.ndarray) -> np.ndarray:
    return -(flux_vals[..., 1:] - flux_vals[..., :-1]) / space.h


def _apply_impl(op: MonotoneOperatorSpec, u: np.ndarray) -> np.ndarray:
    if op.kind is OperatorKind.LINEAR_DIFFUSION:
        return op.space.neg_laplacian(u)
    if op.kind is OperatorKind.P_LAPLACE:
        return _neg_divergence(op.space, op.flux(_forward_diffs(op.space, u)))
    if op.kind is OperatorKind.POROUS_MEDIA:
        return op.space.neg_laplacian(np.asarray(op.beta(u), dtype=float))
    out = np.asarray(op.custom_map(u), dtype=float)
    if out.shape != u.shape:
        raise OperatorEvaluationError("custom map changed the shape")
    return out


def apply(op: MonotoneOperatorSpec, u: np.ndarray) -> np.ndarray:
    """Evaluate the drift; u may carry leading batch axes."""
    u = op.space.check_vector(u)
    out = _apply_impl(op, u)
    if not np.all(np.isfinite(out)):
        raise OperatorEvaluationError("drift evaluation produced non-finite values")
    return out


def pairing_with_self(op: MonotoneOperatorSpec, u: np.ndarray) -> np.ndarray:
    """The energy pairing <Au, u> in the operator's own H geometry."""
    u = op.space.check_vector(u)
    val = op.space.inner_h(apply(op, u), u)
    if op.kind is OperatorKind.P_LAPLACE:
        g = _forward_diffs(op.space, u)
        direct = op.space.h * np.sum(op.flux(g) * g, axis=-1)
        scale = np.maximum(1.0, np.abs(direct))
        assert np.all(np.abs(val - direct) <= 1e-10 * scale), \
            "summation-by-parts identity violated"
    return val


# ---------------------------------------------------------------------------
# regularization layers


def yosida_flux(a: Callable, eps: float, xi, tol: float = 1e-12,
                max_iter: int = 200):
    """Resolvent-based smoothing of a monotone scalar map.

    Solves y + eps*a(y) = xi by safeguarded Newton (bisection fallback on
    a guaranteed bracket) and returns (xi - y)/eps.  Vectorized over xi.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    xi_arr = np.asarray(xi, dtype=float)
    scalar = xi_arr.ndim == 0
    x = np.atleast_1d(xi_arr).astype(float)
    ax = np.asarray(a(x), dtype=float)
    lo = np.minimum(x, x - eps * ax)
    hi = np.maximum(x, x - eps * ax)
    y = 0.5 * (lo + hi)

    def F(yv):
        return yv + eps * np.asarray(a(yv), dtype=float) - x

    fy = F(y)
    scale = np.maximum(1.0, np.abs(x))
    active = np.abs(fy) > tol * scale
    for _ in range(max_iter):
        if not np.any(active):
            break
        # shrink bracket using current sign
        pos = fy > 0
        hi = np.where(active & pos, y, hi)
        lo = np.where(active & ~pos, y, lo)
        # numeric derivative of F
        delta = 1e-7 * np.maximum(1.0, np.abs(y))
        deriv = 1.0 + eps * (np.asarray(a(y + delta), dtype=float)
                             - np.asarray(a(y - delta), dtype=float)) / (2 * delta)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = y - fy / deriv
        bad = (~np.isfinite(newton)) | (newton <= lo) | (newton >= hi) | (deriv <= 0)
        candidate = np.where(bad, 0.5 * (lo + hi), newton)
        y = np.where(active, candidate, y)
        fy = np.where(active, F(y), fy)
        active = np.abs(fy) > tol * scale
    if np.any(active):
        raise RuntimeError("resolvent root-finding failed; flux is likely "
                           "non-monotone or ill-behaved")
    out = (x - y) / eps
    return float(out[()]) if scalar else out.reshape(xi_arr.shape)


_BUMP_NORM_CACHE: dict = {}


def _bump(t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
    return out


@dataclass(frozen=True)
class MollifiedFunction:
    """Midpoint-quadrature convolution of a scalar map with a bump kernel."""

    base: Callable
    eps: float
    nodes: np.ndarray
    weights: np.ndarray

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        shifted = x[..., None] - self.nodes
        vals = np.asarray(self.base(shifted), dtype=float)
        return vals @ self.weights


def mollify(f: Callable, eps: float, quad_points: int = 33) -> MollifiedFunction:
    """Smooth f by convolution with the standard bump of width eps.

    Nodes are symmetric midpoints on (-eps, eps); weights are the bump
    values normalized to sum to one, so affine maps are reproduced up to
    quadrature roundoff.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if quad_points < 8:
        raise ValueError("need at least 8 quadrature points")
    q = quad_points
    half = (np.arange(q // 2) + 0.5) * (2.0 / q)  # positive midpoints in (0,1)
    right = half[half < 1.0]
    if q % 2 == 1:
        scaled = np.concatenate([-right[::-1], [0.0], right])
    else:
        scaled = np.concatenate([-right[::-1], right])
    w = _bump(scaled)
    w = w / np.sum(w)
    return MollifiedFunction(base=f, eps=eps, nodes=scaled * eps, weights=w)


def truncated(beta: Callable, eps: float) -> Callable:
    """Clip a monotone map at +-1/eps (applied before mollification)."""
    cap = 1.0 / eps

    def b(x):
        return np.clip(np.asarray(beta(x), dtype=float), -cap, cap)

    return b


def regularized_scalar_map(op: MonotoneOperatorSpec,
                           reg: RegularizationParams) -> MollifiedFunction:
    """The smoothed pointwise nonlinearity used inside apply_regularized."""
    if op.kind is OperatorKind.P_LAPLACE:
        base = lambda xi: yosida_flux(op.flux, reg.eps, xi, tol=reg.newton_tol)
    elif op.kind is OperatorKind.POROUS_MEDIA:
        base = truncated(op.beta, reg.eps)
    else:
        raise ValueError("regularization is defined for p_laplace and "
                         "porous_media operators only")
    return mollify(base, reg.eps, reg.quad_points)


def apply_regularized(op: MonotoneOperatorSpec, reg: RegularizationParams,
                      u: np.ndarray) -> np.ndarray:
    """Smoothed drift: resolvent, smoothed nonlinearity, resolvent.

    Divergence form: R_eps( -div( a_eps( grad( R_eps u )))).
    Porous media:    -Lap( R_eps( beta_eps( R_eps u ))).
    """
    u = op.space.check_vector(u)
    smooth = regularized_scalar_map(op, reg)
    v = op.space.resolvent(reg.eps, u)
    if op.kind is OperatorKind.P_LAPLACE:
        w = _neg_divergence(op.space, smooth(_forward_diffs(op.space, v)))
        return op.space.resolvent(reg.eps, w)
    w = op.space.resolvent(reg.eps, smooth(v))
    return op.space.neg_laplacian(w)


def regularization_error(op: MonotoneOperatorSpec, reg: RegularizationParams,
                         u: np.ndarray, trials: int = 256,
                         seed: int = 0) -> float:
    """Estimated dual-norm distance between the smoothed and raw drift."""
    diff = apply_regularized(op, reg, u) - apply(op, u)
    return op.space.dual_norm(diff, trials=trials, seed=seed)


# ---------------------------------------------------------------------------
# condition checkers


class Condition(str, Enum):
    MONOTONE = "monotone"
    COERCIVE = "coercive"
    GROWTH = "growth"
    JUMP_GROWTH = "jump_growth"
    STRICT_DISSIPATIVE = "strict_dissipative"
    SUPERLINEAR = "superlinear"


@dataclass
class ConditionReport:
    """Certificate over a sampled state set (not a proof)."""

    condition: Condition
    samples: int
    min_gap: float
    fitted_constants: dict
    passed: bool
    tolerance: float
    scale: float
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "condition": self.condition.value,
            "samples": self.samples,
            "min_gap": self.min_gap,
            "fitted_constants": dict(self.fitted_constants),
            "pass": bool(self.passed),
            "tolerance": self.tolerance,
            "scale": self.scale,
            "failures": list(self.failures),
        }


def _g_diff_norm_sq(space, coupling, ms, x, y):
    total = np.zeros(x.shape[:-1])
    for i in range(ms.size):
        d = coupling.jump(x, i) - coupling.jump(y, i)
        total = total + ms.masses[i] * space.norm_h(d) ** 2
    return total


def _g_norm_sq(space, coupling, ms, x):
    from .noise import g_norm_sq
    return g_norm_sq(space, coupling, ms, x)


def _sample_states(space, samples, rng):
    amps = np.array([0.1, 1.0, 10.0])
    x = rng.standard_normal((samples, space.n))
    return x * amps[np.arange(samples) % 3, None]


def _dual_norm_batch(space, F, trials, seed):
    dirs = space._probe_directions(trials, seed)
    nv = space.norm_v(dirs)
    keep = nv > 0
    dirs, nv = dirs[keep], nv[keep]
    num = np.abs(space.h * F @ dirs.T)
    return np.max(num / nv, axis=-1)


REL_TOL = 1e-9


def check_condition(op: MonotoneOperatorSpec, noise: Optional[NoiseSpec],
                    which: Condition, samples: int = 1000,
                    seed: int = 0) -> ConditionReport:
    """Evaluate one structural inequality on sampled Gaussian states.

    States are drawn at amplitudes {0.1, 1, 10} to exercise both the
    superlinear and the affine parts of the bounds.  Deterministic given
    the seed.  Non-finite evaluations are recorded as failures together
    with the offending sample index.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    space = op.space
    if space.p < 2:
        raise ValueError("conditions are formulated for p >= 2")
    if noise is None:
        noise = NoiseSpec.silent(space.n)
    coupling, ms = noise.coupling, noise.marks
    rng = np.random.default_rng(seed)
    X = _sample_states(space, samples, rng)
    Y = _sample_states(space, samples, rng)

    def finish(min_gap, fitted, passed, scale, values):
        bad = [int(i) for i in np.flatnonzero(~np.isfinite(values))]
        if bad:
            passed = False
        return ConditionReport(
            condition=which, samples=samples, min_gap=float(min_gap),
            fitted_constants={k: float(v) for k, v in fitted.items()},
            passed=bool(passed), tolerance=REL_TOL * scale, scale=float(scale),
            failures=bad)

    if which in (Condition.MONOTONE, Condition.STRICT_DISSIPATIVE,
                 Condition.SUPERLINEAR):
        pair_term = 2.0 * space.inner_h(_apply_impl(op, X) - _apply_impl(op, Y),
                                        X - Y)
        noise_term = _g_diff_norm_sq(space, coupling, ms, X, Y)
        gap = pair_term - noise_term
        finite = np.isfinite(gap)
        scale = max(1.0, float(np.max(np.abs(pair_term[finite]), initial=0.0)),
                    float(np.max(noise_term[finite], initial=0.0)))
        if which is Condition.MONOTONE:
            mg = np.min(gap[finite], initial=np.inf)
            return finish(mg, {}, mg >= -REL_TOL * scale, scale, gap)
        d2 = space.norm_h(X - Y) ** 2
        ok = finite & (d2 > 1e-14 * scale)
        if not np.any(ok):
            return finish(np.nan, {}, False, scale, gap)
        if which is Condition.STRICT_DISSIPATIVE:
            alpha = float(np.min(gap[ok] / d2[ok]))
            passed = alpha > 0 and np.min(gap[ok]) >= -REL_TOL * scale
            return finish(np.min(gap[ok]), {"alpha": alpha}, passed, scale, gap)
        positive = ok & (gap > 0)
        if not np.all(gap[ok] > 0):
            return finish(np.min(gap[ok]), {"eta": 0.0, "delta": 0.0},
                          False, scale, gap)
        dh = np.sqrt(d2[positive])
        slope, _ = np.polyfit(np.log(dh), np.log(gap[positive]), 1)
        delta = float(slope - 2.0)
        eta = float(np.min(gap[positive] / dh ** (2.0 + delta)))
        passed = delta > 1e-6 and eta > 0
        return finish(np.min(gap[ok]), {"eta": eta, "delta": delta},
                      passed, scale, gap)

    if which is Condition.COERCIVE:
        L = 2.0 * space.inner_h(_apply_impl(op, X), X) - _g_norm_sq(
            space, coupling, ms, X)
        P = space.norm_v(X) ** space.p
        H2 = space.norm_h(X) ** 2
        finite = np.isfinite(L)
        design = np.column_stack([P[finite], -H2[finite],
                                  -np.ones(int(np.sum(finite)))])
        theta, _ = nnls(design, L[finite])
        a1, a0, c0 = theta
        gap = L - a1 * P + a0 * H2 + c0
        scale = max(1.0, float(np.max(np.abs(L[finite]), initial=0.0)),
                    float(np.max(a1 * P)))
        mg = float(np.min(gap[finite], initial=np.inf))
        passed = a1 > 0 and mg >= -REL_TOL * scale
        return finish(mg, {"alpha1": a1, "alpha0": a0, "C0": c0},
                      passed, scale, gap)

    if which is Condition.GROWTH:
        dual = _dual_norm_batch(space, _apply_impl(op, X), trials=128,
                                seed=seed + 1)
        vp = space.norm_v(X) ** (space.p - 1.0)
        ratio = dual / (vp + 1.0)
        n_const = float(np.max(ratio))
        gap = n_const * (vp + 1.0) - dual
        scale = max(1.0, float(np.max(dual)))
        passed = bool(np.all(np.isfinite(ratio)))
        return finish(np.min(gap), {"C1": n_const, "C2": n_const},
                      passed, scale, ratio)

    if which is Condition.JUMP_GROWTH:
        b = _g_norm_sq(space, coupling, ms, X)
        P = space.norm_v(X) ** space.p
        H2 = space.norm_h(X) ** 2
        Vn = space.norm_v(X)
        design = np.column_stack([2.0 * P, H2, 2.0 * Vn, np.ones_like(P)])
        theta, _ = nnls(design, b)
        rhs = design @ theta
        gap = rhs - b
        scale = max(1.0, float(np.max(b, initial=0.0)), float(np.max(rhs)))
        passed = np.min(gap) >= -REL_TOL * scale
        fitted = {"C1": theta[0], "alpha0": theta[1],
                  "C2": theta[2], "C0": theta[3]}
        return finish(np.min(gap), fitted, passed, scale, gap)

    raise ValueError(f"unknown condition {which!r}")


def fit_h_dissipativity(op: MonotoneOperatorSpec, noise: Optional[NoiseSpec],
                        alpha: float, samples: int = 400,
                        seed: int = 0) -> tuple:
    """Fit (eta, delta_eta) with 2<Ax,x> - |G(x,.)|^2 >= eta|x|_H^2 - delta_eta.

    eta is capped strictly below the strict-dissipativity rate alpha.
    """
    space = op.space
    if noise is None:
        noise = NoiseSpec.silent(space.n)
    rng = np.random.default_rng(seed)
    X = _sample_states(space, samples, rng)
    L = 2.0 * space.inner_h(apply(op, X), X) - _g_norm_sq(
        space, noise.coupling, noise.marks, X)
    H2 = space.norm_h(X) ** 2
    design = np.column_stack([H2, -np.ones_like(H2)])
    theta, _ = nnls(design, L)
    eta = min(float(theta[0]), 0.95 * alpha)
    if eta <= 0:
        eta = 0.5 * alpha
    delta = float(max(0.0, np.max(eta * H2 - L)))
    return eta, delta
