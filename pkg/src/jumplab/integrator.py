"""Jump-adapted implicit Euler integration of the evolution equation.

Between jumps the state follows u' = -A(u) - drift(u) (the drift is the
compensator of the jump measure); the implicit step

    w + dt * (A(w) + drift(w)) = u

is solved per kind: exact tridiagonal solves for linear diffusion,
lagged-coefficient sweeps for divergence-form nonlinearities, tridiagonal
Newton for porous media, dense Newton for small custom systems.  Damping
is adapted per member by residual decrease, and a step that fails to
converge is retried on halved substeps (up to 10 halvings).

Jumps are placed exactly: each uniform cell that contains events is
advanced segment by segment with the increment applied at the event time.
Everything is organized around a batch axis, so an ensemble of
trajectories advances in lockstep through the uniform grid with each
member's own jump stream handled individually; per-member arithmetic is
independent of batch composition, which makes results reproducible
regardless of how members are grouped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._tridiag import solve_tridiag_batch
from .noise import (CouplingKind, JumpStream, NoiseSpec, sample_stream,
                    substream)
from .operators import (MonotoneOperatorSpec, OperatorKind, _apply_impl)
from .spaces import GridSpace


@dataclass(frozen=True)
class SimConfig:
    """Time stepping and provenance knobs for one run."""

    dt_max: float
    T: float
    solver_tol: float = 1e-10
    solver_max_iter: int = 60
    seed: int = 0
    checkpoint_stride: int = 100

    def __post_init__(self):
        if not (0 < self.dt_max <= self.T):
            raise ValueError("need 0 < dt_max <= T")
        if self.solver_tol <= 0:
            raise ValueError("solver_tol must be positive")
        if self.solver_max_iter < 1 or self.checkpoint_stride < 1:
            raise ValueError("iteration and stride counts must be >= 1")


@dataclass
class SolverStats:
    max_iterations: int = 0
    max_residual: float = 0.0
    halvings: int = 0

    def absorb(self, iterations: int, residual: float):
        self.max_iterations = max(self.max_iterations, int(iterations))
        self.max_residual = max(self.max_residual, float(residual))

    def to_dict(self) -> dict:
        return {"max_iterations": self.max_iterations,
                "max_residual": self.max_residual,
                "halvings": self.halvings}


class NonConvergedError(RuntimeError):
    """Implicit solve failed after exhausting damping and halvings."""

    def __init__(self, time: float, dt: float, residual: float,
                 state: np.ndarray):
        super().__init__(
            f"implicit step failed near t={time:.6g} (dt={dt:.3g}, "
            f"residual={residual:.3g})")
        self.time = time
        self.dt = dt
        self.residual = residual
        self.state = np.array(state)


@dataclass
class JumpEventRecord:
    time: float
    mark_index: int
    h_before: float
    h_after: float
    h_increment: float


@dataclass
class TrajectoryRecord:
    """Norm history on the merged grid, sparse checkpoints, jump log."""

    times: np.ndarray
    h_norms: np.ndarray
    v_norms: np.ndarray
    checkpoints: list          # (time, state) pairs
    jumps: list                # JumpEventRecord
    solver_stats: SolverStats

    @property
    def jump_count(self) -> int:
        return len(self.jumps)


# ---------------------------------------------------------------------------
# batched implicit solver


def _drift_true(noise: NoiseSpec, w: np.ndarray) -> np.ndarray:
    from .noise import compensator_drift
    return compensator_drift(noise.coupling, noise.marks, w)


def _drift_matrix_shift(noise: NoiseSpec) -> float:
    """Part of the drift that is exactly linear (goes into the matrix)."""
    if noise.coupling.kind is CouplingKind.MULT_SCALAR and noise.marks.size:
        return float(np.sum(noise.marks.masses * noise.coupling.sigmas))
    return 0.0


def _drift_frozen(noise: NoiseSpec, w: np.ndarray) -> Optional[np.ndarray]:
    """State-dependent drift handled by freezing (None if all linear)."""
    kind = noise.coupling.kind
    if kind is CouplingKind.MULT_SCALAR or noise.marks.size == 0:
        return None
    return _drift_true(noise, w)


def _candidate(op: MonotoneOperatorSpec, noise: NoiseSpec, U: np.ndarray,
               w: np.ndarray, dt: float) -> np.ndarray:
    """One linearized solve of the implicit system around the iterate w."""
    space = op.space
    n = space.n
    m = w.shape[0]
    shift = _drift_matrix_shift(noise)
    frozen = _drift_frozen(noise, w)
    rhs = U if frozen is None else U - dt * frozen

    if op.kind is OperatorKind.LINEAR_DIFFUSION:
        c = np.ones((m, n + 1))
        return _lagged_solve(space, c, rhs, dt, shift)

    if op.kind is OperatorKind.P_LAPLACE:
        from .operators import _forward_diffs
        g = _forward_diffs(space, w)
        tiny = 1e-30
        safe = np.where(np.abs(g) > tiny, g, tiny)
        c = np.asarray(op.flux(g), dtype=float) / safe
        if op.flux_prime is not None:
            small = np.abs(g) <= tiny
            if np.any(small):
                c = np.where(small, np.asarray(op.flux_prime(g), dtype=float), c)
        c = np.maximum(c, 0.0)
        return _lagged_solve(space, c, rhs, dt, shift)

    if op.kind is OperatorKind.POROUS_MEDIA:
        b = _beta_prime(op, w)
        resid = w + dt * (_apply_impl(op, w) + _drift_of(noise, w, shift)) - U
        lower = np.empty((m, n))
        upper = np.empty((m, n))
        lower[:, 0] = 0.0
        upper[:, -1] = 0.0
        lower[:, 1:] = -dt * b[:, :-1] / space.h ** 2
        upper[:, :-1] = -dt * b[:, 1:] / space.h ** 2
        diag = 1.0 + 2.0 * dt * b / space.h ** 2 + dt * shift
        delta = solve_tridiag_batch(lower, diag, upper, resid)
        return w - delta

    # CUSTOM_FD: dense Newton with finite-difference Jacobian
    resid = w + dt * (_apply_impl(op, w) + _drift_of(noise, w, shift)) - U
    J = _fd_jacobian(op, noise, w, dt, shift)
    delta = np.linalg.solve(J, resid[..., None])[..., 0]
    return w - delta


def _drift_of(noise, w, shift):
    frozen = _drift_frozen(noise, w)
    out = shift * w
    if frozen is not None:
        out = out + frozen
    return out


def _beta_prime(op, w):
    if op.beta_prime is not None:
        return np.maximum(np.asarray(op.beta_prime(w), dtype=float), 0.0)
    d = 1e-6 * np.maximum(1.0, np.abs(w))
    num = np.asarray(op.beta(w + d), dtype=float) - np.asarray(op.beta(w - d),
                                                               dtype=float)
    return np.maximum(num / (2 * d), 0.0)


def _fd_jacobian(op, noise, w, dt, shift):
    m, n = w.shape

    def F(x):
        return x + dt * (_apply_impl(op, x) + _drift_of(noise, x, shift))

    base = F(w)
    J = np.empty((m, n, n))
    for j in range(n):
        d = 1e-7 * np.maximum(1.0, np.abs(w[:, j]))
        wp = w.copy()
        wp[:, j] += d
        J[:, :, j] = (F(wp) - base) / d[:, None]
    return J


def _lagged_solve(space, c, rhs, dt, shift):
    h2 = space.h ** 2
    lower = np.empty_like(rhs)
    upper = np.empty_like(rhs)
    lower[:, 0] = 0.0
    upper[:, -1] = 0.0
    lower[:, 1:] = -dt * c[:, 1:-1] / h2
    upper[:, :-1] = -dt * c[:, 1:-1] / h2
    diag = 1.0 + dt * (c[:, :-1] + c[:, 1:]) / h2 + dt * shift
    return solve_tridiag_batch(lower, diag, upper, rhs)


def _residual_norm(op, noise, U, w, dt):
    r = w - U + dt * (_apply_impl(op, w) + _drift_true(noise, w))
    return op.space.norm_h(r)


def implicit_solve_batch(op: MonotoneOperatorSpec, noise: NoiseSpec,
                         U: np.ndarray, dt: float, tol: float,
                         max_iter: int):
    """Solve the implicit system for a batch of states.

    Returns (W, converged, iterations, residuals).  Members are frozen
    once converged and damped individually, so each member's arithmetic
    is identical whatever the rest of the batch does.
    """
    w = U.copy()
    res = _residual_norm(op, noise, U, w, dt)
    converged = res <= tol
    theta = np.ones(U.shape[0])
    iters = np.zeros(U.shape[0], dtype=int)
    for _ in range(max_iter):
        active = ~converged & (theta > 1e-8)
        if not np.any(active):
            break
        cand = _candidate(op, noise, U, w, dt)
        trial = w + theta[:, None] * (cand - w)
        res_trial = _residual_norm(op, noise, U, trial, dt)
        good = np.isfinite(res_trial) & (
            (res_trial <= tol) | (res_trial < res * (1.0 - 1e-4)))
        take = active & good
        w = np.where(take[:, None], trial, w)
        res = np.where(take, res_trial, res)
        theta = np.where(active & good, np.minimum(1.0, theta * 1.5), theta)
        theta = np.where(active & ~good, theta * 0.5, theta)
        iters = iters + active.astype(int)
        converged = res <= tol
    return w, converged, iters, res


def _step_single_with_halving(op, noise, u, t_at, dt, cfg, stats, depth=0):
    W, conv, iters, res = implicit_solve_batch(
        op, noise, u[None, :], dt, cfg.solver_tol, cfg.solver_max_iter)
    stats.absorb(int(iters[0]), float(res[0]) if conv[0] else stats.max_residual)
    if conv[0]:
        return W[0]
    if depth >= 10:
        raise NonConvergedError(t_at, dt, float(res[0]), u)
    stats.halvings += 1
    mid = _step_single_with_halving(op, noise, u, t_at, dt / 2, cfg, stats,
                                    depth + 1)
    return _step_single_with_halving(op, noise, mid, t_at + dt / 2, dt / 2,
                                     cfg, stats, depth + 1)


def _step_batch(op, noise, U, t_at, dt, cfg, stats, fail="raise"):
    """Advance a quiet batch by dt; halve failing members individually.

    Returns (W, failed_indices).  fail="flag" collects failures instead of
    raising.
    """
    W, conv, iters, res = implicit_solve_batch(
        op, noise, U, dt, cfg.solver_tol, cfg.solver_max_iter)
    if np.any(conv):
        stats.absorb(int(np.max(iters[conv])), float(np.max(res[conv])))
    failed = []
    for i in np.flatnonzero(~conv):
        stats.halvings += 1
        try:
            mid = _step_single_with_halving(op, noise, U[i], t_at, dt / 2,
                                            cfg, stats, 1)
            W[i] = _step_single_with_halving(op, noise, mid, t_at + dt / 2,
                                             dt / 2, cfg, stats, 1)
        except NonConvergedError:
            if fail == "raise":
                raise
            failed.append(int(i))
            W[i] = U[i]
    return W, failed


# ---------------------------------------------------------------------------
# cell-by-cell advance with exact jump placement


def _advance_member_cell(op, noise, u, t0, t1, ev_times, ev_marks, cfg, stats,
                         on_jump: Optional[Callable] = None):
    """One member through one cell containing events (times in (t0, t1])."""
    t = t0
    for te, mk in zip(ev_times, ev_marks):
        if te > t:
            u, _ = _step_batch(op, noise, u[None, :], t, te - t, cfg, stats)
            u = u[0]
        pre = u
        inc = noise.coupling.jump(u, int(mk))
        u = u + inc
        if on_jump is not None:
            on_jump(float(te), int(mk), pre, u, inc)
        t = te
    if t1 > t:
        u, _ = _step_batch(op, noise, u[None, :], t, t1 - t, cfg, stats)
        u = u[0]
    return u


def _uniform_grid(t0: float, t1: float, dt_max: float) -> np.ndarray:
    span = t1 - t0
    ncells = max(1, int(np.ceil(span / dt_max - 1e-12)))
    return t0 + span * np.arange(ncells + 1) / ncells


def _index_events(streams: Sequence[JumpStream], grid: np.ndarray):
    """Flatten all member events, sorted by (cell, member, time)."""
    members, times, marks = [], [], []
    for i, s in enumerate(streams):
        members.append(np.full(s.count, i, dtype=int))
        times.append(s.times)
        marks.append(s.mark_indices)
    if not members or sum(len(t) for t in times) == 0:
        empty = np.zeros(0, dtype=int)
        return empty, empty, np.zeros(0), empty, np.zeros(len(grid), dtype=int)
    mem = np.concatenate(members)
    tim = np.concatenate(times)
    mar = np.concatenate(marks)
    cell = np.searchsorted(grid, tim, side="left") - 1
    cell = np.clip(cell, 0, len(grid) - 2)
    order = np.lexsort((tim, mem, cell))
    cell, mem, tim, mar = cell[order], mem[order], tim[order], mar[order]
    starts = np.searchsorted(cell, np.arange(len(grid)))
    return cell, mem, tim, mar, starts


@dataclass
class WindowResult:
    states: np.ndarray
    aborted: list
    stats: SolverStats


def simulate_window(op: MonotoneOperatorSpec, noise: NoiseSpec,
                    x0s: np.ndarray, t0: float, t1: float, cfg: SimConfig,
                    streams: Sequence[JumpStream],
                    collect: Optional[Callable] = None,
                    on_jump: Optional[Callable] = None,
                    fail: str = "raise") -> WindowResult:
    """Advance a batch of members from t0 to t1 in lockstep.

    ``streams[i]`` drives member i (events outside (t0, t1] are ignored).
    ``collect(k, t, states, alive)`` fires at every uniform grid time;
    ``on_jump(member, time, mark, pre, post, inc)`` at every jump.
    """
    states = np.array(x0s, dtype=float, copy=True)
    if states.ndim == 1:
        states = states[None, :]
    m = states.shape[0]
    if len(streams) != m:
        raise ValueError("need one stream per member")
    grid = _uniform_grid(t0, t1, cfg.dt_max)
    windows = [s.window(t0, t1) for s in streams]
    _, ev_mem, ev_tim, ev_mar, starts = _index_events(windows, grid)
    stats = SolverStats()
    alive = np.ones(m, dtype=bool)
    aborted: list = []
    if collect is not None:
        collect(0, grid[0], states, alive)
    for k in range(len(grid) - 1):
        a, b = grid[k], grid[k + 1]
        lo, hi = starts[k], starts[k + 1]
        jumpy_members = np.unique(ev_mem[lo:hi])
        quiet = alive.copy()
        quiet[jumpy_members] = False
        if np.any(quiet):
            W, failed = _step_batch(op, noise, states[quiet], a, b - a, cfg,
                                    stats, fail=fail)
            states[quiet] = W
            if failed:
                idx = np.flatnonzero(quiet)
                for f in failed:
                    aborted.append(int(idx[f]))
                    alive[idx[f]] = False
        for i in jumpy_members:
            if not alive[i]:
                continue
            sel = ev_mem[lo:hi] == i
            hook = None
            if on_jump is not None:
                hook = lambda te, mk, pre, post, inc, _i=int(i): on_jump(
                    _i, te, mk, pre, post, inc)
            try:
                states[i] = _advance_member_cell(
                    op, noise, states[i], a, b, ev_tim[lo:hi][sel],
                    ev_mar[lo:hi][sel], cfg, stats, on_jump=hook)
            except NonConvergedError:
                if fail == "raise":
                    raise
                aborted.append(int(i))
                alive[i] = False
        if collect is not None:
            collect(k + 1, grid[k + 1], states, alive)
    return WindowResult(states=states, aborted=sorted(set(aborted)),
                        stats=stats)


# ---------------------------------------------------------------------------
# public entry points


def implicit_step(op: MonotoneOperatorSpec, noise: Optional[NoiseSpec],
                  u: np.ndarray, dt: float, tol: float = 1e-10,
                  max_iter: int = 60) -> np.ndarray:
    """Single implicit step from u over dt (drift + compensator only)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = op.space.check_vector(u)
    if noise is None:
        noise = NoiseSpec.silent(op.space.n)
    cfg = SimConfig(dt_max=dt, T=dt, solver_tol=tol, solver_max_iter=max_iter)
    stats = SolverStats()
    return _step_single_with_halving(op, noise, u, 0.0, dt, cfg, stats)


def simulate(op: MonotoneOperatorSpec, noise: NoiseSpec, x0: np.ndarray,
             cfg: SimConfig, stream: Optional[JumpStream] = None
             ) -> TrajectoryRecord:
    """One trajectory on [0, T]: merged uniform-plus-jump-time record."""
    space = op.space
    x0 = space.check_vector(np.asarray(x0, dtype=float))
    if stream is None:
        stream = sample_stream(noise.marks, cfg.T, substream(cfg.seed, 0))

    times: list = []
    h_norms: list = []
    v_norms: list = []
    checkpoints: list = []
    jumps: list = []

    def push_row(t, state):
        times.append(float(t))
        h_norms.append(float(space.norm_h(state)))
        v_norms.append(float(space.norm_v(state)))

    def on_jump(_member, te, mk, pre, post, inc):
        jumps.append(JumpEventRecord(
            time=te, mark_index=mk,
            h_before=float(space.norm_h(pre)),
            h_after=float(space.norm_h(post)),
            h_increment=float(space.norm_h(inc))))
        if te < next_grid_time[0]:
            push_row(te, post)

    next_grid_time = [0.0]
    grid = _uniform_grid(0.0, cfg.T, cfg.dt_max)

    def collect(k, t, states, _alive):
        if k + 1 < len(grid):
            next_grid_time[0] = grid[k + 1]
        push_row(t, states[0])
        if k % cfg.checkpoint_stride == 0 or k == len(grid) - 1:
            checkpoints.append((float(t), states[0].copy()))

    # keep next_grid_time ahead of the cell being processed
    next_grid_time[0] = grid[1] if len(grid) > 1 else cfg.T
    result = simulate_window(op, noise, x0, 0.0, cfg.T, cfg, [stream],
                             collect=collect, on_jump=on_jump)
    order = np.argsort(np.asarray(times), kind="stable")
    return TrajectoryRecord(
        times=np.asarray(times)[order],
        h_norms=np.asarray(h_norms)[order],
        v_norms=np.asarray(v_norms)[order],
        checkpoints=checkpoints,
        jumps=jumps,
        solver_stats=result.stats)


def simulate_coupled(op: MonotoneOperatorSpec, noise: NoiseSpec,
                     x0: np.ndarray, y0: np.ndarray, cfg: SimConfig
                     ) -> tuple:
    """Two trajectories driven by the identical jump stream and grid."""
    stream = sample_stream(noise.marks, cfg.T, substream(cfg.seed, 0))
    rec_x = simulate(op, noise, x0, cfg, stream=stream)
    rec_y = simulate(op, noise, y0, cfg, stream=stream)
    return rec_x, rec_y


@dataclass
class EnsembleSummary:
    """Per-time moment statistics plus retained states for measures."""

    times: np.ndarray
    mean_h2: np.ndarray
    var_h2: np.ndarray
    se_h2: np.ndarray
    mean_vp: np.ndarray
    var_vp: np.ndarray
    se_vp: np.ndarray
    checkpoint_times: np.ndarray
    checkpoint_states: np.ndarray       # (C, M, n)
    terminal_states: np.ndarray         # (M, n)
    members: int
    p: float
    aborted: list
    solver_stats: SolverStats
    states_history: Optional[np.ndarray] = None   # (n_times, M, n) if kept


def simulate_ensemble(op: MonotoneOperatorSpec, noise: NoiseSpec,
                      x0, cfg: SimConfig, members: int,
                      record_states: bool = False) -> EnsembleSummary:
    """Independent trajectories in lockstep; substreams indexed by member.

    ``x0`` is a fixed vector shared by all members or a callable
    ``x0(rng) -> state`` sampled per member before its stream is drawn.
    """
    if members < 1:
        raise ValueError("need at least one member")
    space = op.space
    streams = []
    x0s = np.empty((members, space.n))
    for i in range(members):
        rng = substream(cfg.seed, i)
        if callable(x0):
            x0s[i] = space.check_vector(np.asarray(x0(rng), dtype=float))
        else:
            x0s[i] = space.check_vector(np.asarray(x0, dtype=float))
        streams.append(sample_stream(noise.marks, cfg.T, rng))

    grid = _uniform_grid(0.0, cfg.T, cfg.dt_max)
    nt = len(grid)
    mean_h2 = np.zeros(nt)
    var_h2 = np.zeros(nt)
    mean_vp = np.zeros(nt)
    var_vp = np.zeros(nt)
    counts = np.zeros(nt, dtype=int)
    cp_times: list = []
    cp_states: list = []
    history = np.empty((nt, members, space.n)) if record_states else None

    def collect(k, t, states, alive):
        h2 = space.norm_h(states) ** 2
        vp = space.norm_v(states) ** space.p
        sel = alive
        cnt = int(np.sum(sel))
        counts[k] = cnt
        if cnt == 0:
            mean_h2[k] = var_h2[k] = mean_vp[k] = var_vp[k] = np.nan
        else:
            mean_h2[k] = float(np.mean(h2[sel]))
            var_h2[k] = float(np.var(h2[sel], ddof=1)) if cnt > 1 else 0.0
            mean_vp[k] = float(np.mean(vp[sel]))
            var_vp[k] = float(np.var(vp[sel], ddof=1)) if cnt > 1 else 0.0
        if history is not None:
            history[k] = states
        if k % cfg.checkpoint_stride == 0 or k == nt - 1:
            cp_times.append(float(t))
            cp_states.append(states.copy())

    result = simulate_window(op, noise, x0s, 0.0, cfg.T, cfg, streams,
                             collect=collect, fail="flag")
    safe_counts = np.maximum(counts, 1)
    return EnsembleSummary(
        times=grid,
        mean_h2=mean_h2, var_h2=var_h2, se_h2=np.sqrt(var_h2 / safe_counts),
        mean_vp=mean_vp, var_vp=var_vp, se_vp=np.sqrt(var_vp / safe_counts),
        checkpoint_times=np.asarray(cp_times),
        checkpoint_states=np.asarray(cp_states),
        terminal_states=result.states,
        members=members,
        p=space.p,
        aborted=result.aborted,
        solver_stats=result.stats,
        states_history=history)
