"""Time integration: backward Euler start, BDF2 afterwards, checkpoints."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .forms import FieldState, Problem
from .ssn import SolverConfig, SSNReport, ssn_solve

CHECKPOINT_VERSION = 1


class ClockError(ValueError):
    """Invalid time-step configuration."""


class NonConvergenceError(RuntimeError):
    """SSN did not converge; ``checkpoint`` points to the state dump, if written."""

    def __init__(self, message: str, report: SSNReport, checkpoint: Path | None = None):
        super().__init__(message)
        self.report = report
        self.checkpoint = checkpoint


@dataclass
class SimulationClock:
    dt: float
    t_end: float
    step_index: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ClockError(f"dt must be > 0, got {self.dt}")
        if not self.t_end >= self.dt * (1 - 1e-12):
            raise ClockError(f"t_end = {self.t_end} must be >= dt = {self.dt}")
        n = round(self.t_end / self.dt)
        if abs(n * self.dt - self.t_end) > 1e-9 * max(1.0, self.t_end):
            raise ClockError(f"dt = {self.dt} does not divide t_end = {self.t_end}")

    @property
    def num_steps(self) -> int:
        return round(self.t_end / self.dt)

    @property
    def scheme(self) -> str:
        return "BE" if self.step_index == 0 else "BDF2"

    @property
    def time(self) -> float:
        return self.step_index * self.dt

    @property
    def finished(self) -> bool:
        return self.step_index >= self.num_steps

    def tick(self):
        self.step_index += 1


def difference_operator(y_np1, y_n, y_nm1) -> np.ndarray:
    """``3 y^{n+1} - 4 y^n + y^{n-1}``."""
    a, b, c = (np.asarray(v, dtype=float) for v in (y_np1, y_n, y_nm1))
    if not a.shape == b.shape == c.shape:
        raise ValueError(f"shape mismatch {a.shape}, {b.shape}, {c.shape}")
    return 3.0 * a - 4.0 * b + c


def advance(problem: Problem, history, clock: SimulationClock, cfg: SolverConfig | None = None,
            t_hint: float | None = None):
    """One time step from ``history`` (most recent state first).

    Uses backward Euler when only one previous state is available and BDF2
    otherwise. The previous state is the initial Newton guess. Returns the
    new state, its SSN report and the rotated two-level history.
    """
    history = list(history)
    if not 1 <= len(history) <= 2:
        raise ValueError("history must hold one or two states")
    scheme = "BE" if len(history) == 1 else "BDF2"
    t_new = (clock.step_index + 1) * clock.dt if t_hint is None else t_hint
    state, report = ssn_solve(problem, history[0].replace(time=t_new), history, clock.dt,
                              scheme, t_new, cfg)
    return state, report, [state, history[0]]


def solve_steady(problem: Problem, initial: FieldState, cfg: SolverConfig | None = None):
    """Stationary solve (no time derivative); returns ``(state, report)``."""
    return ssn_solve(problem, initial, [initial], 1.0, "steady", initial.time, cfg)


def run(problem: Problem, initial: FieldState, clock: SimulationClock,
        cfg: SolverConfig | None = None, on_step: Callable | None = None,
        checkpoint_every: int = 0, checkpoint_dir=None, history=None):
    """Advance until ``clock.t_end``.

    ``on_step(step_index, state, previous, report)`` is called after every
    step. On SSN failure a checkpoint of the last good history is written (if
    ``checkpoint_dir`` is set) and :class:`NonConvergenceError` is raised.
    Returns the list of states, the initial one included.
    """
    history = list(history) if history is not None else [initial]
    states = [initial]
    while not clock.finished:
        state, report, new_history = advance(problem, history, clock, cfg)
        if not report.converged:
            ck = None
            if checkpoint_dir is not None:
                ck = save_checkpoint(Path(checkpoint_dir) / f"checkpoint_fail_{clock.step_index:05d}.npz",
                                     clock, history)
            raise NonConvergenceError(
                f"SSN did not converge at step {clock.step_index + 1} (t = {state.time:g}) after "
                f"{report.iterations} iterations; last residual {report.residual_history[-1][0]:.3e}",
                report, ck)
        clock.tick()
        if on_step is not None:
            on_step(clock.step_index, state, history[0], report)
        history = new_history
        states.append(state)
        if checkpoint_every and checkpoint_dir is not None and clock.step_index % checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"checkpoint_{clock.step_index:05d}.npz",
                            clock, history)
    return states


def save_checkpoint(path, clock: SimulationClock, history) -> Path:
    """Write the clock and up to two history levels as a versioned ``.npz`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {"version": np.array(CHECKPOINT_VERSION),
            "clock": np.array([clock.dt, clock.t_end, float(clock.step_index)]),
            "levels": np.array(len(history))}
    for i, s in enumerate(history):
        for name in ("rho", "u", "p", "z"):
            data[f"{name}_{i}"] = getattr(s, name)
        data[f"time_{i}"] = np.array(s.time)
        data[f"lam_{i}"] = np.array(s.lam)
    with path.open("wb") as fh:
        np.savez(fh, **data)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(clock, history)``."""
    with np.load(Path(path)) as f:
        version = int(f["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        dt, t_end, step = f["clock"]
        history = [FieldState(f[f"rho_{i}"], f[f"u_{i}"], f[f"p_{i}"], f[f"z_{i}"],
                              float(f[f"time_{i}"]), float(f[f"lam_{i}"]))
                   for i in range(int(f["levels"]))]
    clock = SimulationClock(float(dt), float(t_end), int(step))
    return clock, history
