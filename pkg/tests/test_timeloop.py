import numpy as np
import pytest

from bingham_dg.cases import build_case, default_case
from bingham_dg.forms import Discretization, FieldState, Problem
from bingham_dg.huber import PhysParams
from bingham_dg.mesh import generate_structured_mesh
from bingham_dg.ssn import SolverConfig
from bingham_dg.timeloop import (ClockError, NonConvergenceError, SimulationClock, advance,
                                 difference_operator, load_checkpoint, run, save_checkpoint)


def test_difference_operator_examples():
    np.testing.assert_array_equal(difference_operator([2.0, -1.0], [2.0, -1.0], [2.0, -1.0]), 0.0)
    n = 7.0
    assert difference_operator(n + 1, n, n - 1) == 2.0
    dt, m = 0.1, 5
    y = lambda k: (k * dt) ** 2  # noqa: E731
    assert abs(difference_operator(y(m + 1), y(m), y(m - 1)) / (2 * dt) - 2 * (m + 1) * dt) < 1e-14
    with pytest.raises(ValueError):
        difference_operator([1.0, 2.0], [1.0], [1.0])


def test_clock():
    c = SimulationClock(0.1, 0.5)
    assert c.num_steps == 5 and c.scheme == "BE" and c.time == 0.0
    c.tick()
    assert c.scheme == "BDF2" and abs(c.time - 0.1) < 1e-15
    while not c.finished:
        c.tick()
    assert c.step_index == 5
    for dt, t_end in ((0.0, 1.0), (-0.1, 1.0), (0.2, 0.1), (0.3, 1.0)):
        with pytest.raises(ClockError):
            SimulationClock(dt, t_end)


def _rest_problem(tau_s=0.0):
    disc = Discretization(generate_structured_mesh(4, 4))
    prob = Problem(disc, PhysParams(eta=0.01, tau_s=tau_s))
    s0 = FieldState(np.ones(disc.nc), np.zeros(disc.nu), np.zeros(disc.nc), np.zeros(4 * disc.nc))
    return prob, s0


@pytest.mark.parametrize("tau_s", [0.0, 1.0])
def test_rest_state_stays_at_rest(tau_s):
    prob, s0 = _rest_problem(tau_s)
    states = run(prob, s0, SimulationClock(0.1, 0.3))
    assert len(states) == 4
    for s in states[1:]:
        assert np.max(np.abs(s.u)) == 0 and np.max(np.abs(s.p)) == 0
        np.testing.assert_array_equal(s.rho, s0.rho)


def test_constant_density_preserved():
    setup = build_case(default_case("cavity", nx=8, ny=8, tau_s=2.5, t_end=0.3))
    states = run(setup.problem, setup.initial, SimulationClock(0.1, 0.3))
    for s in states:
        assert np.max(np.abs(s.rho - 1.0)) <= 1e-10


def test_advance_rotates_history():
    setup = build_case(default_case("cavity", nx=4, ny=4, tau_s=0.0))
    clock = SimulationClock(0.1, 0.2)
    s1, rep, hist = advance(setup.problem, [setup.initial], clock)
    assert rep.converged and hist[0] is s1 and hist[1] is setup.initial
    assert abs(s1.time - 0.1) < 1e-15
    clock.tick()
    s2, rep, hist2 = advance(setup.problem, hist, clock)
    assert hist2[0] is s2 and hist2[1] is s1
    # earlier levels are untouched and read-only
    assert np.all(setup.initial.u == 0)
    with pytest.raises(ValueError):
        s1.u[0] = 0.0
    with pytest.raises(ValueError):
        advance(setup.problem, [], clock)


def test_bdf2_is_second_order():
    disc = Discretization(generate_structured_mesh(4, 4))
    force = lambda x, t: t * np.column_stack([np.sin(np.pi * x[:, 1]), np.cos(np.pi * x[:, 0])])  # noqa: E731
    prob = Problem(disc, PhysParams(eta=0.1), body_force=force, convection=False)
    s0 = FieldState(np.ones(disc.nc), np.zeros(disc.nu), np.zeros(disc.nc), np.zeros(4 * disc.nc))

    def final(dt, t_end=0.4):
        return run(prob, s0, SimulationClock(dt, t_end), SolverConfig(tol=1e-12))[-1].u

    ref = final(0.4 / 256)
    e1 = np.linalg.norm(final(0.05) - ref)
    e2 = np.linalg.norm(final(0.025) - ref)
    assert e1 / e2 >= 3.5


def test_checkpoint_roundtrip(tmp_path, rng):
    disc = Discretization(generate_structured_mesh(2, 3))
    hist = [FieldState(rng.random(disc.nc), rng.standard_normal(disc.nu), rng.standard_normal(disc.nc),
                       rng.standard_normal(4 * disc.nc), 0.1 * k, float(rng.standard_normal()))
            for k in (2, 1)]
    clock = SimulationClock(0.1, 0.7, 2)
    path = save_checkpoint(tmp_path / "ck" / "c.npz", clock, hist)
    clock2, hist2 = load_checkpoint(path)
    assert (clock2.dt, clock2.t_end, clock2.step_index) == (0.1, 0.7, 2)
    for a, b in zip(hist, hist2):
        for name in ("rho", "u", "p", "z"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
        assert a.time == b.time and a.lam == b.lam


def test_checkpoint_version_check(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, version=np.array(99))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


def test_restart_matches_uninterrupted_run(tmp_path):
    setup = build_case(default_case("cavity", nx=4, ny=4, tau_s=0.0, t_end=0.3))
    full = run(setup.problem, setup.initial, SimulationClock(0.1, 0.3))
    run(setup.problem, setup.initial, SimulationClock(0.1, 0.2), checkpoint_every=2,
        checkpoint_dir=tmp_path)
    clock, hist = load_checkpoint(tmp_path / "checkpoint_00002.npz")
    clock = SimulationClock(clock.dt, 0.3, clock.step_index)
    resumed = run(setup.problem, hist[0], clock, history=hist)
    np.testing.assert_array_equal(resumed[-1].u, full[-1].u)


def test_non_convergence_writes_checkpoint(tmp_path):
    setup = build_case(default_case("cavity", nx=4, ny=4, tau_s=2.5))
    with pytest.raises(NonConvergenceError) as exc:
        run(setup.problem, setup.initial, SimulationClock(0.1, 0.2), SolverConfig(max_iter=1),
            checkpoint_dir=tmp_path)
    assert exc.value.checkpoint is not None and exc.value.checkpoint.exists()
    clock, hist = load_checkpoint(exc.value.checkpoint)
    assert clock.step_index == 0
    np.testing.assert_array_equal(hist[0].u, setup.initial.u)
    assert not exc.value.report.converged
