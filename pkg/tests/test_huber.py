import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bingham_dg.huber import (PhysParams, bingham_stress, classify_active, huber_norm,
                              regularized_stress, tensor_norm, viscosity_mu)
from bingham_dg.verify import check_huber_lemmas, huber_lemma_violations

P = PhysParams(eta=1.0, tau_s=2.5, gamma=1000.0)


def test_huber_norm_examples():
    assert huber_norm(np.zeros((2, 2)), P) == 2.5
    A = np.array([[0.6, 0.0], [0.0, 0.8]])
    assert abs(huber_norm(A, P) - 1000.0) < 1e-12


def test_viscosity_examples():
    assert viscosity_mu(2.5, P) == 2.0 + 1000.0
    assert abs(viscosity_mu(5000.0, P) - 2.5) < 1e-15
    newt = PhysParams(eta=0.3, tau_s=0.0)
    np.testing.assert_array_equal(viscosity_mu(np.array([0.1, 7.0]), newt), [0.6, 0.6])
    with pytest.raises(ValueError):
        viscosity_mu(1.0, P)


def test_stress_examples():
    np.testing.assert_array_equal(regularized_stress(np.zeros((2, 2)), P), np.zeros((2, 2)))
    np.testing.assert_array_equal(regularized_stress(np.zeros((2, 2)), PhysParams()),
                                  np.zeros((2, 2)))
    Du = np.array([[0.3, -0.1], [-0.1, -0.3]])
    assert P.gamma * tensor_norm(Du) > P.tau_s
    np.testing.assert_allclose(regularized_stress(Du, P), 2 * Du + 2.5 * Du / tensor_norm(Du),
                               rtol=0, atol=1e-14)


def test_classifier_examples():
    assert classify_active(np.zeros((2, 2)), P) == 0
    A = np.array([[2.5e-3, 0.0], [0.0, 0.0]])
    assert P.gamma * tensor_norm(A) == P.tau_s
    assert classify_active(A, P) == 1
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((50, 2, 2)) * 1e-9
    Z[0] = 0.0
    assert np.all(classify_active(Z, PhysParams(tau_s=0.0)) == 1)


@pytest.mark.parametrize("kw", [dict(eta=0.0), dict(tau_s=-1.0), dict(gamma=0.0),
                                dict(rho_min_guard=0.0), dict(norm="max")])
def test_invalid_params(kw):
    with pytest.raises(ValueError):
        PhysParams(**kw)


def test_shear_norm_scaling():
    s = 0.8
    Du = np.array([[0.0, s / 2], [s / 2, 0.0]])
    assert abs(tensor_norm(Du, PhysParams(norm="shear")) - s / 2) < 1e-15


def test_lemma_suite():
    v = huber_lemma_violations(n_pairs=10_000, seed=3)
    assert set(v) == {"norm_lipschitz", "stress_lipschitz", "monotonicity"}
    assert all(r.passed for r in check_huber_lemmas())
    for val in v.values():
        assert val <= 1e-12


tensors = arrays(np.float64, (2, 2), elements=st.floats(-1e3, 1e3, allow_subnormal=False))


@settings(max_examples=300, deadline=None)
@given(A=tensors, B=tensors, gamma=st.sampled_from([10.0, 1e3]),
       tau=st.sampled_from([0.0, 0.1, 2.5]), eta=st.floats(0.01, 10))
def test_lemmas_property(A, B, gamma, tau, eta):
    p = PhysParams(eta=eta, tau_s=tau, gamma=gamma)
    d = tensor_norm(A - B)
    scale = max(1.0, gamma * d, huber_norm(A, p), huber_norm(B, p))
    assert abs(huber_norm(A, p) - huber_norm(B, p)) <= gamma * d + 1e-12 * scale
    TA, TB = regularized_stress(A, p), regularized_stress(B, p)
    sscale = max(1.0, tensor_norm(TA), tensor_norm(TB))
    assert tensor_norm(TA - TB) <= (2 * eta + 2 * gamma) * d + 1e-12 * sscale
    inner = np.sum((TA - TB) * (A - B))
    assert inner >= 2 * eta * d ** 2 - 1e-12 * max(1.0, sscale * (tensor_norm(A) + tensor_norm(B)))


@settings(max_examples=200, deadline=None)
@given(A=tensors, tau=st.floats(0, 10))
def test_consistency_in_yielded_zone(A, tau):
    p = PhysParams(eta=1.0, tau_s=tau, gamma=1e3)
    if tau == 0.0 or p.gamma * tensor_norm(A) < tau:
        return
    exact = bingham_stress(A, p)
    assert tensor_norm(regularized_stress(A, p) - exact) <= 1e-14 * max(1.0, tensor_norm(exact))


@settings(max_examples=100, deadline=None)
@given(A=tensors, t1=st.floats(0, 5), t2=st.floats(0, 5))
def test_classifier_monotone_in_tau(A, t1, t2):
    lo, hi = sorted((t1, t2))
    assert classify_active(A, PhysParams(tau_s=hi)) <= classify_active(A, PhysParams(tau_s=lo))
