import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from basisprune import model as mdl
from basisprune import oracles, spectra
from basisprune.errors import DomainError, InsufficientSpectrum, InvalidConfig
from basisprune.numkit import RngStream

from conftest import random_batch, random_model


def test_harmonic():
    assert spectra.harmonic(3, 2) == pytest.approx(49 / 36, abs=1e-15)
    assert spectra.harmonic(1, 3.7) == 1.0
    vals = [spectra.harmonic(n, 1.3) for n in range(1, 20)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    with pytest.raises(DomainError):
        spectra.harmonic(0, 2)


def test_zeta_classical():
    assert spectra.zeta(2) == pytest.approx(math.pi**2 / 6, abs=1e-14)
    assert spectra.zeta(4) == pytest.approx(math.pi**4 / 90, abs=1e-14)
    with pytest.raises(DomainError):
        spectra.zeta(1.0)


@pytest.mark.parametrize("s", [1.1, 1.25, 1.5, 2.5, 3.0, 7.0, 20.0])
def test_zeta_against_mpmath(s):
    assert abs(spectra.zeta(s) - float(mpmath.zeta(s))) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.floats(1.05, 6.0), st.integers(1, 500))
def test_zeta_dominates_partial_sums(s, n):
    assert spectra.zeta(s) >= spectra.harmonic(n, s)


def test_fit_power_law():
    k = np.arange(1, 40.0)
    assert spectra.fit_power_law(k**-1).alpha == pytest.approx(1.0)
    assert spectra.fit_power_law(k**-2).alpha == pytest.approx(2.0)
    flat = spectra.fit_power_law(np.array([1.0, 1.0]))
    assert flat.alpha == 0.0 and flat.assumption_violated
    with pytest.raises(InsufficientSpectrum):
        spectra.fit_power_law(np.array([1.0, 1e-20, 0.0]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=2, max_size=30))
def test_fit_envelope_holds(vals):
    mags = np.sort(np.array(vals))[::-1]
    fit = spectra.fit_power_law(mags)
    k = np.arange(1, mags.size + 1)
    above = mags > fit.floor
    assert np.all(mags[above] <= fit.envelope(k[above]) * (1 + 1e-12))


def test_variance_bound():
    assert spectra.variance_bound(1.0, 1.0, 1) == pytest.approx(math.pi**2 / 6)
    assert spectra.variance_bound(2.0, 1.5, 8) == pytest.approx(spectra.variance_bound(2.0, 1.5, 4) / 2)
    assert spectra.variance_bound_partial(1.0, 1.0, 50, 3) <= spectra.variance_bound(1.0, 1.0, 3)
    with pytest.raises(DomainError):
        spectra.variance_bound(1.0, 0.5, 1)


def test_total_variance_exact():
    assert spectra.total_variance_exact(np.diag([1.0, 2.0])) == 0.0
    assert spectra.total_variance_exact([[2.0, 1.0], [1.0, 3.0]], 1) == 2.0
    from basisprune.suites import synthetic_matrix
    h = synthetic_matrix("power1", 16, 0)
    assert spectra.total_variance_exact(h, 1) <= spectra.variance_bound(1.0, 1.0, 1)


def test_sample_complexity_spot_value():
    n, alpha, eps, delta = 10, 1.0, 0.5, 0.1
    trace = sum(1 / k for k in range(1, 11))
    h2 = sum(1 / k**2 for k in range(1, 11))
    expected = 2 * (h2 / (trace**2 / n) - 1) * math.log(2 * n / delta) / eps**2
    got = spectra.sample_complexity(1.0, alpha, n, trace, eps, delta)
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(34.19, abs=0.02)
    assert spectra.sample_complexity(1.0, alpha, n, trace, 4 * eps, delta) == pytest.approx(got / 16)


def test_sample_complexity_zero_and_errors():
    # |lambda_1|^2 H_{n,2a} = Tr^2 / n makes the bound vanish.
    n = 4
    trace = math.sqrt(n * spectra.harmonic(n, 2.0))
    assert spectra.sample_complexity(1.0, 1.0, n, trace, 0.5, 0.1) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DomainError):
        spectra.sample_complexity(1.0, 1.0, 3, 0.0, 0.5, 0.1)
    assert spectra.min_probes(-3.0) == 1
    assert spectra.min_probes(654.8) == 655
    assert spectra.min_probes(3.0) == 4


def test_sample_complexity_psd():
    expected = 2 * (10 * float(mpmath.zeta(2)) - 1) * float(mpmath.log(200)) / 0.25
    got = spectra.sample_complexity_psd(10, 1.0, 0.5, 0.1)
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(654.8, abs=0.1)
    assert spectra.sample_complexity_psd(1, 1.0, 0.5, 0.1) > 0
    trace = spectra.harmonic(10, 1.0)
    assert got >= spectra.sample_complexity(1.0, 1.0, 10, trace, 0.5, 0.1)


def test_loss_change_bound():
    assert spectra.loss_change_bound(0.3, 2.0, 0.0, 5.0) == 0.0
    # f(s) = s^3/6 pruned from s=1: exact change 1/6 equals the bound.
    assert spectra.loss_change_bound(0.5, 1.0, 1.0, 1.0) == pytest.approx(1 / 6)
    # Quadratic with rho = 0 is exact.
    a, b, s = 3.0, -0.7, 1.3
    f = lambda x: 0.5 * a * x * x + b * x
    assert spectra.loss_change_bound(a * s + b, a, s, 0.0) == pytest.approx(abs(f(0) - f(s)))
    with pytest.raises(DomainError):
        spectra.loss_change_bound(0, 0, 1, -1)


def test_loss_change_bound_rel():
    g, h, s, rho = 0.5, 1.0, 1.0, 1.0
    assert spectra.loss_change_bound_rel(g, h, s, rho, 1e-12) == pytest.approx(
        spectra.loss_change_bound(g, h, s, rho))
    mid = spectra.loss_change_bound_rel(0.0, 2.0, 1.0, 0.0, 0.5) - abs(0.5 * 2.0)
    assert mid == pytest.approx(0.5 * 2.0)
    for sign in (-1, 1):
        assert 1 / 6 <= spectra.loss_change_bound_rel(g, h * (1 + sign * 0.1), s, rho, 0.1)
    with pytest.raises(DomainError):
        spectra.loss_change_bound_rel(g, h, s, rho, 1.0)


def test_lm_head_examples():
    rng = RngStream(3)
    v, x, logits = rng.normal(4), rng.normal(4), rng.normal(5)
    assert spectra.lm_head_hessian_diag(np.full(5, 2.0), v, x, logits) == pytest.approx(0.0, abs=1e-15)
    x0 = np.array([1.0, 0, 0, 0])
    v0 = np.array([0.0, 1, 0, 0])
    assert spectra.lm_head_hessian_diag(rng.normal(5), v0, x0, logits) == 0.0


def _single_layer_fd(seed):
    rng = RngStream(seed, 7)
    c, m = 5, 4
    model = random_model([m, c], seed)
    layer = model.layers[0]
    x = rng.normal((1, m))
    batch = mdl.Batch.from_labels(x, [int(rng.integers(0, c))], c)
    logits, _ = mdl.forward(model, x)
    # Central differences of the backprop gradient; second differences of the
    # loss lose too many digits to cancellation for a 1e-6 relative check.
    fd = np.diag(oracles.layer_hessian(model, [batch], 0))
    closed = [spectra.lm_head_hessian_diag(layer.U[:, i], layer.V[:, i], x[0], logits[0])
              for i in range(layer.rank)]
    return np.array(closed), fd


def test_lm_head_matches_finite_differences():
    closed, fd = _single_layer_fd(3)
    np.testing.assert_allclose(closed, fd, rtol=1e-6, atol=1e-9)


def test_merge_block_spectra_block_diagonal():
    blocks = []
    for k, n in enumerate((3, 4)):
        a = RngStream(k).normal((n, n))
        blocks.append(a + a.T)
    full = np.zeros((7, 7))
    full[:3, :3], full[3:, 3:] = blocks
    res = spectra.merge_block_spectra(blocks)
    np.testing.assert_allclose(np.sort(res.eigenvalues), np.linalg.eigvalsh(full), atol=1e-12)
    assert np.all(np.diff(res.magnitudes) <= 0)
    assert [r[0] for r in res.rows()] == list(range(1, 8))


def test_block_spectrum_single_layer_equals_dense(toy_batch):
    m = random_model([4, 3], 2)
    batch = mdl.Batch(toy_batch.inputs, toy_batch.targets)
    res = spectra.block_diag_sv_spectrum(m, [batch], 3)
    dense = oracles.layer_hessian(m, [batch], 0)
    np.testing.assert_allclose(np.sort(np.abs(np.linalg.eigvalsh(dense)))[::-1], res.magnitudes,
                               atol=1e-12)


def test_block_spectrum_top_k_errors(toy_model, toy_batch):
    with pytest.raises(InvalidConfig):
        spectra.block_diag_sv_spectrum(toy_model, [toy_batch], 4)
    with pytest.raises(InvalidConfig):
        spectra.block_diag_sv_spectrum(toy_model, [toy_batch], 0)
