"""Tests for PSNR, windowed SSIM, normalization, and the generalization
report."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedrecon.checks import ssim_oracle
from fedrecon.metrics import (
    GenReport,
    MetricConfig,
    gaussian_window,
    gen_report,
    normalized_magnitude,
    psnr,
    ssim,
)
from fedrecon.mri import PhantomSpec, make_mask, make_phantoms
from fedrecon.network import UnrolledModel


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# PSNR


def test_psnr_identical_images_is_infinite():
    x = rng().random((16, 16))
    assert psnr(x, x) == math.inf


def test_psnr_known_offset():
    # uniform error of 0.1 with unit range: 10*log10(1/0.01) = 20 dB
    x = np.zeros((8, 8))
    y = np.full((8, 8), 0.1)
    assert abs(psnr(x, y, data_range=1.0) - 20.0) < 1e-12


def test_psnr_data_range_scaling():
    x = np.zeros((8, 8))
    y = np.full((8, 8), 0.5)
    # doubling the range adds 20*log10(2) dB
    assert abs(psnr(x, y, 2.0) - psnr(x, y, 1.0) - 20 * math.log10(2)) < 1e-12


def test_psnr_validation():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((5, 5)))
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 4)), data_range=0.0)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_psnr_symmetry_property(seed):
    r = np.random.default_rng(seed)
    x, y = r.random((8, 8)), r.random((8, 8))
    assert abs(psnr(x, y) - psnr(y, x)) < 1e-12


# ---------------------------------------------------------------------------
# SSIM


def test_ssim_identical_images_is_one():
    x = rng(1).random((24, 24))
    assert abs(ssim(x, x) - 1.0) < 1e-12


def test_ssim_matches_per_window_oracle():
    cfg = MetricConfig()
    r = rng(2)
    x, y = r.random((24, 24)), r.random((24, 24))
    assert abs(ssim(x, y, cfg) - ssim_oracle(x, y, cfg)) < 1e-10


def test_ssim_oracle_agreement_on_correlated_pair():
    cfg = MetricConfig()
    x = rng(3).random((20, 20))
    y = np.clip(x + 0.05 * rng(4).standard_normal((20, 20)), 0, 1)
    got = ssim(x, y, cfg)
    assert abs(got - ssim_oracle(x, y, cfg)) < 1e-10
    assert 0.0 < got < 1.0


def test_ssim_degrades_with_noise():
    x = rng(5).random((24, 24))
    small = np.clip(x + 0.01 * rng(6).standard_normal(x.shape), 0, 1)
    large = np.clip(x + 0.3 * rng(7).standard_normal(x.shape), 0, 1)
    assert ssim(x, small) > ssim(x, large)


def test_ssim_window_normalized():
    w = gaussian_window(11, 1.5)
    assert w.shape == (11, 11)
    assert abs(w.sum() - 1.0) < 1e-12
    assert w[5, 5] == w.max()


def test_metric_config_validation():
    with pytest.raises(ValueError):
        MetricConfig(data_range=0.0)
    with pytest.raises(ValueError):
        MetricConfig(k1=-0.01)
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((9, 9)))


# ---------------------------------------------------------------------------
# normalization


def test_normalized_magnitude_uses_reference_scale():
    ref = np.array([[3.0 + 4.0j]])  # |ref| = 5
    x = np.array([[0.0 + 2.5j]])
    got_x, got_ref = normalized_magnitude(x, ref)
    assert abs(got_ref[0, 0] - 1.0) < 1e-9
    assert abs(got_x[0, 0] - 0.5) < 1e-9


# ---------------------------------------------------------------------------
# generalization report


def test_gen_report_fields_and_counts():
    model = UnrolledModel(hidden=4, unroll_steps=1, cg_iters=4, seed=0)
    mask = make_mask(16, 16, "1D_RANDOM", 2, seed=0)
    train = make_phantoms(PhantomSpec(size=16, seed=1), 4, mask)
    test = make_phantoms(PhantomSpec(size=16, seed=2), 2, mask)
    rep = gen_report(model, train, test)
    assert rep.parameter_count == model.parameter_count()
    assert rep.train_samples == 4
    assert rep.train_error > 0.0 and rep.test_error > 0.0


def test_gen_report_empty_test_set():
    model = UnrolledModel(hidden=4, unroll_steps=1, cg_iters=4, seed=0)
    mask = make_mask(16, 16, "1D_RANDOM", 2, seed=0)
    train = make_phantoms(PhantomSpec(size=16, seed=3), 2, mask)
    rep = gen_report(model, train, [])
    assert rep.test_error is None


def test_gen_report_rejects_bad_parameter_count():
    with pytest.raises(ValueError):
        GenReport(train_error=1.0, test_error=None, parameter_count=0, train_samples=1)
