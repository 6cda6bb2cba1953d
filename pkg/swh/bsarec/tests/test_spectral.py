# Copyright (C) 2024 The Software Heritage developers
# See the AUTHORS file at the top-level directory of this distribution
# License: GNU Affero General Public License version 3, or any later version
# See top-level LICENSE file for more information

import numpy as np
import pytest
import torch

from swh.bsarec.error import InvalidArgument, UndefinedRatio
from swh.bsarec.spectral import (
    BetaMode,
    FourierPlan,
    FrequencyRescaler,
    FrequencySplit,
    apply_inductive_bias,
    hfc,
    hfc_lfc_ratio,
    lfc,
)


def dense_lfc(x: np.ndarray, c: int) -> np.ndarray:
    """Low band of ``x`` through the O(n^2) complex DFT: a full-DFT bin ``k``
    belongs to real bin ``min(k, n - k)``"""
    n = x.shape[-1]
    t = np.arange(n)
    W = np.exp(-2j * np.pi * np.outer(t, t) / n)
    X = x @ W.T
    real_bin = np.minimum(t, n - t)
    X = np.where(real_bin < c, X, 0)
    return np.real(X @ np.conj(W).T / n)


def test_lfc_examples():
    assert lfc([1.0, 2.0, 3.0, 4.0], FrequencySplit(1)).tolist() == pytest.approx(
        [2.5, 2.5, 2.5, 2.5]
    )
    assert hfc([1.0, 2.0, 3.0, 4.0], FrequencySplit(1)).tolist() == pytest.approx(
        [-1.5, -0.5, 0.5, 1.5]
    )
    alternating = [1.0, -1.0, 1.0, -1.0]
    assert lfc(alternating, FrequencySplit(2)).tolist() == pytest.approx(
        [0.0] * 4, abs=1e-12
    )
    assert hfc(alternating, FrequencySplit(2)).tolist() == pytest.approx(alternating)


@pytest.mark.parametrize("n", [2, 4, 7, 8, 50])
def test_filters_match_dense_dft(n):
    rng = np.random.default_rng(n)
    x = rng.standard_normal((100, n))
    for c in range(1, n // 2 + 1):
        split = FrequencySplit(c)
        expected = dense_lfc(x, c)
        np.testing.assert_allclose(lfc(x, split).numpy(), expected, atol=1e-10)
        np.testing.assert_allclose(hfc(x, split).numpy(), x - expected, atol=1e-10)


@pytest.mark.parametrize("n", [2, 4, 8, 50])
def test_filter_properties(n):
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.standard_normal((1000, n)))
    y = torch.from_numpy(rng.standard_normal((1000, n)))
    for c in {1, n // 2}:
        split = FrequencySplit(c)
        low, high = lfc(x, split), hfc(x, split)
        torch.testing.assert_close(low + high, x, atol=1e-10, rtol=0)
        torch.testing.assert_close(lfc(low, split), low, atol=1e-10, rtol=0)
        torch.testing.assert_close(hfc(high, split), high, atol=1e-10, rtol=0)
        torch.testing.assert_close(
            lfc(high, split), torch.zeros_like(x), atol=1e-10, rtol=0
        )
        torch.testing.assert_close(
            hfc(low, split), torch.zeros_like(x), atol=1e-10, rtol=0
        )
        torch.testing.assert_close(
            hfc(2.0 * x - 3.0 * y, split),
            2.0 * high - 3.0 * hfc(y, split),
            atol=1e-10,
            rtol=0,
        )
        torch.testing.assert_close(
            lfc(2.0 * x - 3.0 * y, split),
            2.0 * low - 3.0 * lfc(y, split),
            atol=1e-10,
            rtol=0,
        )
        energy = (low ** 2).sum(-1) + (high ** 2).sum(-1)
        torch.testing.assert_close(energy, (x ** 2).sum(-1), atol=1e-9, rtol=1e-12)


def test_constant_signal_is_low_band():
    x = torch.full((8,), 3.0, dtype=torch.float64)
    torch.testing.assert_close(lfc(x, FrequencySplit(1)), x)
    assert hfc(x, FrequencySplit(1)).abs().max() < 1e-12


def test_cutoff_out_of_range():
    with pytest.raises(InvalidArgument, match="n=8"):
        lfc(torch.zeros(8), FrequencySplit(5))
    with pytest.raises(InvalidArgument, match="c=0"):
        FrequencySplit(0)
    with pytest.raises(InvalidArgument, match="n=3"):
        hfc(torch.zeros(3), FrequencySplit(2))


def test_fourier_plan():
    plan = FourierPlan(6)
    assert plan.bins == 4
    x = torch.arange(6, dtype=torch.float64)
    spectrum = plan.forward(x)
    assert spectrum.values.shape == (4,)
    assert abs(spectrum.values[0].imag) < 1e-12
    assert abs(spectrum.values[3].imag) < 1e-12
    torch.testing.assert_close(plan.inverse(spectrum), x)
    with pytest.raises(InvalidArgument, match="n=6"):
        plan.forward(torch.zeros(5))
    with pytest.raises(InvalidArgument):
        FourierPlan(0)


def test_projections_are_complementary():
    low, high = FourierPlan(10).projections(FrequencySplit(2))
    torch.testing.assert_close(low + high, torch.eye(10, dtype=torch.float64))
    torch.testing.assert_close(low @ low, low, atol=1e-12, rtol=0)
    torch.testing.assert_close(low, low.t(), atol=1e-12, rtol=0)


def test_inductive_bias_identity_at_unit_beta():
    X = torch.randn(3, 10, 4, dtype=torch.float64)
    torch.testing.assert_close(apply_inductive_bias(X, FrequencySplit(3), 1.0), X)
    torch.testing.assert_close(
        apply_inductive_bias(X, FrequencySplit(3), 1.0, causal=True), X
    )


def test_inductive_bias_examples():
    constant = torch.full((4, 2), 5.0, dtype=torch.float64)
    torch.testing.assert_close(
        apply_inductive_bias(constant, FrequencySplit(1), 7.0), constant
    )
    column = torch.tensor([[1.0], [2.0], [3.0], [4.0]], dtype=torch.float64)
    result = apply_inductive_bias(column, FrequencySplit(1), 2.0)
    assert result[:, 0].tolist() == pytest.approx([-0.5, 1.5, 3.5, 5.5])


def test_inductive_bias_vector_beta():
    X = torch.randn(8, 3, dtype=torch.float64)
    split = FrequencySplit(2)
    beta = torch.tensor([0.0, 1.0, 2.0], dtype=torch.float64)
    result = apply_inductive_bias(X, split, beta)
    for j in range(3):
        expected = apply_inductive_bias(X[:, j : j + 1], split, float(beta[j]))
        torch.testing.assert_close(result[:, j : j + 1], expected)
    with pytest.raises(InvalidArgument, match="D=3"):
        apply_inductive_bias(X, split, torch.ones(2))


def test_causal_inductive_bias_ignores_future_positions():
    X = torch.randn(10, 4, dtype=torch.float64)
    perturbed = X.clone()
    perturbed[6:] += 10.0
    split, beta = FrequencySplit(2), torch.full((4,), 0.3, dtype=torch.float64)
    before = apply_inductive_bias(X, split, beta, causal=True)
    after = apply_inductive_bias(perturbed, split, beta, causal=True)
    torch.testing.assert_close(before[:6], after[:6])
    assert not torch.allclose(before[6:], after[6:])


def test_hfc_lfc_ratio():
    assert hfc_lfc_ratio([1.0, 2.0, 3.0, 4.0], FrequencySplit(1)) == pytest.approx(
        (5 ** 0.5) / 5
    )
    assert hfc_lfc_ratio([2.0, 2.0, 2.0, 2.0], FrequencySplit(1)) == pytest.approx(
        0.0, abs=1e-12
    )
    with pytest.raises(UndefinedRatio):
        hfc_lfc_ratio([1.0, -1.0, 1.0, -1.0], FrequencySplit(1))
    with pytest.raises(UndefinedRatio):
        hfc_lfc_ratio([0.0, 0.0, 0.0, 0.0], FrequencySplit(1))


@pytest.mark.parametrize("scale", [1.0, 1e-10, 1e-20, 1e-100, 1e20])
def test_hfc_lfc_ratio_ignores_scale(scale):
    x = [scale * v for v in (1.0, 2.0, 3.0, 4.0)]
    assert hfc_lfc_ratio(x, FrequencySplit(1)) == pytest.approx((5 ** 0.5) / 5)


def test_cutoff_accepts_numpy_integers():
    split = FrequencySplit(np.int64(2))
    assert lfc(torch.ones(8, dtype=torch.float64), split).shape == (8,)
    with pytest.raises(InvalidArgument):
        FrequencySplit(2.0)
    with pytest.raises(InvalidArgument):
        FrequencySplit(True)


@pytest.mark.parametrize("mode,size", [("scalar", 1), ("vector", 6)])
def test_rescaler_starts_as_identity(mode, size):
    rescaler = FrequencyRescaler(BetaMode(mode), hidden_size=6)
    assert rescaler.beta.shape == (size,)
    X = torch.randn(2, 8, 6)
    torch.testing.assert_close(rescaler(X, FrequencySplit(2)), X, atol=1e-5, rtol=0)
