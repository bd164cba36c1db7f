"""Tests for the diagonal band, diagonal rate, constraint loss and sliding window"""

from fractions import Fraction

import numpy as np
import pytest

from tts_alignment_lab.alignment import (
    AttentionMatrix,
    DiagonalBand,
    SlidingWindowState,
    attention_centroid,
    average_attention,
    band_mask,
    batched_diagonal_rates,
    diagonal_constraint_loss,
    diagonal_rate,
    in_band,
    uniform_attention_rate,
    window_init,
    window_mask,
    window_range,
    window_update,
)
from tts_alignment_lab.errors import ParameterError, ShapeError
from tts_alignment_lab.tensor import Tensor, numerical_gradient, relative_error, softmax_lastdim


def random_attention(rng, speech_len, text_len):
    weights = rng.random((speech_len, text_len)) + 1e-3
    return AttentionMatrix(Tensor(weights / weights.sum(axis=1, keepdims=True)))


def naive_rate(weights, b):
    """Double loop over every cell, float arithmetic only."""
    speech_len, text_len = weights.shape
    k = speech_len / text_len
    total = 0.0
    for s in range(speech_len):
        for t in range(text_len):
            if abs(s - k * t) <= b + 1e-9:
                total += weights[s, t]
    return total / speech_len


# ===== BAND =====

def test_in_band_examples():
    band = DiagonalBand.for_lengths(10, 5, 0)
    assert band.k == Fraction(2)
    assert in_band(2, 4, band)
    assert not in_band(2, 5, band)
    assert in_band(2, 5, DiagonalBand.for_lengths(10, 5, 1))


def test_in_band_is_exact_for_repeating_slopes():
    """k = 10/3: only (0, 0) lies exactly on the line"""
    band = DiagonalBand.for_lengths(10, 3, 0)
    assert not in_band(1, 3, band)
    assert in_band(0, 0, band)
    assert band_mask(10, 3, 0).sum() == 1


def test_in_band_rejects_out_of_range():
    band = DiagonalBand.for_lengths(4, 4, 1)
    with pytest.raises(ParameterError):
        in_band(4, 0, band)
    with pytest.raises(ParameterError):
        in_band(-1, 0, band)
    with pytest.raises(ParameterError):
        DiagonalBand(b=-1, k=Fraction(1))


def test_band_mask_agrees_with_in_band():
    for speech_len, text_len, b in [(13, 7, 3), (5, 9, 0), (20, 4, 2.5)]:
        band = DiagonalBand.for_lengths(speech_len, text_len, b)
        mask = band_mask(speech_len, text_len, b)
        expected = [[in_band(t, s, band) for t in range(text_len)] for s in range(speech_len)]
        np.testing.assert_array_equal(mask, np.array(expected))


# ===== RATE =====

def test_one_hot_diagonal_rate_is_one():
    attn = AttentionMatrix(Tensor(np.eye(6)))
    assert diagonal_rate(attn, DiagonalBand.for_lengths(6, 6, 0)).item() == 1.0


def test_uniform_four_by_four_rate():
    attn = AttentionMatrix(Tensor(np.full((4, 4), 0.25)))
    assert diagonal_rate(attn, DiagonalBand.for_lengths(4, 4, 0)).item() == pytest.approx(0.25)
    assert uniform_attention_rate(4, 4, 0) == pytest.approx(0.25)


@pytest.mark.parametrize("b", [0, 1, 3, 10])
def test_rate_matches_double_loop_oracle(rng, b):
    for _ in range(100):
        speech_len, text_len = rng.integers(1, 21, size=2)
        attn = random_attention(rng, int(speech_len), int(text_len))
        rate = diagonal_rate(attn, DiagonalBand.for_lengths(attn.S, attn.T, b)).item()
        assert abs(rate - naive_rate(attn.numpy(), b)) <= 1e-12
        assert 0.0 <= rate <= 1.0


def test_rate_grows_with_bandwidth(rng):
    attn = random_attention(rng, 13, 7)
    rates = [diagonal_rate(attn, DiagonalBand.for_lengths(13, 7, b)).item() for b in range(15)]
    assert all(a <= b for a, b in zip(rates, rates[1:]))
    assert rates[-1] == pytest.approx(1.0)


def test_band_slope_must_match_matrix(rng):
    attn = random_attention(rng, 6, 3)
    with pytest.raises(ParameterError):
        diagonal_rate(attn, DiagonalBand.for_lengths(6, 2, 1))


def test_attention_matrix_validation():
    with pytest.raises(ParameterError):
        AttentionMatrix(Tensor(np.array([[0.5, 0.6]])))
    with pytest.raises(ParameterError):
        AttentionMatrix(Tensor(np.array([[1.5, -0.5]])))
    with pytest.raises(ShapeError):
        AttentionMatrix(Tensor(np.ones(3) / 3))


def test_batched_rates_ignore_padding(rng):
    """Padded cells carry mass but never count; each sample divides by its true S."""
    first = random_attention(rng, 5, 3).numpy()
    second = random_attention(rng, 8, 4).numpy()
    padded = np.full((2, 1, 8, 4), 0.7)
    padded[0, 0, :5, :3] = first
    padded[1, 0] = second

    rates = batched_diagonal_rates(Tensor(padded), [3, 4], [5, 8], 1).data
    assert rates.shape == (2, 1)
    assert rates[0, 0] == pytest.approx(naive_rate(first, 1), abs=1e-12)
    assert rates[1, 0] == pytest.approx(naive_rate(second, 1), abs=1e-12)


def test_average_attention_keeps_rows_stochastic(rng):
    mean = average_attention([random_attention(rng, 4, 5) for _ in range(3)])
    np.testing.assert_allclose(mean.numpy().sum(axis=1), 1.0, atol=1e-12)


# ===== LOSS =====

def test_constraint_loss_is_negative_mean_rate(rng):
    attns = [random_attention(rng, 9, 4) for _ in range(3)]
    band = DiagonalBand.for_lengths(9, 4, 2)
    expected = -np.mean([diagonal_rate(a, band).item() for a in attns])
    assert diagonal_constraint_loss(attns, band).item() == pytest.approx(expected, abs=1e-12)


def test_constraint_loss_needs_matrices():
    with pytest.raises(ParameterError):
        diagonal_constraint_loss([], DiagonalBand.for_lengths(2, 2, 0))


def test_constraint_loss_gradient_through_softmax(rng):
    logits = Tensor(rng.normal(size=(2, 7, 5)), requires_grad=True)
    band = DiagonalBand.for_lengths(7, 5, 1)

    def loss():
        probs = softmax_lastdim(logits)
        return diagonal_constraint_loss([AttentionMatrix(probs[0]), AttentionMatrix(probs[1])], band)

    loss().backward()
    assert relative_error(logits.grad, numerical_gradient(loss, logits)) <= 1e-4


# ===== CENTROID =====

@pytest.mark.parametrize(
    "row, expected",
    [
        (np.eye(8)[5], 5),
        (np.full(4, 0.25), 1),
        (np.array([0.2, 0.8]), 0),
        (np.array([0.0, 0.0, 1.0 - 1e-12, 1e-12]), 2),
    ],
)
def test_attention_centroid(row, expected):
    assert attention_centroid(row) == expected


def test_centroid_rounds_up_just_below_an_integer():
    row = np.array([1e-10, 1.0 - 1e-10])
    assert attention_centroid(row) == 1


def test_centroid_rejects_unnormalised_rows():
    with pytest.raises(ParameterError):
        attention_centroid(np.array([0.5, 0.4]))


# ===== SLIDING WINDOW =====

def test_window_init():
    assert window_init() == SlidingWindowState(center=0, deviation_count=0, back=1, ahead=4)


def test_window_mask_examples():
    masked = window_mask(np.zeros(10), SlidingWindowState(center=3))
    assert np.flatnonzero(np.isfinite(masked)).tolist() == [2, 3, 4, 5, 6, 7]
    assert np.all(np.isfinite(window_mask(np.zeros(2), window_init())))
    assert window_range(SlidingWindowState(center=9), 4) == (2, 3)


def test_window_mask_zeroes_softmax_mass(rng):
    state = SlidingWindowState(center=4)
    for _ in range(50):
        logits = rng.normal(scale=5.0, size=12)
        masked = window_mask(logits, state)
        probs = np.exp(masked - masked.max())
        probs /= probs.sum()
        low, high = window_range(state, 12)
        assert probs[:low].sum() == 0.0 and probs[high + 1:].sum() == 0.0
        np.testing.assert_array_equal(masked[low:high + 1], logits[low:high + 1])


def test_centroid_at_center_resets_count():
    state = window_update(SlidingWindowState(center=2, deviation_count=2), 2, 10)
    assert state == SlidingWindowState(center=2, deviation_count=0)


def test_three_forward_deviations_advance_by_one():
    state = window_init()
    for _ in range(3):
        state = window_update(state, state.center + 2, 10)
    assert state.center == 1 and state.deviation_count == 0


def test_interrupted_deviations_do_not_advance():
    state = SlidingWindowState(center=3)
    for centroid in (4, 5, 3):
        state = window_update(state, centroid, 10)
    assert state == SlidingWindowState(center=3, deviation_count=0)


def test_center_caps_at_last_position():
    state = SlidingWindowState(center=4, deviation_count=2)
    assert window_update(state, 4, 5).center == 4
    with pytest.raises(ParameterError):
        window_update(state, 5, 5)


def test_random_traces_keep_window_invariants(rng):
    for _ in range(1000):
        text_len = int(rng.integers(1, 15))
        state = window_init()
        for centroid in rng.integers(0, text_len, size=30):
            updated = window_update(state, int(centroid), text_len)
            assert updated.center - state.center in (0, 1)
            assert 0 <= updated.deviation_count <= 2
            assert updated.center < text_len
            state = updated
