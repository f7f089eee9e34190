import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tempodiff.metrics import MetricReport, evaluate_frames, mse, palette_distance, psnr, smoothness, ssim


def _img(seed=0, shape=(3, 16, 16)):
    return np.random.default_rng(seed).uniform(0.1, 0.8, shape)


def test_identical_images_are_perfect():
    x = _img()
    assert mse(x, x) == 0.0
    assert psnr(x, x) == 100.0
    assert ssim(x, x) == pytest.approx(1.0)


def test_constant_offset_closed_form():
    x = _img()
    assert mse(x + 0.1, x) == pytest.approx(0.01)
    assert psnr(x + 0.1, x) == pytest.approx(20.0)


def test_ssim_negative_lower():
    x = _img(1)
    assert ssim(1.0 - x, x) < ssim(x, x)


def test_masked_metrics_average_inside_only():
    x = _img(2)
    y = x.copy()
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[4:12, 4:12] = 1
    y[:, mask == 0] = 0.0
    assert mse(y, x, mask) == 0.0
    assert psnr(y, x, mask) == 100.0
    assert mse(y, x) > 0


def test_masked_ssim_uses_map_under_mask():
    x = _img(3)
    y = x.copy()
    y[:, :, :8] = 1 - y[:, :, :8]
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[:, 12:] = 1
    assert ssim(y, x, mask) > ssim(y, x)


def test_empty_mask_rejected():
    x = _img()
    with pytest.raises(ValueError):
        mse(x, x, np.zeros((16, 16)))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(_img(), _img(shape=(3, 8, 8)))


def test_smoothness_examples():
    x = _img()
    assert smoothness([x, x, x]) == 0.0
    assert smoothness([x, x + 0.1]) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        smoothness([x])


def test_smoothness_pairs_only():
    frames = [np.full((1, 2, 2), v) for v in (0.0, 0.1, 0.3)]
    # (0.1)^2 + (0.2)^2; the first/last pair is not counted
    assert smoothness(frames) == pytest.approx(0.01 + 0.04)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (6, 1, 4, 4), elements=st.floats(0, 1)), st.integers(0, 10_000))
def test_shuffle_never_beats_sorted_for_monotone_sequences(base, seed):
    # a sequence ordered by brightness is at least as smooth as any permutation of it
    frames = np.sort(base.mean(axis=(1, 2, 3)))[:, None, None, None] * np.ones((1, 1, 4, 4))
    perm = np.random.default_rng(seed).permutation(len(frames))
    assert smoothness(frames[perm]) >= smoothness(frames) - 1e-12


def test_evaluate_frames_means_are_arithmetic():
    preds = np.stack([_img(i) for i in range(4)])
    targets = np.stack([_img(i + 10) for i in range(4)])
    masks = np.ones((4, 16, 16), dtype=np.uint8)
    rep = evaluate_frames(preds, targets, masks, {"tag": 1})
    assert isinstance(rep, MetricReport)
    assert rep.means["psnr"] == pytest.approx(np.mean(rep.psnr))
    assert rep.means["masked_mse"] == pytest.approx(np.mean(rep.masked_mse))
    assert rep.smoothness == pytest.approx(smoothness(preds))
    assert rep.summary()["config"] == {"tag": 1}
    assert rep.to_dict()["means"] == rep.means


def test_evaluate_without_masks_has_no_masked_means():
    x = np.stack([_img(i) for i in range(2)])
    assert "masked_psnr" not in evaluate_frames(x, x).means


def test_palette_distance():
    frames = np.zeros((2, 3, 4, 4))
    frames[:, 0] = 0.5
    masks = np.ones((2, 4, 4))
    assert palette_distance(frames, masks, [0.5, 0, 0]) == pytest.approx(0.0)
    assert palette_distance(frames, masks, [0.5, 0.3, 0.4]) == pytest.approx(0.5)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 8, 8), elements=st.floats(0, 1)), arrays(np.float64, (3, 8, 8), elements=st.floats(0, 1)))
def test_metric_properties(a, b):
    assert mse(a, b) == pytest.approx(mse(b, a))
    assert mse(a, b) >= 0
    assert psnr(a, b) <= 100.0
    assert ssim(a, b) <= 1.0 + 1e-9
