import json

import numpy as np
import pytest

from tempodiff.metrics import smoothness
from tempodiff.synthscene import (
    BACKGROUND_RGB,
    STYLES,
    HeadParams,
    TrajectoryConfig,
    generate_prior_corpus,
    generate_sequence_data,
    head_geometry,
    make_trajectory,
    read_corpus,
    read_sequence,
    render_frame,
    style_palette,
    write_corpus,
    write_sequence,
)


@pytest.fixture(scope="module")
def seq():
    return generate_sequence_data(11, 200, 32, 1)


def test_same_seed_bit_identical():
    a = generate_sequence_data(3, 20, 32, 2)
    b = generate_sequence_data(3, 20, 32, 2)
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_array_equal(a.renderings, b.renderings)
    np.testing.assert_array_equal(a.masks, b.masks)
    assert a.pupils == b.pupils


def test_different_seed_differs():
    assert not np.array_equal(generate_sequence_data(3, 10).frames, generate_sequence_data(4, 10).frames)


def test_zero_amplitude_is_static():
    frozen = TrajectoryConfig((0, 0), (71, 23), (0, 0), (17, 7), (0, 0), (53, 13), noise_scale=0.0)
    data = generate_sequence_data(5, 12, 32, 3, frozen)
    for f in data.frames[1:]:
        np.testing.assert_array_equal(f, data.frames[0])


def test_temporal_order_smoother_than_shuffled(seq):
    frames = seq.frames
    shuffled = frames[np.random.default_rng(0).permutation(len(frames))]
    assert smoothness(frames) < smoothness(shuffled)


def test_yaw_velocity_capped(seq):
    yaw = np.array([r.params.yaw for r in seq.records])
    assert np.abs(np.diff(yaw)).max() <= TrajectoryConfig().max_yaw_velocity + 1e-12


def test_parameter_ranges(seq):
    for r in seq.records:
        assert -0.5 <= r.params.yaw <= 0.5
        assert 0 <= r.params.mouth_open <= 1


def test_invalid_inputs():
    with pytest.raises(ValueError):
        generate_sequence_data(0, 4)
    with pytest.raises(ValueError):
        generate_sequence_data(0, 10, resolution=48)
    with pytest.raises(ValueError):
        HeadParams(0.9, 0.5, (0, 0), 1)
    with pytest.raises(ValueError):
        HeadParams(0.0, 0.5, (0, 0), 99)


def test_mask_matches_silhouette(seq):
    for r in seq.records[::10]:
        ctrl_fg = r.control_rendering > 0
        m = r.true_mask.astype(bool)
        iou = (ctrl_fg & m).sum() / (ctrl_fg | m).sum()
        assert iou >= 0.95
        gt_fg = np.any(np.abs(r.ground_truth_rgb - np.reshape(BACKGROUND_RGB, (3, 1, 1))) > 0, axis=0)
        assert not np.any(gt_fg & ~m)


def test_mask_is_analytic_ellipse():
    p = HeadParams(0.2, 0.4, (0.1, -0.3), 2)
    rec = render_frame(p, 32)
    g = head_geometry(p, 32)
    yy, xx = np.mgrid[0:32, 0:32].astype(float)
    ell = ((xx - g["center"][0]) / g["axes"][0]) ** 2 + ((yy - g["center"][1]) / g["axes"][1]) ** 2 < 1
    np.testing.assert_array_equal(rec.true_mask, ell.astype(np.uint8))


def test_rendering_centre_aligned_with_truth(seq):
    yy, xx = np.mgrid[0:32, 0:32]
    for r in seq.records[::25]:
        w_ctrl = (r.control_rendering > 0).astype(float)
        w_gt = np.any(r.ground_truth_rgb > 0, axis=0).astype(float)
        for w_a, w_b in ((w_ctrl, w_gt),):
            ca = np.array([(xx * w_a).sum(), (yy * w_a).sum()]) / w_a.sum()
            cb = np.array([(xx * w_b).sum(), (yy * w_b).sum()]) / w_b.sum()
            assert np.all(np.abs(ca - cb) <= 1.0)


def test_resolution_64():
    data = generate_sequence_data(1, 6, 64, 4)
    assert data.frames.shape == (6, 3, 64, 64)
    assert data.renderings.shape == (6, 64, 64)


def test_corpus_balance_and_tokens():
    corpus = generate_prior_corpus(0, 10, [1, 2], length=6)
    counts = {1: 0, 2: 0}
    for s in corpus:
        counts[s.style_id] += 1
        assert all(r.params.style_id == s.style_id for r in s.records)
    assert counts == {1: 5, 2: 5}


def test_corpus_needs_two_styles():
    with pytest.raises(ValueError):
        generate_prior_corpus(0, 4, [1, 1])


def test_style_palettes_separated():
    pals = {s: style_palette(s) for s in STYLES}
    for a in STYLES:
        for b in STYLES:
            if a < b:
                assert np.abs(pals[a] - pals[b]).max() >= 0.1, (a, b)


def test_sequence_disk_roundtrip(tmp_path):
    data = generate_sequence_data(2, 7, 32, 3)
    man = write_sequence(data, tmp_path / "s")
    assert len(man.frames) == man.length == 7
    for names in man.frames:
        for f in names.values():
            assert (tmp_path / "s" / f).exists()
    assert (tmp_path / "s" / "frame_00003_gt.png").exists()
    back = read_sequence(tmp_path / "s")
    np.testing.assert_array_equal(back.frames, data.frames)
    np.testing.assert_array_equal(back.renderings, data.renderings)
    np.testing.assert_array_equal(back.masks, data.masks)
    assert back.pupils == data.pupils
    raw = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert raw["seed"] == 2 and raw["generator_version"]


def test_corpus_disk_roundtrip(tmp_path):
    corpus = generate_prior_corpus(1, 4, [1, 2], length=5)
    manifest = write_corpus(corpus, tmp_path / "corpus")
    assert [e["token"] for e in manifest["sequences"]] == [e["style_id"] for e in manifest["sequences"]]
    back = read_corpus(tmp_path / "corpus")
    assert [s.style_id for s in back] == [s.style_id for s in corpus]
    np.testing.assert_array_equal(back[2].frames, corpus[2].frames)


def test_trajectory_deterministic():
    assert make_trajectory(9, 30, 1) == make_trajectory(9, 30, 1)
