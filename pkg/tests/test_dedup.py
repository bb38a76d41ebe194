import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odst.dedup import (DedupConfig, ImageTensor, audit_csv, dedup_run, gaussian_window, nn_naive,
                        nn_within_radius, ssim)


def _images(n, seed, h=12, w=12, c=3):
    return np.random.default_rng(seed).integers(0, 256, size=(n, h, w, c)).astype(np.uint8) / 255.0


def test_blocked_search_is_bit_identical_to_naive():
    g = np.random.default_rng(0)
    refs = g.random((40, 30))
    corpus = np.concatenate([g.random((300, 30)), refs[:10] + g.normal(scale=0.05, size=(10, 30)),
                             refs[10:15]])
    for radius in (0.5, 2.0, 10.0):
        assert nn_within_radius(corpus, refs, radius, tile=64) == nn_naive(corpus, refs, radius)


def test_blocked_search_ties_pick_lowest_index():
    refs = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    corpus = np.array([[0.5, 0.5], [1.0, 0.0]])
    got = nn_within_radius(corpus, refs, 5.0)
    assert got == nn_naive(corpus, refs, 5.0)
    assert [j for _, j, _ in got] == [0, 0]


def test_single_pixel_change():
    x = np.zeros((12, 12, 3))
    z = x.copy()
    z[0, 0, 0] = 3 / 255
    got = nn_naive(ImageTensor(x).flat(), ImageTensor(z).flat(), 1.0)
    assert got[0][2] == pytest.approx(3 / 255, abs=1e-15)


def test_ssim_constant_images_closed_form():
    a, b = 0.5, 0.25
    c1 = 0.01**2
    expected = (2 * a * b + c1) / (a * a + b * b + c1)
    assert ssim(np.full((16, 16), a), np.full((16, 16), b)) == pytest.approx(expected, rel=1e-12)


def test_ssim_identity_and_symmetry():
    x, z = _images(2, 1)
    assert abs(ssim(x, x) - 1.0) <= 1e-12
    assert abs(ssim(x, z) - ssim(z, x)) <= 1e-12
    with pytest.raises(ValueError):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)))
    assert gaussian_window().sum() == pytest.approx(1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ssim_bounded(seed):
    x, z = _images(2, seed, 11, 11, 1)
    assert -1.0 <= ssim(x, z) <= 1.0 + 1e-12


def test_staged_rules():
    g = np.random.default_rng(2)
    refs = _images(5, 3)
    corpus = _images(20, 4)
    corpus[0] = refs[0]                                          # exact: stage 1
    corpus[1] = np.clip(refs[1] + g.normal(scale=0.02, size=refs[1].shape), 0, 1)  # tiny noise: stage 1
    corpus[2] = np.clip(refs[2] * 0.7 + 0.15, 0, 1)              # contrast change: stage 3 candidate
    cfg = DedupConfig(hard_radius=1.0, candidate_radius=6.0)
    mask, removals = dedup_run(ImageTensor(corpus), [ImageTensor(refs)], cfg)
    stages = {r.corpus_idx: r.stage for r in removals}
    assert stages[0] == 1 and stages[1] == 1 and stages[2] == 3
    assert mask.sum() == len(removals) and not mask[3:].any()
    text = audit_csv(removals)
    assert text.splitlines()[0] == "corpus_idx,stage,ref_set,ref_idx,l2,ssim_dist,perceptual_dist"
    # a strict perceptual metric vetoes stage-3 removals
    veto = DedupConfig(hard_radius=1.0, candidate_radius=6.0, perceptual_metric=lambda x, z: 1.0)
    _, removals = dedup_run(ImageTensor(corpus), [ImageTensor(refs)], veto)
    assert {r.corpus_idx for r in removals} == {0, 1}


def test_raising_radius_never_removes_fewer():
    refs = _images(4, 5)
    g = np.random.default_rng(6)
    corpus = np.clip(np.repeat(refs, 5, axis=0) + g.normal(scale=0.1, size=(20, 12, 12, 3)), 0, 1)
    counts = []
    for r in (0.5, 1.0, 2.0, 4.0):
        mask, _ = dedup_run(ImageTensor(corpus), ImageTensor(refs), DedupConfig(hard_radius=r, candidate_radius=r + 1))
        counts.append(mask.sum())
    assert counts == sorted(counts)


def test_image_container_roundtrip(tmp_path):
    imgs = ImageTensor.from_uint8(np.arange(2 * 4 * 4 * 3, dtype=np.uint8).reshape(2, 4, 4, 3))
    imgs.save(tmp_path / "a.img")
    back = ImageTensor.load(tmp_path / "a.img")
    np.testing.assert_array_equal(back.to_uint8(), imgs.to_uint8())
    (tmp_path / "b.img").write_bytes(b"x" * 40)
    with pytest.raises(ValueError):
        ImageTensor.load(tmp_path / "b.img")


def test_config_validation():
    with pytest.raises(ValueError):
        DedupConfig(hard_radius=10.0, candidate_radius=5.0)
    with pytest.raises(ValueError):
        DedupConfig(ssim_dist_max=0.0)
