"""Synthetic data generator: geometry, composition, netpbm I/O, datasets."""

import numpy as np
import pytest

from multicos import synth
from multicos.errors import (ConfigError, DomainError, InvalidDimensions,
                             MalformedHeader, ShapeMismatch)

from oracles import morph_gradient_loop


def test_texture_range_and_smoothness(rng):
    for _ in range(5):
        t = synth.band_limited_noise(rng, 48, 40)
        assert t.shape == (48, 40)
        assert t.min() == 0.0 and t.max() == 1.0
        # low-pass: neighboring pixels move much less than the full span
        assert np.abs(np.diff(t, axis=0)).max() < 0.25
        assert np.abs(np.diff(t, axis=1)).max() < 0.25


def test_object_mask_binary_and_area(rng):
    for _ in range(20):
        m = synth.object_mask(rng, 64, 64)
        assert set(np.unique(m)) <= {0.0, 1.0}
        assert 0.05 <= m.mean() <= 0.4


def test_object_mask_fallback_area():
    class AlwaysHuge:
        """Drives every ellipse draw to its maximum extent."""

        def uniform(self, lo, hi, size=None):
            return np.full(size, hi) if size is not None else hi

        def integers(self, lo, hi):
            return hi - 1

    m = synth.object_mask(AlwaysHuge(), 64, 64)
    assert 0.05 <= m.mean() <= 0.4


def test_compose_kappa_one_hides_object_bitwise():
    a = np.zeros((3, 8, 8)) + 0.3
    b = np.ones((3, 8, 8)) * 0.9
    m = np.zeros((8, 8))
    m[2:6, 2:6] = 1.0
    out = synth.compose(a, b, m, 1.0)
    assert out.tobytes() == a.tobytes()


def test_compose_kappa_zero_pastes_foreground():
    a = np.full((3, 8, 8), 0.3)
    b = np.full((3, 8, 8), 0.9)
    m = np.zeros((8, 8))
    m[2:6, 2:6] = 1.0
    out = synth.compose(a, b, m, 0.0)
    # the blend is arithmetic, so exactness holds only to rounding
    assert np.abs(out[:, 2:6, 2:6] - 0.9).max() < 1e-15
    assert np.all(out[:, 0, :] == 0.3)


def test_compose_guards():
    a = np.zeros((3, 8, 8))
    with pytest.raises(DomainError):
        synth.compose(a, a, np.zeros((8, 8)), 1.5)
    with pytest.raises(ShapeMismatch):
        synth.compose(a, np.zeros((3, 8, 9)), np.zeros((8, 8)), 0.5)


def test_kappa_zero_object_plainly_visible(rng):
    for _ in range(8):
        s = synth.make_sample(rng, 64, 64, kappa=0.0)
        assert synth.boundary_contrast(s["rgb"], s["mask"][0]) > 0.2


def test_kappa_one_hides_rgb_but_not_aux(rng):
    for _ in range(8):
        s = synth.make_sample(rng, 64, 64, kappa=1.0, snr=10.0)
        m = s["mask"][0]
        assert synth.boundary_contrast(s["rgb"], m) < 0.02
        assert synth.boundary_contrast(s["aux"], m) > 0.2


def test_boundary_contrast_needs_two_sides():
    with pytest.raises(DomainError):
        synth.boundary_contrast(np.zeros((1, 8, 8)), np.zeros((8, 8)))


def test_snr_controls_aux_noise(rng):
    noisy = synth.make_sample(rng, 64, 64, 1.0, snr=2.0)
    clean = synth.make_sample(rng, 64, 64, 1.0, snr=1000.0)
    off_n = noisy["aux"][0][noisy["mask"][0] == 0]
    off_c = clean["aux"][0][clean["mask"][0] == 0]
    assert off_n.std() > 5 * off_c.std()
    with pytest.raises(DomainError):
        synth.make_sample(rng, 64, 64, 1.0, snr=0.0)


def test_make_sample_size_guard(rng):
    with pytest.raises(InvalidDimensions):
        synth.make_sample(rng, 8, 64, 1.0)
    with pytest.raises(InvalidDimensions):
        synth.make_sample(rng, 64, 15, 1.0)


def test_edge_matches_loop_oracle(rng):
    for _ in range(5):
        m = synth.object_mask(rng, 32, 32)
        assert np.array_equal(synth.morph_gradient(m), morph_gradient_loop(m))


def test_edge_is_dilation_minus_erosion_set_arith():
    m = np.zeros((16, 16))
    m[5:11, 4:12] = 1.0
    e = synth.morph_gradient(m)
    # the rim straddles the boundary: one pixel out and one pixel in
    assert set(np.unique(e)) <= {0.0, 1.0}
    assert e[4, 4] == 1.0 and e[5, 5] == 1.0
    assert e[7, 7] == 0.0 and e[0, 0] == 0.0
    with pytest.raises(ShapeMismatch):
        synth.morph_gradient(np.zeros((1, 16, 16)))


def test_generate_meta_and_determinism():
    a = synth.generate(9, 3, 32, 48, kappa=0.5, snr=8.0)
    b = synth.generate(9, 3, 32, 48, kappa=0.5, snr=8.0)
    assert len(a) == 3
    for sa, sb in zip(a, b):
        for k in ("rgb", "aux", "mask", "edge"):
            assert sa[k].tobytes() == sb[k].tobytes()
    assert a[2]["meta"] == {"seed": 9, "index": 2, "kappa": 0.5, "snr": 8.0}
    assert a[0]["rgb"].shape == (3, 32, 48)
    assert a[0]["mask"].sum() >= 1


def test_pgm_round_trip(tmp_path, rng):
    img = rng.random((1, 20, 24))
    p = tmp_path / "x.pgm"
    synth.write_pgm(p, img)
    back = synth.read_pgm(p)
    assert back.shape == (1, 20, 24)
    assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-12


def test_pgm_binary_and_zero_exact(tmp_path, rng):
    m = (rng.random((12, 12)) > 0.5).astype(np.float64)
    for img in (m, np.zeros((12, 12))):
        p = tmp_path / "m.pgm"
        synth.write_pgm(p, img)
        assert np.array_equal(synth.read_pgm(p)[0], img)


def test_ppm_round_trip(tmp_path, rng):
    img = rng.random((3, 10, 14))
    p = tmp_path / "x.ppm"
    synth.write_ppm(p, img)
    back = synth.read_ppm(p)
    assert back.shape == (3, 10, 14)
    assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-12


def test_netpbm_single_line_header(tmp_path):
    p = tmp_path / "s.pgm"
    p.write_bytes(b"P5 4 4 255\n" + bytes(range(16)))
    img = synth.read_pgm(p)
    assert img.shape == (1, 4, 4)
    assert img[0, 3, 3] == 15.0 / 255.0


def test_netpbm_header_with_comments(tmp_path):
    raw = b"P5\n# a comment line\n4 # trailing\n2\n255\n" + bytes(range(8))
    p = tmp_path / "c.pgm"
    p.write_bytes(raw)
    img = synth.read_pgm(p)
    assert img.shape == (1, 2, 4)
    assert img[0, 1, 3] == 7.0 / 255.0


def test_netpbm_malformed(tmp_path):
    cases = [
        b"P6\n4 2\n255\n" + bytes(8),            # wrong magic for pgm
        b"P5\n4 2\n65535\n" + bytes(16),         # unsupported maxval
        b"P5\n4 2\n255\n" + bytes(3),            # truncated pixels
        b"P5\n4\n",                              # truncated header
        b"P5\nfour 2\n255\n" + bytes(8),         # non-numeric token
    ]
    for i, raw in enumerate(cases):
        p = tmp_path / f"bad{i}.pgm"
        p.write_bytes(raw)
        with pytest.raises(MalformedHeader):
            synth.read_pgm(p)


def test_pgm_shape_guards(tmp_path):
    with pytest.raises(ShapeMismatch):
        synth.write_pgm(tmp_path / "a.pgm", np.zeros((3, 4, 4)))
    with pytest.raises(ShapeMismatch):
        synth.write_ppm(tmp_path / "a.ppm", np.zeros((1, 4, 4)))


def test_crop_resize_identity_and_guards(rng):
    img = rng.random((2, 12, 12))
    assert np.array_equal(synth.crop_resize(img, 0, 0, 12, 12), img)
    with pytest.raises(DomainError):
        synth.crop_resize(img, 8, 0, 6, 6)


def test_misalign_identity_at_full_crop(rng):
    img = rng.random((1, 16, 16))
    assert np.array_equal(synth.misalign(img, 1.0), img)
    with pytest.raises(DomainError):
        synth.misalign(img, 0.0)


def test_misalign_displaces_marker_by_scale_factor():
    # a marker inside the kept window lands at (p + 0.5) / crop - 0.5
    img = np.zeros((1, 32, 32))
    img[0, 20:23, 14:17] = 1.0
    out = synth.misalign(img, 0.9)
    ch = round(32 * 0.9)
    ys, xs = np.nonzero(out[0] > 1e-9)
    wsum = out[0][ys, xs]
    cy = (ys * wsum).sum() / wsum.sum()
    cx = (xs * wsum).sum() / wsum.sum()
    assert abs(cy - ((21.0 + 0.5) * 32 / ch - 0.5)) < 0.5
    assert abs(cx - ((15.0 + 0.5) * 32 / ch - 0.5)) < 0.5
    assert cy > 21.0 and cx > 15.0


def test_misalign_sample_touches_only_aux(rng):
    s = synth.make_sample(rng, 32, 32, 0.5)
    out = synth.misalign_sample(s, 0.9)
    for k in ("rgb", "mask", "edge"):
        assert out[k].tobytes() == s[k].tobytes()
    assert not np.array_equal(out["aux"], s["aux"])


def test_make_sample_shapes_and_ranges(rng):
    s = synth.make_sample(rng, 48, 48, kappa=0.7, misalign_crop=0.9)
    assert s["rgb"].shape == (3, 48, 48)
    for k in ("aux", "mask", "edge"):
        assert s[k].shape == (1, 48, 48)
    for k, v in s.items():
        assert v.min() >= 0.0 and v.max() <= 1.0, k
    assert set(np.unique(s["mask"])) == {0.0, 1.0}


def test_generate_and_load_dataset(tmp_path):
    root = tmp_path / "data"
    man = synth.generate_dataset(root, n_cos=3, n_translation=2, size=16,
                                 kappa=1.0, seed=7)
    assert man["n_cos"] == 3 and man["n_translation"] == 2
    assert sorted(p.name for p in (root / "cos" / "rgb").iterdir()) == \
        ["00000.ppm", "00001.ppm", "00002.ppm"]
    assert (root / "cos" / "edge" / "00002.pgm").exists()
    assert (root / "translation" / "aux" / "00001.pgm").exists()
    # the translation flavor carries no supervision
    assert not (root / "translation" / "mask").exists()
    assert synth.load_manifest(root)["kappa"] == 1.0

    cos = synth.load_split(root, "cos")
    tr = synth.load_split(root, "translation")
    assert cos["rgb"].shape == (3, 3, 16, 16)
    assert cos["aux"].shape == (3, 1, 16, 16)
    assert set(tr.keys()) == {"rgb", "aux"}
    assert tr["rgb"].shape == (2, 3, 16, 16)
    for k in ("mask", "edge"):
        assert set(np.unique(cos[k])) <= {0.0, 1.0}
    assert cos["rgb"].min() >= 0.0 and cos["rgb"].max() <= 1.0
    # disjoint seed streams: the flavors do not repeat each other
    assert not np.array_equal(cos["rgb"][:2], tr["rgb"])

    with pytest.raises(ConfigError):
        synth.load_split(root, "val")
    with pytest.raises(ConfigError):
        synth.load_manifest(tmp_path / "elsewhere")
    with pytest.raises(InvalidDimensions):
        synth.generate_dataset(tmp_path / "tiny", 1, 0, size=8)


def test_generate_dataset_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    synth.generate_dataset(a, 2, 1, size=16, kappa=0.5, seed=3)
    synth.generate_dataset(b, 2, 1, size=16, kappa=0.5, seed=3)
    for rel in ["cos/rgb/00001.ppm", "cos/aux/00000.pgm",
                "cos/mask/00000.pgm", "cos/edge/00000.pgm",
                "translation/rgb/00000.ppm"]:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    c = tmp_path / "c"
    synth.generate_dataset(c, 2, 1, size=16, kappa=0.5, seed=4)
    assert (a / "cos/rgb/00000.ppm").read_bytes() != \
        (c / "cos/rgb/00000.ppm").read_bytes()


def test_translation_snr_touches_only_translation_aux(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    synth.generate_dataset(a, 2, 2, size=16, snr=2.5, seed=3)
    man = synth.generate_dataset(b, 2, 2, size=16, snr=2.5, seed=3,
                                 translation_snr=10.0)
    assert man["snr"] == 2.5 and man["translation_snr"] == 10.0
    assert synth.load_manifest(a)["translation_snr"] == 2.5
    # same seed: the cos flavor and the pair geometry are untouched, only
    # the translation aux noise level moves
    for rel in ["cos/rgb/00000.ppm", "cos/aux/00001.pgm",
                "cos/mask/00000.pgm", "translation/rgb/00000.ppm"]:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    assert (a / "translation/aux/00000.pgm").read_bytes() != \
        (b / "translation/aux/00000.pgm").read_bytes()
    clean = synth.load_split(b, "translation")["aux"]
    noisy = synth.load_split(a, "translation")["aux"]
    assert clean.std() < noisy.std()
