"""Synthetic concealed-object data: textured scenes, masks, netpbm I/O.

Each sample is a textured background plus an ellipse-union object. The RGB
image blends an object texture in with strength (1 - kappa): kappa = 1 makes
the object pixel-identical to the background (invisible in RGB), kappa = 0
pastes a plainly different texture. The auxiliary channel always sees the
object: a brightness step plus band-limited Gaussian noise at a chosen
signal-to-noise ratio, optionally degraded by a top-left crop-and-zoom
misalignment. Images are stored as 8-bit binary PGM (P5) / PPM (P6).

A dataset root holds two flavors: `cos/` carries full supervision
(rgb, aux, mask, edge) while `translation/` carries only (rgb, aux) pairs
drawn from a disjoint seed stream, for training the cross-modal translator
on imagery unrelated to the segmentation corpus.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import (ConfigError, DomainError, InvalidDimensions,
                     MalformedHeader, ShapeMismatch)

_COS_KINDS = ("rgb", "aux", "mask", "edge")
_TRANSLATION_KINDS = ("rgb", "aux")


# ---------------------------------------------------------------------------
# texture and geometry


def band_limited_noise(rng, h, w, cutoff=0.08):
    """Smooth [0, 1] texture: white noise with only low frequencies kept."""
    spec = np.fft.rfft2(rng.normal(size=(h, w)))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    spec[np.hypot(fy, fx) > cutoff] = 0.0
    x = np.fft.irfft2(spec, s=(h, w))
    span = np.ptp(x)
    if span == 0:
        return np.full((h, w), 0.5)
    return (x - x.min()) / span


def _rgb_texture(rng, h, w, tint):
    base = band_limited_noise(rng, h, w)
    chans = [np.clip(0.35 + 0.3 * base + tint[c], 0.0, 1.0) for c in range(3)]
    return np.stack(chans)


def _ellipse(rng, h, w):
    cy = rng.uniform(0.25, 0.75) * h
    cx = rng.uniform(0.25, 0.75) * w
    ry = rng.uniform(0.08, 0.3) * h
    rx = rng.uniform(0.08, 0.3) * w
    th = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[:h, :w]
    u = (yy - cy) * np.cos(th) + (xx - cx) * np.sin(th)
    v = -(yy - cy) * np.sin(th) + (xx - cx) * np.cos(th)
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def object_mask(rng, h, w, lo=0.05, hi=0.4, tries=64):
    """Union of 2..5 ellipses with a foreground fraction inside [lo, hi]."""
    for _ in range(tries):
        m = np.zeros((h, w), dtype=bool)
        for _ in range(rng.integers(2, 6)):
            m |= _ellipse(rng, h, w)
        frac = m.mean()
        if lo <= frac <= hi:
            return m.astype(np.float64)
    # deterministic fallback: a centered disk of known area
    yy, xx = np.mgrid[:h, :w]
    r2 = (yy - h / 2.0) ** 2 + (xx - w / 2.0) ** 2
    return (r2 <= 0.2 * h * w / np.pi).astype(np.float64)


def _shift_pad_edge(m, di, dj):
    out = np.empty_like(m)
    src_i = np.clip(np.arange(m.shape[0]) + di, 0, m.shape[0] - 1)
    src_j = np.clip(np.arange(m.shape[1]) + dj, 0, m.shape[1] - 1)
    out[:] = m[src_i[:, None], src_j[None, :]]
    return out


def morph_gradient(mask):
    """3x3 dilation minus 3x3 erosion, windows clamped at the border."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ShapeMismatch(f"morph_gradient expects a 2-D mask, got {mask.shape}")
    hi = mask.copy()
    lo = mask.copy()
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            s = _shift_pad_edge(mask, di, dj)
            np.maximum(hi, s, out=hi)
            np.minimum(lo, s, out=lo)
    return hi - lo


def compose(bg, fg, mask, kappa):
    """rgb = bg + (1 - kappa) * mask * (fg - bg); kappa = 1 hides the object."""
    if not 0.0 <= kappa <= 1.0:
        raise DomainError(f"kappa must lie in [0, 1], got {kappa}")
    if bg.shape != fg.shape:
        raise ShapeMismatch(f"bg {bg.shape} vs fg {fg.shape}")
    return bg + (1.0 - kappa) * mask[None] * (fg - bg)


def boundary_contrast(img, mask):
    """How visible the object rim is: |mean inside - mean outside| per channel
    over the two sides of the 3x3 boundary band, averaged over channels."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    m = np.asarray(mask, dtype=float)
    rim = morph_gradient(m) > 0
    inner = rim & (m > 0.5)
    outer = rim & (m <= 0.5)
    if not inner.any() or not outer.any():
        raise DomainError("mask has no two-sided boundary to measure across")
    gap = img[:, inner].mean(axis=1) - img[:, outer].mean(axis=1)
    return float(np.abs(gap).mean())


# ---------------------------------------------------------------------------
# misalignment


def _resize_1d(n_in, n_out):
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        s = (o + 0.5) * n_in / n_out - 0.5
        s = min(max(s, 0.0), n_in - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        f = s - i0
        m[o, i0] += 1.0 - f
        m[o, i1] += f
    return m


def crop_resize(img, top, left, ch, cw):
    """Cut a window and stretch it back to the full extent (bilinear)."""
    h, w = img.shape[-2], img.shape[-1]
    if not (0 <= top <= h - ch and 0 <= left <= w - cw and ch > 0 and cw > 0):
        raise DomainError(f"window {(top, left, ch, cw)} outside {(h, w)}")
    win = img[..., top:top + ch, left:left + cw]
    if (ch, cw) == (h, w):
        return win.copy()
    rh = _resize_1d(ch, h)
    rw = _resize_1d(cw, w)
    return np.einsum("oh,...hw,pw->...op", rh, win, rw)


def misalign(img, crop_fraction):
    """Keep the top-left fraction of the image and zoom it back to full size.

    crop_fraction = 1 is the identity; smaller fractions push content toward
    the bottom-right by the scale factor 1 / crop_fraction.
    """
    if not 0.0 < crop_fraction <= 1.0:
        raise DomainError(
            f"crop fraction must lie in (0, 1], got {crop_fraction}")
    h, w = img.shape[-2], img.shape[-1]
    ch = max(int(round(h * crop_fraction)), 1)
    cw = max(int(round(w * crop_fraction)), 1)
    return crop_resize(img, 0, 0, ch, cw)


def misalign_sample(sample, crop_fraction):
    """New sample with only the aux stream degraded; everything else shared."""
    out = dict(sample)
    out["aux"] = misalign(sample["aux"], crop_fraction)
    return out


# ---------------------------------------------------------------------------
# one sample


def make_sample(rng, h, w, kappa, snr=10.0, misalign_crop=None):
    if h < 16 or w < 16:
        raise InvalidDimensions(f"need at least 16x16, got {h}x{w}")
    if snr <= 0:
        raise DomainError(f"snr must be positive, got {snr}")
    tint_bg = rng.uniform(-0.1, 0.1, size=3)
    # the object tint sits a fixed distance from the background tint
    tint_fg = tint_bg + np.where(rng.random(size=3) < 0.5, -0.35, 0.35)
    bg = _rgb_texture(rng, h, w, tint_bg)
    fg = _rgb_texture(rng, h, w, tint_fg)
    mask = object_mask(rng, h, w)
    rgb = compose(bg, fg, mask, kappa)
    noise = band_limited_noise(rng, h, w) - 0.5
    std = noise.std()
    if std > 0:
        noise /= std
    # signal step is 0.6, so noise std 0.6 / snr realizes the requested ratio
    aux = np.clip(0.2 + 0.6 * mask + (0.6 / snr) * noise, 0.0, 1.0)
    sample = {
        "rgb": rgb,
        "aux": aux[None],
        "mask": mask[None],
        "edge": morph_gradient(mask)[None],
    }
    if misalign_crop is not None:
        sample = misalign_sample(sample, misalign_crop)
    return sample


def generate(seed, n, h, w, kappa, snr=10.0, misalign_crop=None):
    """n samples from one seeded stream, each tagged with its provenance."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        s = make_sample(rng, h, w, kappa, snr, misalign_crop)
        s["meta"] = {"seed": int(seed), "index": i, "kappa": float(kappa),
                     "snr": float(snr)}
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# netpbm I/O


def _to_u8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, img):
    """img: (H, W) or (1, H, W) floats in [0, 1], stored binary 8-bit."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ShapeMismatch(f"PGM wants one channel, got {img.shape}")
    u8 = _to_u8(img)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(u8.tobytes())


def write_ppm(path, img):
    """img: (3, H, W) floats in [0, 1], stored binary 8-bit."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeMismatch(f"PPM wants (3, H, W), got {img.shape}")
    u8 = _to_u8(img).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (img.shape[2], img.shape[1]))
        f.write(np.ascontiguousarray(u8).tobytes())


def _read_tokens(f, count):
    """Whitespace-separated header tokens, '#' comments skipped."""
    toks = []
    while len(toks) < count:
        ch = f.read(1)
        if not ch:
            raise MalformedHeader("truncated netpbm header")
        if ch in b" \t\r\n":
            continue
        if ch == b"#":
            while ch and ch != b"\n":
                ch = f.read(1)
            continue
        tok = ch
        while True:
            ch = f.read(1)
            if not ch or ch in b" \t\r\n":
                break
            tok += ch
        toks.append(tok)
    return toks


def _read_netpbm(path, magic, channels):
    with open(path, "rb") as f:
        if f.read(2) != magic:
            raise MalformedHeader(f"{path}: expected {magic.decode()} file")
        try:
            w, h, maxval = (int(t) for t in _read_tokens(f, 3))
        except ValueError as e:
            raise MalformedHeader(f"{path}: bad header token ({e})") from None
        if maxval != 255:
            raise MalformedHeader(f"{path}: unsupported maxval {maxval}")
        payload = f.read(h * w * channels)
    if len(payload) != h * w * channels:
        raise MalformedHeader(f"{path}: truncated pixel data")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path):
    return _read_netpbm(path, b"P5", 1)


def read_ppm(path):
    return _read_netpbm(path, b"P6", 3)


# ---------------------------------------------------------------------------
# dataset directories


def _write_sample(dirs, i, sample, kinds):
    for kind in kinds:
        if kind == "rgb":
            write_ppm(dirs["rgb"] / f"{i:05d}.ppm", sample["rgb"])
        else:
            write_pgm(dirs[kind] / f"{i:05d}.pgm", sample[kind])


def generate_dataset(root, n_cos, n_translation, size=64, kappa=1.0,
                     snr=10.0, seed=0, misalign_crop=None,
                     translation_snr=None):
    """Write <root>/{cos,translation}/{kind}/NNNNN.* plus a manifest.

    The cos flavor carries rgb/aux/mask/edge; the translation flavor only
    rgb/aux, generated from a disjoint seed stream. Misalignment, when
    requested, degrades cos aux maps only. translation_snr lets the
    translation pairs be recorded under different sensor conditions than the
    camouflage split (a curated corpus versus hard field data); it defaults
    to the cos snr.
    """
    if size < 16:
        raise InvalidDimensions(f"image size must be at least 16, got {size}")
    root = Path(root)
    t_snr = snr if translation_snr is None else translation_snr
    seeds = np.random.SeedSequence(seed).spawn(2)
    flavors = (("cos", n_cos, _COS_KINDS, misalign_crop, snr, seeds[0]),
               ("translation", n_translation, _TRANSLATION_KINDS, None,
                t_snr, seeds[1]))
    for flavor, n, kinds, crop, f_snr, ss in flavors:
        dirs = {k: root / flavor / k for k in kinds}
        for d in dirs.values():
            d.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(ss)
        for i in range(n):
            s = make_sample(rng, size, size, kappa, f_snr, crop)
            _write_sample(dirs, i, s, kinds)
    manifest = {
        "format_version": 1,
        "size": int(size),
        "kappa": float(kappa),
        "snr": float(snr),
        "translation_snr": float(t_snr),
        "seed": int(seed),
        "n_cos": int(n_cos),
        "n_translation": int(n_translation),
        "misalign_crop": misalign_crop,
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def load_manifest(root):
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise ConfigError(f"no manifest.json under {root}")
    with open(path) as f:
        return json.load(f)


def load_split(root, flavor):
    """Read one flavor back as stacked float arrays in [0, 1].

    cos returns {"rgb": (N, 3, H, W), "aux"/"mask"/"edge": (N, 1, H, W)};
    translation returns rgb and aux only. Masks and edges are re-binarized
    after the 8-bit round trip.
    """
    if flavor not in ("cos", "translation"):
        raise ConfigError(f"unknown flavor {flavor!r}")
    base = Path(root) / flavor
    if not base.is_dir():
        raise ConfigError(f"missing flavor directory {base}")
    kinds = _COS_KINDS if flavor == "cos" else _TRANSLATION_KINDS
    names = sorted(p.name for p in (base / "rgb").iterdir())
    if not names:
        raise ConfigError(f"empty flavor {base}")
    out = {k: [] for k in kinds}
    for name in names:
        stem = os.path.splitext(name)[0]
        for kind in kinds:
            if kind == "rgb":
                out["rgb"].append(read_ppm(base / "rgb" / f"{stem}.ppm"))
            else:
                out[kind].append(read_pgm(base / kind / f"{stem}.pgm"))
    stacked = {k: np.stack(v) for k, v in out.items()}
    for k in ("mask", "edge"):
        if k in stacked:
            stacked[k] = (stacked[k] >= 0.5).astype(np.float64)
    return stacked
