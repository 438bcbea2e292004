"""Weak and strong augmentations for vector and image batches.

Vectors: weak = Gaussian jitter (sigma 0.05); strong = jitter (sigma 0.2)
plus per-feature dropout to zero with p = 0.2. Inputs are standardised, so
zero is the feature mean.

Images (N, C, H, W): weak = reflect-pad-4 random crop + horizontal flip;
strong = weak followed by two distinct ops drawn from contrast,
brightness, rotation (up to 30 degrees) and cutout.
"""

import numpy as np
from scipy import ndimage

WEAK_SIGMA = 0.05
STRONG_SIGMA = 0.2
FEATURE_DROP = 0.2
CROP_PAD = 4
STRONG_OPS = ("contrast", "brightness", "rotate", "cutout")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def crop_flip(images, offsets, flips, pad=CROP_PAD):
    """Crop each padded image at ``offsets[i]`` and mirror where ``flips[i]``."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = offsets[i]
        patch = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = patch[:, :, ::-1] if flips[i] else patch
    return out


def augment_weak(x, seed, kind="vector"):
    rng = _rng(seed)
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return x.copy()
    if kind == "vector":
        return x + WEAK_SIGMA * rng.standard_normal(x.shape)
    offsets = rng.integers(0, 2 * CROP_PAD + 1, size=(len(x), 2))
    flips = rng.random(len(x)) < 0.5
    return crop_flip(x, offsets, flips)


def cutout(image, centre, size, fill):
    out = image.copy()
    h, w = image.shape[-2:]
    y0, x0 = centre[0] - size // 2, centre[1] - size // 2
    # the square is clipped at every border, not shifted inside
    out[..., max(0, y0):min(h, y0 + size), max(0, x0):min(w, x0 + size)] = fill
    return out


def _apply_op(op, img, rng, fill):
    if op == "contrast":
        factor = rng.uniform(0.5, 1.5)
        m = img.mean()
        return np.clip(m + factor * (img - m), 0.0, 1.0)
    if op == "brightness":
        return np.clip(img + rng.uniform(-0.3, 0.3), 0.0, 1.0)
    if op == "rotate":
        angle = rng.uniform(-30.0, 30.0)
        return ndimage.rotate(img, angle, axes=(1, 2), reshape=False, order=1,
                              mode="constant", cval=fill)
    size = int(rng.integers(4, img.shape[-1] // 2 + 1))
    centre = rng.integers(0, img.shape[-1], size=2)
    return cutout(img, centre, size, fill)


def augment_strong(x, seed, kind="vector", fill=0.0):
    rng = _rng(seed)
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return x.copy()
    if kind == "vector":
        noisy = x + STRONG_SIGMA * rng.standard_normal(x.shape)
        keep = rng.random(x.shape) >= FEATURE_DROP
        return np.where(keep, noisy, 0.0)
    out = augment_weak(x, rng, kind="image")
    for i in range(len(out)):
        for op in rng.choice(STRONG_OPS, size=2, replace=False):
            out[i] = _apply_op(op, out[i], rng, fill)
    return out
