"""Image I/O, bicubic resampling, patch sampling and Y-channel metrics.

Images are float arrays in [0, 1], channel-first (3, h, w).  PNG files are
read and written through OpenCV so both 8-bit and 16-bit depths round-trip
(8-bit values map to [0, 1] by /255, 16-bit by /65535).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np


# ---------------------------------------------------------------------------
# I/O


def load_image(path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValueError(f"could not read image {path}")
    if raw.ndim == 2:
        raw = raw[:, :, None].repeat(3, axis=2)
    if raw.shape[2] == 4:
        raw = raw[:, :, :3]
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    img = raw[:, :, ::-1].astype(np.float64) / scale  # BGR -> RGB
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1)


def save_image(path, img: np.ndarray, bitdepth: int = 8) -> None:
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, h, w) image, got shape {img.shape}")
    if bitdepth == 8:
        data = np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8)
    elif bitdepth == 16:
        data = np.round(np.clip(img, 0, 1) * 65535.0).astype(np.uint16)
    else:
        raise ValueError(f"bitdepth must be 8 or 16, got {bitdepth}")
    bgr = data.transpose(1, 2, 0)[:, :, ::-1]
    if not cv2.imwrite(str(path), bgr):
        raise ValueError(f"could not write image {path}")


def list_images(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.png"))


def load_dataset(hr_dir, scale: int, lr_cache: bool = False):
    """Load HR images and their LR counterparts.

    LR images are bicubic downscales computed on the fly; with ``lr_cache``
    they are written once to the sibling directory ``<hr_dir>_lrx<scale>``
    as 16-bit PNGs and reused on later calls.
    """
    hr_paths = list_images(hr_dir)
    if not hr_paths:
        raise ValueError(f"no PNG images in {hr_dir}")
    hr_images = [load_image(p) for p in hr_paths]
    if not lr_cache:
        return hr_images, [bicubic_downscale(im, scale) for im in hr_images]
    cache = Path(str(Path(hr_dir)).rstrip("/\\") + f"_lrx{scale}")
    cache.mkdir(exist_ok=True)
    lr_images = []
    for path, hr in zip(hr_paths, hr_images):
        target = cache / path.name
        if not target.exists():
            save_image(target, bicubic_downscale(hr, scale), bitdepth=16)
        lr = load_image(target)
        want = (3, hr.shape[-2] // scale, hr.shape[-1] // scale)
        if lr.shape != want:
            raise ValueError(
                f"cached LR {target} has shape {lr.shape}, expected {want}; "
                f"delete the cache directory to regenerate"
            )
        lr_images.append(lr)
    return hr_images, lr_images


# ---------------------------------------------------------------------------
# bicubic resampling (cubic convolution, a = -0.5, edge clamped)


def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; forms a partition of unity."""
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    out = np.where(
        t <= 1,
        (a + 2) * t3 - (a + 3) * t2 + 1,
        np.where(t < 2, a * t3 - 5 * a * t2 + 8 * a * t - 4 * a, 0.0),
    )
    return out


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) row-resampling operator with center alignment."""
    ratio = n_in / n_out
    dst = np.arange(n_out)
    src = (dst + 0.5) * ratio - 0.5
    base = np.floor(src).astype(int)
    mat = np.zeros((n_out, n_in))
    for tap in range(-1, 3):
        idx = np.clip(base + tap, 0, n_in - 1)  # edge clamp
        wgt = cubic_kernel(src - (base + tap))
        np.add.at(mat, (dst, idx), wgt)
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable cubic resize of a (..., h, w) array to (..., out_h, out_w)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    h, w = img.shape[-2:]
    mh = _resample_matrix(h, out_h)
    mw = _resample_matrix(w, out_w)
    out = np.einsum("oh,...hw->...ow", mh, img)
    return np.einsum("pw,...ow->...op", mw, out)


def bicubic_downscale(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[-2:]
    return bicubic_resize(img, h // scale, w // scale)


# ---------------------------------------------------------------------------
# metrics (Y channel, BT.601 studio swing)


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """(3, h, w) RGB in [0, 1] -> (h, w) luma in [16/255, 235/255]."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, h, w) image, got shape {img.shape}")
    r, g, b = img[0], img[1], img[2]
    return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0


def psnr(a: np.ndarray, b: np.ndarray, shave: int = 0) -> float:
    """10*log10(1/MSE) for [0, 1] range images; +inf when identical."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if shave:
        a = a[..., shave:-shave, shave:-shave]
        b = b[..., shave:-shave, shave:-shave]
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1-D window ``g``."""
    k = g.size
    h, w = img.shape
    tmp = np.zeros((h, w - k + 1))
    for i in range(k):
        tmp += g[i] * img[:, i : i + w - k + 1]
    out = np.zeros((h - k + 1, w - k + 1))
    for i in range(k):
        out += g[i] * tmp[i : i + h - k + 1, :]
    return out


def ssim(a: np.ndarray, b: np.ndarray, shave: int = 0) -> float:
    """Mean local SSIM with an 11x11 Gaussian window, sigma 1.5.

    Stabilizers C1 = 0.01^2 and C2 = 0.03^2 in [0, 1] units.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError(f"ssim expects single-channel images, got ndim={a.ndim}")
    if shave:
        a = a[shave:-shave, shave:-shave]
        b = b[shave:-shave, shave:-shave]
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    g = _gaussian_window()
    c1, c2 = 0.01**2, 0.03**2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def y_metrics(sr: np.ndarray, hr: np.ndarray, shave: int) -> tuple[float, float]:
    """Y-channel (PSNR, SSIM) between two RGB images."""
    ya, yb = rgb_to_y(sr), rgb_to_y(hr)
    return psnr(ya, yb, shave), ssim(ya, yb, shave)


# ---------------------------------------------------------------------------
# patch sampling


@dataclass
class PatchPair:
    lr: np.ndarray  # (3, p, p)
    hr: np.ndarray  # (3, s*p, s*p)
    lr_y: int
    lr_x: int


def _augment(lr, hr, flip: bool, quarter_turns: int):
    if flip:
        lr = lr[:, :, ::-1]
        hr = hr[:, :, ::-1]
    if quarter_turns:
        lr = np.rot90(lr, quarter_turns, axes=(1, 2))
        hr = np.rot90(hr, quarter_turns, axes=(1, 2))
    return np.ascontiguousarray(lr), np.ascontiguousarray(hr)


def sample_patches(
    hr_images: list[np.ndarray],
    scale: int,
    patch: int,
    count: int,
    rng: np.random.Generator,
    augment: bool = True,
    lr_images: list[np.ndarray] | None = None,
) -> list[PatchPair]:
    """Uniform random aligned LR/HR crops with flip / 90-degree augmentation.

    The LR crop is ``patch`` pixels square; the HR crop is the exactly
    scale-aligned region.  LR images default to bicubic downscales of the
    HR images.  Images too small for a crop are skipped with a warning.
    """
    if lr_images is None:
        lr_images = [bicubic_downscale(im, scale) for im in hr_images]
    usable = []
    for i, (hr, lr) in enumerate(zip(hr_images, lr_images)):
        if lr.shape[-2] < patch or lr.shape[-1] < patch:
            warnings.warn(f"image {i} too small for a {patch}px LR crop; skipped")
            continue
        usable.append((hr, lr))
    if not usable:
        raise ValueError("no image is large enough for the requested patch size")
    pairs = []
    for _ in range(count):
        hr, lr = usable[int(rng.integers(len(usable)))]
        y = int(rng.integers(lr.shape[-2] - patch + 1))
        x = int(rng.integers(lr.shape[-1] - patch + 1))
        lp = lr[:, y : y + patch, x : x + patch]
        hp = hr[:, y * scale : (y + patch) * scale, x * scale : (x + patch) * scale]
        if augment:
            flip = bool(rng.integers(2))
            turns = int(rng.integers(4))
            lp, hp = _augment(lp, hp, flip, turns)
        else:
            lp, hp = np.ascontiguousarray(lp), np.ascontiguousarray(hp)
        pairs.append(PatchPair(lr=lp, hr=hp, lr_y=y, lr_x=x))
    return pairs
