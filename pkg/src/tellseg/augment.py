"""Grouped probabilistic augmentation: plan a trace, then apply it to image+mask.

Pipeline stages, in fixed order: a pre stage (RandomCrop always, Flip and
RandomRotate90 at p=0.5 each), three optional groups fired at their own
probabilities (Geometric 0.2, ColorSpace 0.5, KernelFilters 0.5) whose member
transforms then fire independently at their listed probabilities, and a
closing Resize to the model input dims. Masks receive geometric transforms
only (nearest-neighbor), photometric and kernel transforms touch the image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve, uniform_filter

from .errors import ConfigError, ShapeError

GEOMETRIC_TRANSFORMS = frozenset(
    {"RandomCrop", "Flip", "RandomRotate90", "GridDistortion", "RandomGridShuffle", "Resize"}
)

GROUPS = (
    ("Geometric", 0.2, (("GridDistortion", 0.4), ("RandomGridShuffle", 0.6))),
    (
        "ColorSpace",
        0.5,
        (
            ("CLAHE", 0.4),
            ("RandomBrightnessContrast", 0.8),
            ("ChannelShuffle", 0.1),
            ("ColorJitter", 0.2),
            ("HueSaturationValue", 0.2),
        ),
    ),
    (
        "KernelFilters",
        0.5,
        (("Blur", 0.4), ("GaussNoise", 0.4), ("MotionBlur", 0.2), ("Sharpen", 0.1)),
    ),
)

PRE_STAGE = (("RandomCrop", 1.0), ("Flip", 0.5), ("RandomRotate90", 0.5))


@dataclass(frozen=True)
class AugmentSpec:
    """Stage/group/member probabilities plus per-transform parameter ranges."""

    resize_target: tuple = (64, 64)
    crop_fraction: float = 0.875
    pre: tuple = PRE_STAGE
    groups: tuple = GROUPS
    grid_distort_steps: int = 5
    grid_distort_limit: float = 0.3
    grid_shuffle_cells: int = 3
    clahe_clip: float = 4.0
    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    jitter: tuple = (0.2, 0.2, 0.2, 0.1)  # brightness, contrast, saturation, hue
    hsv_shift: tuple = (20.0, 30.0, 20.0)  # of 255
    blur_kernels: tuple = (3, 5, 7)
    noise_sigma: tuple = (0.01, 0.05)
    sharpen_amount: tuple = (0.2, 0.5)

    def __post_init__(self):
        probs = [p for _, p in self.pre]
        for _, gp, members in self.groups:
            probs.append(gp)
            probs.extend(p for _, p in members)
        if any(not (0.0 <= p <= 1.0) for p in probs):
            raise ConfigError("augment: all probabilities must lie in [0,1]")
        if not (0.0 < self.crop_fraction <= 1.0):
            raise ConfigError(f"augment: crop_fraction {self.crop_fraction} outside (0,1]")


@dataclass
class AugmentTrace:
    """One realized transform sequence: ordered (name, params) plus draw record."""

    steps: list
    seed: int | None = None
    group_hits: dict = field(default_factory=dict)

    def names(self) -> list:
        return [name for name, _ in self.steps]

    def validate(self) -> "AugmentTrace":
        names = self.names()
        if names.count("RandomCrop") != 1 or names[0] != "RandomCrop":
            raise ConfigError("trace must start with exactly one RandomCrop")
        if names.count("Resize") != 1 or names[-1] != "Resize":
            raise ConfigError("trace must end with exactly one Resize")
        return self


def plan(spec: AugmentSpec, rng: np.random.Generator, seed: int | None = None) -> AugmentTrace:
    """Draw one augmentation trace with all parameters sampled and recorded."""
    steps = []
    for name, p in spec.pre:
        if p >= 1.0 or rng.random() < p:
            steps.append((name, _sample_params(name, spec, rng)))
    hits = {}
    for gname, gp, members in spec.groups:
        fired = rng.random() < gp
        hits[gname] = fired
        if not fired:
            continue
        for name, p in members:
            if rng.random() < p:
                steps.append((name, _sample_params(name, spec, rng)))
    steps.append(("Resize", {"height": spec.resize_target[0], "width": spec.resize_target[1]}))
    return AugmentTrace(steps=steps, seed=seed, group_hits=hits).validate()


def _sample_params(name: str, spec: AugmentSpec, rng: np.random.Generator) -> dict:
    if name == "RandomCrop":
        return {
            "fraction": spec.crop_fraction,
            "u": float(rng.random()),
            "v": float(rng.random()),
        }
    if name == "Flip":
        return {"axis": "horizontal" if rng.random() < 0.5 else "vertical"}
    if name == "RandomRotate90":
        return {"k": int(rng.integers(1, 4))}
    if name == "GridDistortion":
        lim = spec.grid_distort_limit
        return {
            "steps": spec.grid_distort_steps,
            "stretch_x": [float(v) for v in rng.uniform(1 - lim, 1 + lim, spec.grid_distort_steps)],
            "stretch_y": [float(v) for v in rng.uniform(1 - lim, 1 + lim, spec.grid_distort_steps)],
        }
    if name == "RandomGridShuffle":
        n = spec.grid_shuffle_cells
        return {"cells": n, "perm": [int(v) for v in rng.permutation(n * n)]}
    if name == "CLAHE":
        return {"clip": spec.clahe_clip, "grid": 8}
    if name == "RandomBrightnessContrast":
        return {
            "brightness": float(rng.uniform(-spec.brightness_limit, spec.brightness_limit)),
            "contrast": float(rng.uniform(1 - spec.contrast_limit, 1 + spec.contrast_limit)),
        }
    if name == "ChannelShuffle":
        return {"perm": [int(v) for v in rng.permutation(3)]}
    if name == "ColorJitter":
        b, c, s, h = spec.jitter
        return {
            "brightness": float(rng.uniform(1 - b, 1 + b)),
            "contrast": float(rng.uniform(1 - c, 1 + c)),
            "saturation": float(rng.uniform(1 - s, 1 + s)),
            "hue": float(rng.uniform(-h, h)),
        }
    if name == "HueSaturationValue":
        dh, ds, dv = spec.hsv_shift
        return {
            "dh": float(rng.uniform(-dh, dh)),
            "ds": float(rng.uniform(-ds, ds)),
            "dv": float(rng.uniform(-dv, dv)),
        }
    if name == "Blur":
        return {"kernel": int(rng.choice(spec.blur_kernels))}
    if name == "GaussNoise":
        return {
            "sigma": float(rng.uniform(*spec.noise_sigma)),
            "seed": int(rng.integers(0, 2**31 - 1)),
        }
    if name == "MotionBlur":
        return {"kernel": int(rng.choice(spec.blur_kernels)), "direction": int(rng.integers(0, 4))}
    if name == "Sharpen":
        return {"amount": float(rng.uniform(*spec.sharpen_amount))}
    raise ConfigError(f"augment: unknown transform {name!r}")


def apply(trace: AugmentTrace, image: np.ndarray, mask: np.ndarray, mask_photometric: bool = False):
    """Replay a trace on an image (C,H,W in [0,1]) and its binary mask (H,W)."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)
    if image.ndim != 3:
        raise ShapeError(f"apply: image must be (C,H,W), got {image.shape}")
    if mask.shape != image.shape[1:]:
        raise ShapeError(f"apply: mask {mask.shape} does not match image {image.shape[1:]}")
    mask = mask.astype(np.float64)
    for name, params in trace.steps:
        image = apply_to_image(name, image, params)
        if name in GEOMETRIC_TRANSFORMS:
            mask = apply_to_mask(name, mask, params)
        elif mask_photometric:
            mask = apply_to_image(name, np.repeat(mask[None], 3, axis=0), params)[0]
    return image, (mask >= 0.5).astype(np.uint8)


def apply_to_image(name: str, image: np.ndarray, params: dict) -> np.ndarray:
    fn = _IMAGE_KERNELS[name]
    return fn(image, params)


def apply_to_mask(name: str, mask: np.ndarray, params: dict) -> np.ndarray:
    fn = _MASK_KERNELS[name]
    return fn(mask, params)


def format_trace(sample_id: str, trace: AugmentTrace) -> str:
    """Audit-log line: ``sample_id: name(params), name(params), ...``"""
    parts = []
    for name, params in trace.steps:
        inner = ", ".join(f"{k}={_fmt(v)}" for k, v in params.items())
        parts.append(f"{name}({inner})")
    return f"{sample_id}: " + ", ".join(parts)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, list):
        return "[" + ",".join(_fmt(x) for x in v) + "]"
    return str(v)


# ---------------------------------------------------------------------------
# geometric kernels (shared by image and mask paths)


def crop(a: np.ndarray, params: dict) -> np.ndarray:
    h, w = a.shape[-2], a.shape[-1]
    ch = max(1, int(round(h * params["fraction"])))
    cw = max(1, int(round(w * params["fraction"])))
    top = int(round(params["u"] * (h - ch)))
    left = int(round(params["v"] * (w - cw)))
    return a[..., top : top + ch, left : left + cw]


def flip(a: np.ndarray, params: dict) -> np.ndarray:
    axis = -1 if params["axis"] == "horizontal" else -2
    return np.flip(a, axis=axis)


def rot90(a: np.ndarray, params: dict) -> np.ndarray:
    return np.rot90(a, k=params["k"], axes=(-2, -1))


def _distort_axis_map(n: int, stretch) -> np.ndarray:
    """Monotone piecewise-linear map: output position -> source position on [0, n]."""
    steps = len(stretch)
    src_knots = np.linspace(0.0, n, steps + 1)
    widths = (n / steps) * np.asarray(stretch, dtype=float)
    dst_knots = np.concatenate([[0.0], np.cumsum(widths)])
    dst_knots *= n / dst_knots[-1]
    dst_pos = np.arange(n) + 0.5
    return np.interp(dst_pos, dst_knots, src_knots) - 0.5


def _sample_grid(a: np.ndarray, rowf: np.ndarray, colf: np.ndarray, nearest: bool) -> np.ndarray:
    h, w = a.shape[-2], a.shape[-1]
    rowf = np.clip(rowf, 0.0, h - 1.0)
    colf = np.clip(colf, 0.0, w - 1.0)
    if nearest:
        return a[..., np.rint(rowf).astype(int)[:, None], np.rint(colf).astype(int)[None, :]]
    r0 = np.floor(rowf).astype(int)
    c0 = np.floor(colf).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rowf - r0)[:, None]
    fc = (colf - c0)[None, :]
    r0 = r0[:, None]
    r1 = r1[:, None]
    c0 = c0[None, :]
    c1 = c1[None, :]
    return (
        a[..., r0, c0] * (1 - fr) * (1 - fc)
        + a[..., r0, c1] * (1 - fr) * fc
        + a[..., r1, c0] * fr * (1 - fc)
        + a[..., r1, c1] * fr * fc
    )


def grid_distortion(a: np.ndarray, params: dict, nearest: bool) -> np.ndarray:
    rowf = _distort_axis_map(a.shape[-2], params["stretch_y"])
    colf = _distort_axis_map(a.shape[-1], params["stretch_x"])
    return _sample_grid(a, rowf, colf, nearest)


def grid_shuffle(a: np.ndarray, params: dict) -> np.ndarray:
    n = params["cells"]
    perm = params["perm"]
    h, w = a.shape[-2], a.shape[-1]
    rb = np.linspace(0, h, n + 1).astype(int)
    cb = np.linspace(0, w, n + 1).astype(int)
    cells = [(rb[i], rb[i + 1], cb[j], cb[j + 1]) for i in range(n) for j in range(n)]
    shapes = [(r1 - r0, c1 - c0) for r0, r1, c0, c1 in cells]
    out = a.copy()
    # shuffle only within same-shape groups so the rectangle packing is preserved
    for shape in sorted(set(shapes)):
        members = [k for k in range(len(cells)) if shapes[k] == shape]
        source = [k for k in perm if k in set(members)]
        for dst, src in zip(members, source):
            r0, r1, c0, c1 = cells[dst]
            s0, s1, t0, t1 = cells[src]
            out[..., r0:r1, c0:c1] = a[..., s0:s1, t0:t1]
    return out


def resize(a: np.ndarray, params: dict, nearest: bool) -> np.ndarray:
    oh, ow = params["height"], params["width"]
    h, w = a.shape[-2], a.shape[-1]
    rowf = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    colf = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    return _sample_grid(a, rowf, colf, nearest)


# ---------------------------------------------------------------------------
# photometric / kernel-filter kernels (image only)


def clahe(image: np.ndarray, params: dict) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization, per channel, 8x8 tile grid."""
    grid = params.get("grid", 8)
    clip = params["clip"]
    out = np.empty_like(image)
    for c in range(image.shape[0]):
        out[c] = _clahe_channel(image[c], clip, grid)
    return out


def _clahe_channel(chan: np.ndarray, clip: float, grid: int) -> np.ndarray:
    h, w = chan.shape
    q = np.clip(np.rint(chan * 255.0), 0, 255).astype(int)
    rb = np.linspace(0, h, grid + 1).astype(int)
    cb = np.linspace(0, w, grid + 1).astype(int)
    luts = np.empty((grid, grid, 256))
    for i in range(grid):
        for j in range(grid):
            tile = q[rb[i] : rb[i + 1], cb[j] : cb[j + 1]]
            npix = max(tile.size, 1)
            hist = np.bincount(tile.ravel(), minlength=256).astype(float)
            limit = max(clip * npix / 256.0, 1.0)
            excess = np.maximum(hist - limit, 0.0).sum()
            hist = np.minimum(hist, limit) + excess / 256.0
            cdf = np.cumsum(hist)
            luts[i, j] = cdf / npix * 255.0
    tile_rc = (rb[:-1] + rb[1:]) / 2.0
    tile_cc = (cb[:-1] + cb[1:]) / 2.0
    rows = np.arange(h)
    cols = np.arange(w)
    ti = np.clip(np.searchsorted(tile_rc, rows) - 1, 0, grid - 2)
    tj = np.clip(np.searchsorted(tile_cc, cols) - 1, 0, grid - 2)
    fr = np.clip((rows - tile_rc[ti]) / np.maximum(tile_rc[ti + 1] - tile_rc[ti], 1e-9), 0, 1)
    fc = np.clip((cols - tile_cc[tj]) / np.maximum(tile_cc[tj + 1] - tile_cc[tj], 1e-9), 0, 1)
    TI = ti[:, None]
    TJ = tj[None, :]
    v00 = luts[TI, TJ, q]
    v01 = luts[TI, TJ + 1, q]
    v10 = luts[TI + 1, TJ, q]
    v11 = luts[TI + 1, TJ + 1, q]
    FR = fr[:, None]
    FC = fc[None, :]
    blended = v00 * (1 - FR) * (1 - FC) + v01 * (1 - FR) * FC + v10 * FR * (1 - FC) + v11 * FR * FC
    return np.clip(blended / 255.0, 0.0, 1.0)


def brightness_contrast(image: np.ndarray, params: dict) -> np.ndarray:
    out = (image - 0.5) * params["contrast"] + 0.5 + params["brightness"]
    return np.clip(out, 0.0, 1.0)


def channel_shuffle(image: np.ndarray, params: dict) -> np.ndarray:
    return image[list(params["perm"])]


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    r, g, b = image
    maxc = image.max(axis=0)
    minc = image.min(axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def color_jitter(image: np.ndarray, params: dict) -> np.ndarray:
    out = np.clip(image * params["brightness"], 0.0, 1.0)
    gray = 0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]
    out = np.clip(out * params["contrast"] + gray.mean() * (1.0 - params["contrast"]), 0.0, 1.0)
    out = np.clip(out * params["saturation"] + gray[None] * (1.0 - params["saturation"]), 0.0, 1.0)
    if params["hue"]:
        hsv = rgb_to_hsv(out)
        hsv[0] = (hsv[0] + params["hue"]) % 1.0
        out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return out


def hue_saturation_value(image: np.ndarray, params: dict) -> np.ndarray:
    hsv = rgb_to_hsv(np.clip(image, 0.0, 1.0))
    hsv[0] = (hsv[0] + params["dh"] / 255.0) % 1.0
    hsv[1] = np.clip(hsv[1] + params["ds"] / 255.0, 0.0, 1.0)
    hsv[2] = np.clip(hsv[2] + params["dv"] / 255.0, 0.0, 1.0)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def box_blur(image: np.ndarray, params: dict) -> np.ndarray:
    k = params["kernel"]
    if k not in (3, 5, 7):
        raise ConfigError(f"Blur: kernel {k} not in (3,5,7)")
    return uniform_filter(image, size=(1, k, k), mode="reflect")


def gauss_noise(image: np.ndarray, params: dict) -> np.ndarray:
    sigma = params["sigma"]
    if sigma < 0:
        raise ConfigError(f"GaussNoise: sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return image
    rng = np.random.default_rng(params["seed"])
    return np.clip(image + rng.standard_normal(image.shape) * sigma, 0.0, 1.0)


def motion_blur(image: np.ndarray, params: dict) -> np.ndarray:
    k = params["kernel"]
    if k not in (3, 5, 7):
        raise ConfigError(f"MotionBlur: kernel {k} not in (3,5,7)")
    kern = np.zeros((k, k))
    mid = k // 2
    direction = params["direction"]
    if direction == 0:
        kern[mid, :] = 1.0
    elif direction == 1:
        kern[:, mid] = 1.0
    elif direction == 2:
        np.fill_diagonal(kern, 1.0)
    else:
        np.fill_diagonal(np.fliplr(kern), 1.0)
    kern /= kern.sum()
    out = np.empty_like(image)
    for c in range(image.shape[0]):
        out[c] = convolve(image[c], kern, mode="reflect")
    return out


def sharpen(image: np.ndarray, params: dict) -> np.ndarray:
    amount = params["amount"]
    if amount < 0:
        raise ConfigError(f"Sharpen: amount must be >= 0, got {amount}")
    blurred = uniform_filter(image, size=(1, 3, 3), mode="reflect")
    return np.clip(image + amount * (image - blurred), 0.0, 1.0)


_IMAGE_KERNELS = {
    "RandomCrop": crop,
    "Flip": flip,
    "RandomRotate90": rot90,
    "GridDistortion": lambda a, p: grid_distortion(a, p, nearest=False),
    "RandomGridShuffle": grid_shuffle,
    "Resize": lambda a, p: resize(a, p, nearest=False),
    "CLAHE": clahe,
    "RandomBrightnessContrast": brightness_contrast,
    "ChannelShuffle": channel_shuffle,
    "ColorJitter": color_jitter,
    "HueSaturationValue": hue_saturation_value,
    "Blur": box_blur,
    "GaussNoise": gauss_noise,
    "MotionBlur": motion_blur,
    "Sharpen": sharpen,
}

_MASK_KERNELS = {
    "RandomCrop": crop,
    "Flip": flip,
    "RandomRotate90": rot90,
    "GridDistortion": lambda a, p: grid_distortion(a, p, nearest=True),
    "RandomGridShuffle": grid_shuffle,
    "Resize": lambda a, p: resize(a, p, nearest=True),
}

TRANSFORM_NAMES = tuple(_IMAGE_KERNELS)
