"""Image augmentation strategies on float CHW images in [0, 1].

Four strategies are provided (SimAugment, RandAugment, Stacked RandAugment
and the fixed AutoAugment ImageNet policy), built from one transform
vocabulary. All randomness comes from an explicit ``numpy.random.Generator``;
:func:`sample_rng` derives the per-sample stream from
``(seed, epoch, sample_index)`` so augmentation order never matters.

Transform strength is a *level* on a 0-30 scale, linearly mapped onto each
transform's own range (e.g. level 30 rotates by 30 degrees).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ValidationError

PARAMETER_MAX = 30.0
LUMA = np.array([0.299, 0.587, 0.114])

RANDAUGMENT_OPS = (
    "identity", "autocontrast", "equalize", "rotate", "solarize", "color", "posterize",
    "contrast", "brightness", "sharpness", "shear_x", "shear_y", "translate_x", "translate_y",
)
GEOMETRIC_OPS = ("rotate", "shear_x", "shear_y", "translate_x", "translate_y")

STRATEGIES = ("none", "simaugment", "randaugment", "stacked_randaugment", "autoaugment")
DEFAULT_POLICY_FILE = "autoaugment_imagenet.txt"


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


# -- pixel-level helpers -----------------------------------------------------

def _clip(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def _luma(img: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA, img, axes=1)


def _blend(img: np.ndarray, degenerate, factor: float) -> np.ndarray:
    return _clip(degenerate + factor * (img - degenerate))


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255.0).astype(np.uint8)


def _sample(img: np.ndarray, sx: np.ndarray, sy: np.ndarray, fill_zero: bool) -> np.ndarray:
    """Bilinear sampling at source coords; outside pixels are 0 or edge-clamped."""
    _, h, w = img.shape
    if not fill_zero:
        sx = np.clip(sx, 0, w - 1)
        sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros((img.shape[0],) + sx.shape)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            weight = wy * wx
            if fill_zero:
                weight = weight * ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h))
            out += img[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)] * weight
    return out


def _warp(img: np.ndarray, inv: np.ndarray, shift=(0.0, 0.0)) -> np.ndarray:
    """Map every output pixel p to source ``inv @ (p - c) + c - shift`` around the centre c."""
    _, h, w = img.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    sx = inv[0, 0] * dx + inv[0, 1] * dy + cx - shift[0]
    sy = inv[1, 0] * dx + inv[1, 1] * dy + cy - shift[1]
    return _sample(img, sx, sy, fill_zero=True)


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    _, h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    sy, sx = np.meshgrid(ys, xs, indexing="ij")
    return _sample(img, sx, sy, fill_zero=False)


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img
    maxc = img.max(axis=0)
    minc = img.min(axis=0)
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, maxc])


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    conds = [i == k for k in range(6)]
    r = np.select(conds, [v, q, p, p, t, v])
    g = np.select(conds, [t, v, v, q, p, p])
    b = np.select(conds, [p, p, t, v, v, q])
    return np.stack([r, g, b])


# -- transform vocabulary ----------------------------------------------------

def _signed(level: float, max_value: float, rng: np.random.Generator) -> float:
    value = level / PARAMETER_MAX * max_value
    return -value if rng.random() < 0.5 else value


def _rotate(img, level, rng):
    theta = np.deg2rad(_signed(level, 30.0, rng))
    c, s = np.cos(theta), np.sin(theta)
    return _warp(img, np.array([[c, -s], [s, c]]))


def _shear_x(img, level, rng):
    return _warp(img, np.array([[1.0, _signed(level, 0.3, rng)], [0.0, 1.0]]))


def _shear_y(img, level, rng):
    return _warp(img, np.array([[1.0, 0.0], [_signed(level, 0.3, rng), 1.0]]))


def _translate_x(img, level, rng):
    return _warp(img, np.eye(2), (_signed(level, 150.0 / 331.0 * img.shape[2], rng), 0.0))


def _translate_y(img, level, rng):
    return _warp(img, np.eye(2), (0.0, _signed(level, 150.0 / 331.0 * img.shape[1], rng)))


def _brightness(img, level, rng):
    return _blend(img, 0.0, 1.0 + _signed(level, 0.9, rng))


def _color(img, level, rng):
    return _blend(img, _luma(img)[None], 1.0 + _signed(level, 0.9, rng))


def _contrast(img, level, rng):
    return _blend(img, _luma(img).mean(), 1.0 + _signed(level, 0.9, rng))


def _sharpness(img, level, rng):
    factor = 1.0 + _signed(level, 0.9, rng)
    kernel = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0
    smooth = img.copy()
    _, h, w = img.shape
    inner = np.zeros((img.shape[0], h - 2, w - 2))
    for i in range(3):
        for j in range(3):
            inner += kernel[i, j] * img[:, i:i + h - 2, j:j + w - 2]
    smooth[:, 1:-1, 1:-1] = inner
    return _blend(img, smooth, factor)


def _posterize(img, level, rng):
    bits = 8 - int(round(level / PARAMETER_MAX * 4))
    mask = np.uint8((0xFF << (8 - bits)) & 0xFF)
    return (_to_u8(img) & mask) / 255.0


def _solarize(img, level, rng):
    threshold = 1.0 - level / PARAMETER_MAX
    return np.where(img >= threshold, 1.0 - img, img)


def _autocontrast(img, level, rng):
    lo = img.min(axis=(1, 2), keepdims=True)
    hi = img.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    return np.where(span > 0, (img - lo) / np.where(span > 0, span, 1.0), img)


def _equalize(img, level, rng):
    q = _to_u8(img)
    out = np.empty(img.shape)
    for c in range(q.shape[0]):
        hist = np.bincount(q[c].ravel(), minlength=256)
        nonzero = hist[hist > 0]
        step = (hist.sum() - nonzero[-1]) // 255
        if step == 0:
            out[c] = q[c] / 255.0
            continue
        lut = (np.cumsum(hist) + step // 2) // step
        lut = np.clip(np.concatenate([[0], lut[:-1]]), 0, 255)
        out[c] = lut[q[c]] / 255.0
    return out


def _invert(img, level, rng):
    return 1.0 - img


def _identity(img, level, rng):
    return img.copy()


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def grayscale(img: np.ndarray) -> np.ndarray:
    return np.repeat(_luma(img)[None], img.shape[0], axis=0)


TRANSFORMS = {
    "identity": _identity,
    "autocontrast": _autocontrast,
    "equalize": _equalize,
    "rotate": _rotate,
    "solarize": _solarize,
    "color": _color,
    "posterize": _posterize,
    "contrast": _contrast,
    "brightness": _brightness,
    "sharpness": _sharpness,
    "shear_x": _shear_x,
    "shear_y": _shear_y,
    "translate_x": _translate_x,
    "translate_y": _translate_y,
    "invert": _invert,
    "hflip": lambda img, level, rng: hflip(img),
    "grayscale": lambda img, level, rng: grayscale(img),
}


def apply_transform(kind: str, magnitude: float, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    fn = TRANSFORMS.get(kind)
    if fn is None:
        raise ValidationError(f"unknown transform {kind!r}")
    if not 0 <= magnitude <= PARAMETER_MAX:
        raise ValidationError(f"magnitude {magnitude} outside [0, {PARAMETER_MAX:g}]")
    return _clip(fn(image, magnitude, rng))


# -- SimAugment primitives ---------------------------------------------------

def gaussian_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValidationError(f"blur kernel size must be odd, got {kernel_size}")
    x = np.arange(kernel_size) - kernel_size // 2
    k = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def gaussian_blur(image: np.ndarray, kernel_size: int, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding."""
    k = gaussian_kernel(kernel_size, sigma)
    r = kernel_size // 2
    _, h, w = image.shape
    padded = np.pad(image, ((0, 0), (0, 0), (r, r)), mode="reflect")
    tmp = sum(k[i] * padded[:, :, i:i + w] for i in range(kernel_size))
    padded = np.pad(tmp, ((0, 0), (r, r), (0, 0)), mode="reflect")
    return _clip(sum(k[i] * padded[:, i:i + h, :] for i in range(kernel_size)))


def random_resized_crop(image, rng, scale=(0.2, 1.0), ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    _, h, w = image.shape
    area = h * w
    log_ratio = np.log(ratio)
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = np.exp(rng.uniform(log_ratio[0], log_ratio[1]))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            break
    else:
        in_ratio = w / h
        if in_ratio < min(ratio):
            cw, ch = w, int(round(w / min(ratio)))
        elif in_ratio > max(ratio):
            ch, cw = h, int(round(h * max(ratio)))
        else:
            cw, ch = w, h
        top, left = (h - ch) // 2, (w - cw) // 2
    crop = image[:, top:top + ch, left:left + cw]
    return _clip(resize(crop, h, w)) if (ch, cw) != (h, w) else crop.copy()


def color_jitter(image, rng, brightness=0.4, contrast=0.4, saturation=0.4, hue=0.1) -> np.ndarray:
    order = rng.permutation(4)
    bf = rng.uniform(max(0.0, 1 - brightness), 1 + brightness)
    cf = rng.uniform(max(0.0, 1 - contrast), 1 + contrast)
    sf = rng.uniform(max(0.0, 1 - saturation), 1 + saturation)
    hf = rng.uniform(-hue, hue)
    img = image
    for op in order:
        if op == 0:
            img = _blend(img, 0.0, bf)
        elif op == 1:
            img = _blend(img, _luma(img).mean(), cf)
        elif op == 2:
            img = _blend(img, _luma(img)[None], sf)
        else:
            hsv = rgb_to_hsv(img)
            hsv[0] = (hsv[0] + hf) % 1.0
            img = _clip(hsv_to_rgb(hsv))
    return img


@dataclass(frozen=True)
class SimAugmentParams:
    crop_scale: tuple = (0.2, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    jitter: tuple = (0.4, 0.4, 0.4, 0.1)
    gray_p: float = 0.2
    blur_p: float = 1.0
    blur_kernel: int = int(0.1 * 32)
    blur_sigma: tuple = (0.1, 2.0)

    def __post_init__(self):
        for name in ("flip_p", "jitter_p", "gray_p", "blur_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must be a probability, got {p}")


def _sim_pipeline(image, rng, params: SimAugmentParams, middle=None) -> np.ndarray:
    img = random_resized_crop(image, rng, params.crop_scale, params.crop_ratio)
    if rng.random() < params.flip_p:
        img = hflip(img)
    if middle is not None:
        img = middle(img)
    if rng.random() < params.jitter_p:
        img = color_jitter(img, rng, *params.jitter)
    if rng.random() < params.gray_p:
        img = grayscale(img)
    if rng.random() < params.blur_p:
        img = gaussian_blur(img, params.blur_kernel, rng.uniform(*params.blur_sigma))
    return _clip(img)


def sim_augment(image: np.ndarray, rng: np.random.Generator, params: SimAugmentParams = SimAugmentParams()) -> np.ndarray:
    """Resized crop, flip, colour jitter, grayscale, blur, in that order."""
    return _sim_pipeline(image, rng, params)


def rand_augment(
    image: np.ndarray,
    n_ops: int,
    magnitude: float,
    rng: np.random.Generator,
    vocabulary: tuple = RANDAUGMENT_OPS,
    trace: list | None = None,
) -> np.ndarray:
    """Apply ``n_ops`` transforms drawn uniformly from ``vocabulary`` at a fixed level.

    Names of the drawn transforms are appended to ``trace`` when given.
    """
    if n_ops < 1:
        raise ValidationError("n_ops must be >= 1")
    img = image
    for _ in range(n_ops):
        kind = vocabulary[int(rng.integers(len(vocabulary)))]
        if trace is not None:
            trace.append(kind)
        img = apply_transform(kind, magnitude, img, rng)
    return img


def stacked_rand_augment(
    image: np.ndarray,
    rng: np.random.Generator,
    params: SimAugmentParams = SimAugmentParams(),
    n_ops: int = 2,
    magnitude: float = 9,
    vocabulary: tuple = RANDAUGMENT_OPS,
) -> np.ndarray:
    """SimAugment with RandAugment inserted between the flip and the colour jitter.

    RandAugment draws from a child stream spawned off ``rng``, so the rest of
    the pipeline consumes exactly the same draws as :func:`sim_augment`.
    """
    ra_rng = rng.spawn(1)[0]
    return _sim_pipeline(image, rng, params, lambda img: rand_augment(img, n_ops, magnitude, ra_rng, vocabulary))


# -- AutoAugment policy ------------------------------------------------------

def parse_policy(text: str) -> list:
    """Parse ``op:prob:level;op:prob:level`` lines; ``#`` starts a comment."""
    table = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sub = []
        for item in line.split(";"):
            parts = item.strip().split(":")
            if len(parts) != 3:
                raise ValidationError(f"policy line {lineno}: expected op:prob:level, got {item!r}")
            op = parts[0].strip()
            try:
                prob, level = float(parts[1]), float(parts[2])
            except ValueError:
                raise ValidationError(f"policy line {lineno}: non-numeric field in {item!r}") from None
            if op not in TRANSFORMS:
                raise ValidationError(f"policy line {lineno}: unknown op {op!r}")
            if not 0.0 <= prob <= 1.0 or not 0.0 <= level <= PARAMETER_MAX:
                raise ValidationError(f"policy line {lineno}: probability or level out of range")
            sub.append((op, prob, level))
        table.append(sub)
    if not table:
        raise ValidationError("policy table is empty")
    return table


def load_policy(path=None) -> list:
    if path is None:
        text = resources.files("mdsupcon.policies").joinpath(DEFAULT_POLICY_FILE).read_text()
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_policy(text)


def format_policy(table: list) -> str:
    return "".join(";".join(f"{op}:{p:g}:{lvl:g}" for op, p, lvl in sub) + "\n" for sub in table)


def auto_augment(image: np.ndarray, policy_table: list, rng: np.random.Generator) -> np.ndarray:
    if not policy_table or any(not sub for sub in policy_table):
        raise ValidationError("malformed policy table")
    sub = policy_table[int(rng.integers(len(policy_table)))]
    img = image
    for op, prob, level in sub:
        if rng.random() < prob:
            img = apply_transform(op, level, img, rng)
    return img


# -- strategy dispatch -------------------------------------------------------

_ALIASES = {
    "none": "none",
    "simaugment": "simaugment",
    "sim": "simaugment",
    "randaugment": "randaugment",
    "stackedrandaugment": "stacked_randaugment",
    "stackedsimaugment": "stacked_randaugment",
    "autoaugment": "autoaugment",
    "autoaugmentimagenet": "autoaugment",
    "autoaugmentimagenetpolicy": "autoaugment",
}


def canonical_strategy(name: str) -> str:
    key = "".join(ch for ch in str(name).lower() if ch.isalnum())
    if key not in _ALIASES:
        raise ValidationError(f"unknown augmentation strategy {name!r}; choose from {STRATEGIES}")
    return _ALIASES[key]


@dataclass
class AugPolicy:
    strategy: str = "simaugment"
    sim: SimAugmentParams = field(default_factory=SimAugmentParams)
    n_ops: int = 2
    magnitude: float = 9
    policy_table: list | None = None

    def __post_init__(self):
        self.strategy = canonical_strategy(self.strategy)
        if not 0 <= self.magnitude <= PARAMETER_MAX:
            raise ValidationError(f"RandAugment magnitude must lie in [0, {PARAMETER_MAX:g}]")
        if self.n_ops < 1:
            raise ValidationError("RandAugment n_ops must be >= 1")
        if self.strategy == "autoaugment" and self.policy_table is None:
            self.policy_table = load_policy()

    def __call__(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        s = self.strategy
        if s == "none":
            return image
        if s == "simaugment":
            return sim_augment(image, rng, self.sim)
        if s == "randaugment":
            return rand_augment(image, self.n_ops, self.magnitude, rng)
        if s == "stacked_randaugment":
            return stacked_rand_augment(image, rng, self.sim, self.n_ops, self.magnitude)
        return auto_augment(image, self.policy_table, rng)
