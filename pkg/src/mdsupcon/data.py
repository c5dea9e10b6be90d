"""Multi-domain image banks: file format, splits, synthetic data and batching.

A bank holds 8-bit RGB images with a class label, a domain tag and an
optional split tag. On disk it uses the little-endian MDIB layout::

    "MDIB" | u8 version=1 | u32 n_records | u16 height | u16 width | u8 channels
    | u16 n_classes | u8 n_domains
    | class names, domain names (u16 length-prefixed UTF-8 each)
    | per record: u16 class | u8 domain | u8 split | h*w*c u8 pixels (HWC, RGB)

Split tags are 0 train, 1 val, 2 test and 255 unassigned.
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .augment import AugPolicy, gaussian_blur, sample_rng
from .errors import FormatError, TruncatedFileError, ValidationError

MAGIC = b"MDIB"
VERSION = 1
SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST, SPLIT_UNASSIGNED = 0, 1, 2, 255
TRAIN_FRACTION = 0.7

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond", "x_mark", "half_disc")
STYLES = ("solid", "outline", "speckle", "inverted", "striped", "soft")

_HEADER = struct.Struct("<4sBIHHBHB")


@dataclass
class ImageBank:
    pixels: np.ndarray
    classes: np.ndarray
    domains: np.ndarray
    splits: np.ndarray
    class_names: list
    domain_names: list

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        n = self.pixels.shape[0]
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(n)
        self.domains = np.asarray(self.domains, dtype=np.int64).reshape(n)
        if self.splits is None:
            self.splits = np.full(n, SPLIT_UNASSIGNED, dtype=np.uint8)
        self.splits = np.asarray(self.splits, dtype=np.uint8).reshape(n)
        self.class_names = list(self.class_names)
        self.domain_names = list(self.domain_names)
        self.validate()

    def validate(self) -> None:
        if self.pixels.ndim != 4:
            raise ValidationError("pixels must be (n, height, width, channels)")
        if not 1 <= self.n_classes <= 0xFFFF or not 1 <= self.n_domains <= 0xFF:
            raise ValidationError("bank needs 1..65535 classes and 1..255 domains")
        if len(self) and (self.classes.min() < 0 or self.classes.max() >= self.n_classes):
            raise ValidationError(f"class index outside [0, {self.n_classes})")
        if len(self) and (self.domains.min() < 0 or self.domains.max() >= self.n_domains):
            raise ValidationError(f"domain index outside [0, {self.n_domains})")
        bad = ~np.isin(self.splits, (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST, SPLIT_UNASSIGNED))
        if bad.any():
            raise ValidationError("split tags must be 0, 1, 2 or 255")

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_domains(self) -> int:
        return len(self.domain_names)

    @property
    def image_shape(self) -> tuple:
        return self.pixels.shape[1:]

    def subset(self, indices) -> "ImageBank":
        idx = np.asarray(indices, dtype=np.int64)
        return ImageBank(
            self.pixels[idx], self.classes[idx], self.domains[idx], self.splits[idx],
            self.class_names, self.domain_names,
        )

    def images(self, indices=None) -> np.ndarray:
        """Float32 (k, C, H, W) images scaled to [0, 1]."""
        px = self.pixels if indices is None else self.pixels[np.asarray(indices, dtype=np.int64)]
        return (px.transpose(0, 3, 1, 2).astype(np.float32) / np.float32(255.0))


def _record_dtype(h: int, w: int, c: int) -> np.dtype:
    return np.dtype([("cls", "<u2"), ("dom", "u1"), ("split", "u1"), ("pix", "u1", (h * w * c,))])


def _write_str(buf, s: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValidationError(f"name too long: {s[:20]!r}...")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"truncated file while reading {what}")
    return data


def _read_str(fh) -> str:
    (n,) = struct.unpack("<H", _read_exact(fh, 2, "string length"))
    return _read_exact(fh, n, "string").decode("utf-8")


def bank_to_bytes(bank: ImageBank) -> bytes:
    bank.validate()
    n = len(bank)
    h, w, c = bank.image_shape if n else (32, 32, 3)
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, n, h, w, c, bank.n_classes, bank.n_domains))
    for name in bank.class_names + bank.domain_names:
        _write_str(buf, name)
    recs = np.zeros(n, dtype=_record_dtype(h, w, c))
    recs["cls"] = bank.classes
    recs["dom"] = bank.domains
    recs["split"] = bank.splits
    recs["pix"] = bank.pixels.reshape(n, -1)
    buf.write(recs.tobytes())
    return buf.getvalue()


def write_bank(bank: ImageBank, path) -> None:
    Path(path).write_bytes(bank_to_bytes(bank))


def bank_from_bytes(raw: bytes) -> ImageBank:
    fh = io.BytesIO(raw)
    magic, version, n, h, w, c, n_classes, n_domains = _HEADER.unpack(_read_exact(fh, _HEADER.size, "header"))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported bank version {version}")
    class_names = [_read_str(fh) for _ in range(n_classes)]
    domain_names = [_read_str(fh) for _ in range(n_domains)]
    dt = _record_dtype(h, w, c)
    body = fh.read()
    if len(body) < n * dt.itemsize:
        raise TruncatedFileError(f"truncated file: {len(body)} record bytes for {n} records")
    if len(body) > n * dt.itemsize:
        raise FormatError("trailing bytes after the last record")
    recs = np.frombuffer(body, dtype=dt, count=n)
    return ImageBank(
        recs["pix"].reshape(n, h, w, c).copy(),
        recs["cls"].astype(np.int64),
        recs["dom"].astype(np.int64),
        recs["split"].copy(),
        class_names,
        domain_names,
    )


def read_bank(path) -> ImageBank:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"bank file not found: {p}")
    return bank_from_bytes(p.read_bytes())


def combine_domains(banks: Sequence[ImageBank]) -> ImageBank:
    """Concatenate banks sharing one class vocabulary; domains are merged by name."""
    if not banks:
        raise ValidationError("nothing to combine")
    first = banks[0]
    domain_names: list = []
    for b in banks:
        if b.class_names != first.class_names:
            raise ValidationError("banks use different class vocabularies")
        if len(b) and len(first) and b.image_shape != first.image_shape:
            raise ValidationError("banks have different image dimensions")
        for d in b.domain_names:
            if d not in domain_names:
                domain_names.append(d)
    remapped = [
        np.array([domain_names.index(d) for d in b.domain_names], dtype=np.int64)[b.domains] for b in banks
    ]
    return ImageBank(
        np.concatenate([b.pixels for b in banks]),
        np.concatenate([b.classes for b in banks]),
        np.concatenate(remapped),
        np.concatenate([b.splits for b in banks]),
        first.class_names,
        domain_names,
    )


@dataclass
class SplitSpec:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    seed: int | None = None
    source: str = "random_70_30"

    @property
    def train_val(self) -> np.ndarray:
        return np.sort(np.concatenate([self.train, self.val]))


def split_train_val(indices, seed: int) -> SplitSpec:
    """Random 70/30 split of ``indices`` (an int count or an index array), train side floored."""
    idx = np.arange(indices) if np.isscalar(indices) else np.asarray(indices, dtype=np.int64)
    if idx.size < 2:
        raise ValidationError("need at least two records to split")
    perm = np.random.default_rng(seed).permutation(idx)
    n_train = int(np.floor(TRAIN_FRACTION * idx.size))
    return SplitSpec(np.sort(perm[:n_train]), np.sort(perm[n_train:]), seed=seed)


def resolve_splits(bank: ImageBank, seed: int) -> SplitSpec:
    """Train/val/test indices for linear evaluation.

    Records tagged val are used as the official validation split; without
    any, the train and unassigned records are split 70/30 at random.
    Records tagged test form the test set.
    """
    test = np.flatnonzero(bank.splits == SPLIT_TEST)
    val = np.flatnonzero(bank.splits == SPLIT_VAL)
    pool = np.flatnonzero((bank.splits == SPLIT_TRAIN) | (bank.splits == SPLIT_UNASSIGNED))
    if val.size:
        return SplitSpec(pool, val, test, seed, source="official")
    spec = split_train_val(pool, seed)
    spec.test = test
    return spec


def pretrain_indices(bank: ImageBank) -> np.ndarray:
    """Everything but the test records."""
    return np.flatnonzero(bank.splits != SPLIT_TEST)


# -- synthetic multi-domain data ---------------------------------------------

def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    d = np.sqrt(u * u + v * v)
    if kind == "circle":
        return d <= r
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8 * r
    if kind == "triangle":
        return (v <= 0.5 * r) & (np.sqrt(3) * u - v <= r) & (-np.sqrt(3) * u - v <= r)
    if kind == "cross":
        return ((np.abs(u) <= 0.3 * r) & (np.abs(v) <= r)) | ((np.abs(v) <= 0.3 * r) & (np.abs(u) <= r))
    if kind == "ring":
        return (d <= r) & (d >= 0.55 * r)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= r
    if kind == "x_mark":
        a, b = (u + v) / np.sqrt(2), (u - v) / np.sqrt(2)
        return ((np.abs(a) <= 0.25 * r) | (np.abs(b) <= 0.25 * r)) & (np.maximum(np.abs(a), np.abs(b)) <= r)
    if kind == "half_disc":
        return (d <= r) & (v >= 0)
    raise ValidationError(f"unknown shape {kind!r}")


def _erode(mask: np.ndarray, steps: int) -> np.ndarray:
    m = mask
    for _ in range(steps):
        p = np.pad(m, 1, constant_values=False)
        m = m & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m


def render_sample(shape: str, style: str, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """One (size, size, 3) uint8 image of ``shape`` drawn in ``style``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = rng.uniform(0.35 * size, 0.65 * size, size=2)
    r = rng.uniform(0.2 * size, 0.34 * size)
    theta = rng.uniform(-0.35, 0.35)
    u0, v0 = xx - cx, yy - cy
    u = np.cos(theta) * u0 + np.sin(theta) * v0
    v = -np.sin(theta) * u0 + np.cos(theta) * v0
    mask = _shape_mask(shape, u, v, r)

    fg = rng.uniform(0.55, 1.0, size=3)
    bg = rng.uniform(0.0, 0.2, size=3)
    img = np.broadcast_to(bg, (size, size, 3)).copy()
    if style == "solid":
        img[mask] = fg
    elif style == "outline":
        img[mask & ~_erode(mask, 1)] = fg
    elif style == "speckle":
        dots = rng.random((size, size)) < 0.55
        img[mask & dots] = fg
        img[~mask & (rng.random((size, size)) < 0.08)] = fg * 0.6
    elif style == "inverted":
        img = np.broadcast_to(1.0 - bg, (size, size, 3)).copy()
        img[mask] = 1.0 - fg
    elif style == "striped":
        phase = rng.uniform(0, 4)
        stripes = ((xx + yy + phase) // 2) % 2 == 0
        img[mask & stripes] = fg
    elif style == "soft":
        img[mask] = fg
        ramp = (yy / (size - 1))[..., None] * 0.15
        img = img + ramp
        img = gaussian_blur(np.clip(img, 0, 1).transpose(2, 0, 1), 3, 1.2).transpose(1, 2, 0)
    else:
        raise ValidationError(f"unknown style {style!r}")
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def gen_synthetic_multidomain(
    n_classes: int,
    n_domains: int,
    n_per_class_per_domain: int,
    seed: int,
    test_fraction: float = 0.0,
    size: int = 32,
) -> ImageBank:
    """Shapes as classes, rendering styles as domains.

    Record order is domain-major, then class, then sample. The last
    ``round(test_fraction * n_per)`` samples of every (domain, class) cell are
    tagged test; the rest are unassigned.
    """
    if not 2 <= n_classes <= len(SHAPES):
        raise ValidationError(f"n_classes must be in [2, {len(SHAPES)}]")
    if not 1 <= n_domains <= len(STYLES):
        raise ValidationError(f"n_domains must be in [1, {len(STYLES)}]")
    if n_per_class_per_domain < 1:
        raise ValidationError("need at least one sample per class and domain")
    if not 0.0 <= test_fraction < 1.0:
        raise ValidationError("test_fraction must lie in [0, 1)")
    n_test = int(round(test_fraction * n_per_class_per_domain))
    pixels, classes, domains, splits = [], [], [], []
    for d in range(n_domains):
        for c in range(n_classes):
            for k in range(n_per_class_per_domain):
                rng = np.random.default_rng([seed, d, c, k])
                pixels.append(render_sample(SHAPES[c], STYLES[d], rng, size))
                classes.append(c)
                domains.append(d)
                splits.append(SPLIT_TEST if k >= n_per_class_per_domain - n_test else SPLIT_UNASSIGNED)
    return ImageBank(
        np.stack(pixels), classes, domains, splits, list(SHAPES[:n_classes]), list(STYLES[:n_domains])
    )


def convert_cifar_binary(paths: Sequence, class_names: Sequence[str], split: int, label_bytes: int = 1) -> ImageBank:
    """Read CIFAR-style binary batches (label byte(s) + 3072 CHW pixel bytes per record).

    For CIFAR-100 pass ``label_bytes=2``; the fine label (second byte) is kept.
    """
    rec = label_bytes + 3072
    chunks = []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) % rec:
            raise TruncatedFileError(f"{p}: size is not a multiple of {rec}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec))
    arr = np.concatenate(chunks)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    pixels = arr[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return ImageBank(pixels, labels, np.zeros(len(arr)), np.full(len(arr), split), class_names, ["default"])


# -- batching ------------------------------------------------------------------

@dataclass
class TwoViewBatch:
    """``images`` holds ``views`` blocks of N images laid out [view 1 | view 2]."""

    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    views: int


def augment_samples(
    bank: ImageBank,
    indices,
    seed: int,
    epoch: int,
    views: int,
    policy: AugPolicy | None,
    workers: int = 1,
) -> np.ndarray:
    """(views, k, C, H, W) float32; sample i's views come from its own rng stream."""
    indices = np.asarray(indices, dtype=np.int64)
    raw = bank.images(indices).astype(np.float64)

    def one(pos: int) -> list:
        img = raw[pos]
        if policy is None or policy.strategy == "none":
            return [img] * views
        rng = sample_rng(seed, epoch, int(indices[pos]))
        return [policy(img, rng) for _ in range(views)]

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, range(len(indices))))
    else:
        results = [one(i) for i in range(len(indices))]
    out = np.empty((views, len(indices)) + raw.shape[1:], dtype=np.float32)
    for i, vs in enumerate(results):
        for v, img in enumerate(vs):
            out[v, i] = img
    return out


def batch_iter(
    bank: ImageBank,
    indices,
    batch_size: int,
    shuffle_seed: int,
    epoch: int = 0,
    views: int = 1,
    policy: AugPolicy | None = None,
    drop_last: bool = False,
    shuffle: bool = True,
    workers: int = 1,
) -> Iterator[TwoViewBatch]:
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    if views not in (1, 2):
        raise ValidationError("views must be 1 or 2")
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValidationError("empty split")
    order = np.random.default_rng([shuffle_seed, epoch]).permutation(indices) if shuffle else indices
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if drop_last and len(chunk) < batch_size:
            break
        imgs = augment_samples(bank, chunk, shuffle_seed, epoch, views, policy, workers)
        yield TwoViewBatch(
            imgs.reshape((-1,) + imgs.shape[2:]),
            np.tile(bank.classes[chunk], views),
            chunk,
            views,
        )
