"""SGD with momentum, the warmup/step-decay schedule, the two training stages,
and checkpoint I/O.

Checkpoints use the little-endian SCKP layout::

    "SCKP" | u8 version=1 | u16 n_meta | n_meta x (key, value)
    | u32 n_tensors | per tensor: name | u8 ndim | u32 dims... | f32 data

where every string is u16 length-prefixed UTF-8.
"""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from . import models
from . import ndtensor as nd
from .augment import AugPolicy
from .data import ImageBank, batch_iter, pretrain_indices
from .errors import FormatError, NumericalError, TruncatedFileError, ValidationError
from .losses import CEBatch, SupConBatch, cross_entropy, supcon_loss
from .models import EncoderConfig, ModelBundle

logger = logging.getLogger(__name__)

STAGES = ("pretrain_supcon", "pretrain_ce", "linear_eval")
CKPT_MAGIC = b"SCKP"
CKPT_VERSION = 1


# -- schedule ------------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleSpec:
    base_lr: float
    total_epochs: int
    warmup_epochs: int = 10
    decay_epochs: tuple = ()
    decay_rate: float = 0.1

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValidationError("base_lr must be positive")
        if self.total_epochs < 1 or self.warmup_epochs < 0:
            raise ValidationError("epochs must be positive and warmup non-negative")
        decays = tuple(int(e) for e in self.decay_epochs)
        object.__setattr__(self, "decay_epochs", decays)
        if any(b <= a for a, b in zip(decays, decays[1:])):
            raise ValidationError("decay epochs must be strictly increasing")
        if decays and decays[0] <= self.warmup_epochs:
            raise ValidationError("decay epochs must come after the warmup")
        if not 0 < self.decay_rate <= 1:
            raise ValidationError("decay_rate must lie in (0, 1]")


def lr_at_epoch(spec: ScheduleSpec, epoch: int) -> float:
    """Learning rate for a 1-indexed epoch.

    Linear warmup ``base * epoch / warmup`` up to ``warmup``, then ``base`` times
    ``decay_rate`` per decay epoch already reached. Computed exactly from the
    decimal forms of ``base_lr`` and ``decay_rate`` and rounded once.
    """
    if not 1 <= epoch <= spec.total_epochs:
        raise ValidationError(f"epoch {epoch} outside [1, {spec.total_epochs}]")
    base = Fraction(repr(float(spec.base_lr)))
    if epoch <= spec.warmup_epochs:
        return float(base * epoch / spec.warmup_epochs)
    passed = sum(1 for d in spec.decay_epochs if epoch >= d)
    return float(base * Fraction(repr(float(spec.decay_rate))) ** passed)


# -- optimizer -----------------------------------------------------------------

@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValidationError("lr must be positive")


def sgd_step(params: dict, grads: dict, state: OptimState, frozen=lambda name: False) -> dict:
    """In-place momentum SGD: ``v = m*v + (g + wd*p)``, ``p -= lr*v``.

    Parameters for which ``frozen(name)`` is true, or with no gradient, are skipped.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericalError(f"non-finite gradient for {name!r}: {bad} of {np.size(g)} entries")
    for name, p in params.items():
        g = grads.get(name)
        if g is None or frozen(name):
            continue
        dt = p.dtype.type
        d_p = g + dt(state.weight_decay) * p if state.weight_decay else g
        v = state.velocity.get(name)
        v = d_p.astype(p.dtype, copy=True) if v is None else dt(state.momentum) * v + d_p
        state.velocity[name] = v
        p -= dt(state.lr) * v
    return params


# -- configs -------------------------------------------------------------------

@dataclass
class TrainConfig:
    stage: str = "pretrain_supcon"
    batch_size: int = 1024
    epochs: int = 400
    temperature: Optional[float] = 0.13
    augmentation: str = "simaugment"
    seed: int = 0
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_epochs: int = 10
    decay_epochs: tuple = (250, 350)
    decay_rate: float = 0.1
    checkpoint_every: int = 0
    jitter_p: float = 0.8

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValidationError(f"stage must be one of {STAGES}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be positive")
        if self.stage == "pretrain_supcon":
            if self.temperature is None or not self.temperature > 0:
                raise ValidationError("SupCon pretraining needs a positive temperature")
        else:
            self.temperature = None
        if self.stage == "linear_eval":
            self.weight_decay = 0.0
            self.augmentation = "none"
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        self.schedule  # validate early

    @property
    def schedule(self) -> ScheduleSpec:
        return ScheduleSpec(self.lr, self.epochs, self.warmup_epochs, self.decay_epochs, self.decay_rate)

    def policy(self) -> AugPolicy:
        from .augment import SimAugmentParams

        return AugPolicy(self.augmentation, sim=SimAugmentParams(jitter_p=self.jitter_p))

    @classmethod
    def supcon(cls, **kw) -> "TrainConfig":
        return cls(**{"stage": "pretrain_supcon", **kw})

    @classmethod
    def cross_entropy(cls, **kw) -> "TrainConfig":
        base = dict(stage="pretrain_ce", batch_size=512, temperature=None, decay_epochs=(150, 250, 350))
        return cls(**{**base, **kw})

    @classmethod
    def linear(cls, **kw) -> "TrainConfig":
        base = dict(
            stage="linear_eval", batch_size=128, epochs=50, lr=0.1, weight_decay=0.0,
            warmup_epochs=0, decay_epochs=(), augmentation="none",
        )
        return cls(**{**base, **kw})


# -- training loops ------------------------------------------------------------

def _grads(tensors: dict) -> dict:
    return {k: t.grad for k, t in tensors.items() if t.grad is not None}


def pretrain(
    bank: ImageBank,
    config: TrainConfig,
    encoder_cfg: EncoderConfig = EncoderConfig(),
    out_dir=None,
    indices=None,
) -> tuple:
    """Train encoder+head with SupCon, or encoder+classifier with cross-entropy.

    Returns ``(bundle, history)`` where history holds one
    ``{"epoch", "lr", "mean_loss"}`` dict per epoch. With ``out_dir`` set, a
    final ``checkpoint.sckp`` and ``history.csv`` are written there, plus
    ``checkpoint_epoch{N}.sckp`` every ``checkpoint_every`` epochs.
    """
    if config.stage not in ("pretrain_supcon", "pretrain_ce"):
        raise ValidationError(f"pretrain() cannot run stage {config.stage!r}")
    supcon = config.stage == "pretrain_supcon"
    if bank.image_shape != (encoder_cfg.image_size, encoder_cfg.image_size, encoder_cfg.in_channels):
        raise ValidationError(f"bank images {bank.image_shape} do not fit the encoder input")
    idx = pretrain_indices(bank) if indices is None else np.asarray(indices)
    if idx.size < 2:
        raise ValidationError("pretraining needs at least two records")
    batch_size = min(config.batch_size, idx.size)

    bundle = models.init_params(
        encoder_cfg, config.seed, n_classes=None if supcon else bank.n_classes, with_head=supcon
    )
    bundle.metadata.update(
        stage=config.stage,
        loss="supcon" if supcon else "ce",
        seed=str(config.seed),
        augmentation=config.augmentation,
    )
    if supcon:
        bundle.metadata["tau"] = repr(float(config.temperature))
    else:
        bundle.metadata["n_classes"] = str(bank.n_classes)
    state = OptimState(config.lr, config.momentum, config.weight_decay)
    policy = config.policy()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history = []
    for epoch in range(1, config.epochs + 1):
        state.lr = lr_at_epoch(config.schedule, epoch)
        losses = []
        for batch in batch_iter(
            bank, idx, batch_size, config.seed, epoch, views=2 if supcon else 1,
            policy=policy, drop_last=True,
        ):
            tensors = bundle.as_tensors()
            with nd.GradTape() as tape:
                feats = models.encoder_forward(bundle.config, tensors, batch.images)
                if supcon:
                    z = models.projection_forward(tensors, feats)
                    loss = supcon_loss(SupConBatch(z, batch.labels, config.temperature))
                else:
                    logits = models.classifier_forward(tensors, feats)
                    loss = cross_entropy(CEBatch(logits, batch.labels, bank.n_classes))
            tape.backward(loss)
            sgd_step(bundle.params, _grads(tensors), state, bundle.is_frozen)
            losses.append(float(loss.data))
        mean_loss = float(np.mean(losses))
        history.append({"epoch": epoch, "lr": state.lr, "mean_loss": mean_loss})
        logger.info("epoch %d lr %.5g loss %.5f", epoch, state.lr, mean_loss)
        bundle.metadata["epoch"] = str(epoch)
        if out is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(bundle, out / f"checkpoint_epoch{epoch}.sckp")

    if out is not None:
        save_checkpoint(bundle, out / "checkpoint.sckp")
        write_history(history, out / "history.csv")
    return bundle, history


def extract_features(bundle: ModelBundle, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Encoder features for (k, C, H, W) images, computed without a tape."""
    parts = [
        models.encoder_forward(bundle.config, bundle.params, images[i:i + chunk]).data
        for i in range(0, len(images), chunk)
    ]
    if not parts:
        return np.zeros((0, bundle.config.feature_dim), dtype=np.float32)
    return np.concatenate(parts)


def bank_features(bundle: ModelBundle, bank: ImageBank, indices=None) -> np.ndarray:
    """Features of un-augmented bank images."""
    idx = np.arange(len(bank)) if indices is None else np.asarray(indices, dtype=np.int64)
    return extract_features(bundle, bank.images(idx))


def train_probe(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    config: TrainConfig,
    init: ModelBundle,
) -> tuple:
    """Fit the classifier of ``init`` on fixed features with cross-entropy.

    ``init`` must carry a classifier group; its other groups stay frozen.
    Returns ``(bundle, history)``; the last partial batch is kept.
    """
    if features.shape[1] != init.config.feature_dim:
        raise ValidationError(
            f"features have dim {features.shape[1]}, encoder produces {init.config.feature_dim}"
        )
    if init.params["classifier.w"].shape[1] != n_classes:
        raise ValidationError("classifier width does not match the number of classes")
    bundle = init.copy()
    bundle.frozen = set(models.GROUPS) - {"classifier"}
    state = OptimState(config.lr, config.momentum, 0.0)
    labels = np.asarray(labels)
    n = len(labels)
    history = []
    for epoch in range(1, config.epochs + 1):
        state.lr = lr_at_epoch(config.schedule, epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            tensors = {k: nd.Tensor(v, requires_grad=True) for k, v in bundle.group_params("classifier").items()}
            with nd.GradTape() as tape:
                logits = models.classifier_forward(tensors, features[sel])
                loss = cross_entropy(CEBatch(logits, labels[sel], n_classes))
            tape.backward(loss)
            sgd_step(bundle.params, _grads(tensors), state, bundle.is_frozen)
            losses.append(float(loss.data))
        history.append({"epoch": epoch, "lr": state.lr, "mean_loss": float(np.mean(losses))})
    return bundle, history


def predict_logits(bundle: ModelBundle, features: np.ndarray) -> np.ndarray:
    return models.classifier_forward(bundle.params, features).data


@dataclass
class LinearEvalResult:
    bundle: ModelBundle
    test_accuracy: float
    train_accuracy: float
    history: list
    metric: str


def linear_eval(
    pretrained: ModelBundle,
    bank: ImageBank,
    config: TrainConfig,
    train_indices,
    test_indices,
    metric: str = "top1",
) -> LinearEvalResult:
    """Frozen-encoder linear evaluation: drop the head, fit a new classifier, score the test set.

    No augmentation is used at this stage whatever ``config`` says.
    """
    from .evalsuite import score

    if config.stage != "linear_eval":
        config = replace(config, stage="linear_eval")
    probe = models.attach_classifier(pretrained, bank.n_classes, config.seed)
    train_indices = np.asarray(train_indices, dtype=np.int64)
    test_indices = np.asarray(test_indices, dtype=np.int64)
    if train_indices.size == 0 or test_indices.size == 0:
        raise ValidationError("linear evaluation needs non-empty train and test sets")
    f_train = bank_features(probe, bank, train_indices)
    f_test = bank_features(probe, bank, test_indices)
    y_train, y_test = bank.classes[train_indices], bank.classes[test_indices]
    trained, history = train_probe(f_train, y_train, bank.n_classes, config, probe)
    return LinearEvalResult(
        trained,
        score(predict_logits(trained, f_test), y_test, metric, bank.n_classes),
        score(predict_logits(trained, f_train), y_train, "top1", bank.n_classes),
        history,
        metric,
    )


# -- files ---------------------------------------------------------------------

def write_history(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "mean_loss"])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["lr"])), repr(float(row["mean_loss"]))])


def read_history(path) -> list:
    with open(path, newline="") as fh:
        return [
            {"epoch": int(r["epoch"]), "lr": float(r["lr"]), "mean_loss": float(r["mean_loss"])}
            for r in csv.DictReader(fh)
        ]


class CheckpointError(FormatError):
    pass


def _pack_str(buf, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _take(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"checkpoint truncated while reading {what}")
    return data


def _unpack_str(fh) -> str:
    (n,) = struct.unpack("<H", _take(fh, 2, "string length"))
    try:
        return _take(fh, n, "string").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"invalid UTF-8 in checkpoint string: {exc}") from None


def _config_meta(cfg: EncoderConfig) -> dict:
    return {
        "config.arch": cfg.arch,
        "config.widths": ",".join(str(w) for w in cfg.widths),
        "config.feature_dim": str(cfg.feature_dim),
        "config.head_dim": str(cfg.head_dim),
        "config.in_channels": str(cfg.in_channels),
        "config.image_size": str(cfg.image_size),
    }


def checkpoint_to_bytes(bundle: ModelBundle) -> bytes:
    meta = {**bundle.metadata, **_config_meta(bundle.config), "frozen": ",".join(sorted(bundle.frozen))}
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<BH", CKPT_VERSION, len(meta)))
    for k, v in meta.items():
        _pack_str(buf, str(k))
        _pack_str(buf, str(v))
    buf.write(struct.pack("<I", len(bundle.params)))
    for name, arr in bundle.params.items():
        _pack_str(buf, name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def checkpoint_from_bytes(raw: bytes) -> ModelBundle:
    fh = io.BytesIO(raw)
    if _take(fh, 4, "magic") != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, n_meta = struct.unpack("<BH", _take(fh, 3, "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = {}
    for _ in range(n_meta):
        k = _unpack_str(fh)
        meta[k] = _unpack_str(fh)
    (n_tensors,) = struct.unpack("<I", _take(fh, 4, "tensor count"))
    params = {}
    for _ in range(n_tensors):
        name = _unpack_str(fh)
        (ndim,) = struct.unpack("<B", _take(fh, 1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", _take(fh, 4 * ndim, "dims"))
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(_take(fh, 4 * count, f"data of {name!r}"), dtype="<f4")
        params[name] = data.reshape(dims).astype(np.float32)
    if fh.read(1):
        raise CheckpointError("trailing bytes after the last tensor")
    try:
        cfg = EncoderConfig(
            arch=meta.pop("config.arch"),
            widths=tuple(int(w) for w in meta.pop("config.widths").split(",")),
            feature_dim=int(meta.pop("config.feature_dim")),
            head_dim=int(meta.pop("config.head_dim")),
            in_channels=int(meta.pop("config.in_channels")),
            image_size=int(meta.pop("config.image_size")),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint metadata lacks a valid encoder config: {exc}") from None
    frozen = {g for g in meta.pop("frozen", "").split(",") if g}
    bundle = ModelBundle(cfg, params, frozen, meta)
    _check_shapes(bundle)
    return bundle


def _check_shapes(bundle: ModelBundle) -> None:
    ref = models.init_params(bundle.config, 0, with_head=bundle.has_group("head"))
    for name, arr in ref.group_params("encoder").items():
        got = bundle.params.get(name)
        if got is None or got.shape != arr.shape:
            raise CheckpointError(f"parameter {name!r} missing or mis-shaped for the stored config")


def save_checkpoint(bundle: ModelBundle, path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(bundle))


def load_checkpoint(path) -> ModelBundle:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"checkpoint not found: {p}")
    return checkpoint_from_bytes(p.read_bytes())
