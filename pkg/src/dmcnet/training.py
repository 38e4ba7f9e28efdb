"""Training recipe: loss, optimizer, schedule, preprocessing, augmentation, loop.

The loss is voxel-mean cross-entropy plus soft Dice averaged over the
foreground classes. Parameters are updated with Nesterov SGD

    v <- mu * v - lr * g
    p <- p + mu * v - lr * g

under a poly learning-rate schedule. Training is deterministic: every random
draw comes from one ``numpy`` generator whose state is saved in checkpoints,
so a resumed run continues bit-exactly.
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from . import io, ops
from .errors import ConfigurationError, ContractError, DataError, NonFiniteLossError
from .io import VolumeSample
from .networks import first_nonfinite_layer
from .tensor import Tape, Tensor, no_grad

DICE_EPS = 1e-5


# -- loss ---------------------------------------------------------------------


def one_hot(target, num_classes):
    target = np.asarray(target)
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        raise DataError(
            f"class ids must lie in [0, {num_classes}), found range "
            f"[{int(target.min())}, {int(target.max())}]"
        )
    eye = np.eye(num_classes)
    oh = eye[target.astype(np.int64)]  # N x spatial x C
    return np.ascontiguousarray(np.moveaxis(oh, -1, 1))


def dice_loss(probs, onehot, eps=DICE_EPS):
    """Soft Dice over foreground classes, numerator and denominator summed over the batch."""
    n_cls = probs.shape[1]
    if n_cls < 2:
        raise ConfigurationError("soft Dice needs at least one foreground class")
    axes = (0,) + tuple(range(2, probs.ndim))
    losses = []
    for c in range(1, n_cls):
        p = ops.slice_channels(probs, c, c + 1)
        g = onehot[:, c:c + 1]
        inter = ops.sum(ops.mul(p, g), axis=axes)
        denom = ops.add(ops.sum(p, axis=axes), float(g.sum()) + eps)
        losses.append(ops.sub(1.0, ops.div(ops.add(ops.mul(inter, 2.0), eps), denom)))
    total = losses[0]
    for term in losses[1:]:
        total = ops.add(total, term)
    return ops.mul(ops.sum(total), 1.0 / len(losses))


def cross_entropy(logits, onehot):
    logp = ops.log_softmax(logits, axis=1)
    voxels = logits.size // logits.shape[1]
    return ops.mul(ops.sum(ops.mul(logp, onehot)), -1.0 / voxels)


def combined_loss(logits, target, eps=DICE_EPS):
    """Cross-entropy plus foreground soft Dice; ``target`` holds integer class ids."""
    target = np.asarray(target)
    if target.shape != logits.shape[:1] + logits.shape[2:]:
        raise DataError(f"target shape {target.shape} does not match logits {logits.shape}")
    oh = one_hot(target, logits.shape[1])
    ce = cross_entropy(logits, oh)
    dice = dice_loss(ops.softmax(logits, axis=1), oh, eps)
    return ops.add(ce, dice)


# -- optimizer and schedule ----------------------------------------------------


@dataclass
class OptimizerState:
    momentum: float = 0.99
    nesterov: bool = True
    base_lr: float = 0.001
    velocities: dict = field(default_factory=dict)


def sgd_nesterov_step(params, grads, state, lr):
    """In-place SGD update; ``params`` and ``grads`` are name -> array mappings.

    With ``state.nesterov`` the parameter moves by ``mu * v - lr * g`` after
    the velocity update, otherwise by the new velocity ``v``.
    """
    mu = state.momentum
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter {name!r} shape {p.shape}")
        v = state.velocities.get(name)
        if v is None:
            v = state.velocities[name] = np.zeros_like(p)
        v *= mu
        v -= lr * g
        if state.nesterov:
            p += mu * v - lr * g
        else:
            p += v


def poly_lr(epoch, max_epochs=1000, base_lr=0.001, power=0.9):
    if not 0 <= epoch < max_epochs:
        raise ConfigurationError(f"epoch {epoch} outside [0, {max_epochs})")
    return base_lr * (1.0 - epoch / max_epochs) ** power


# -- preprocessing -------------------------------------------------------------


@dataclass
class PreprocessConfig:
    target_spacing: tuple = None
    patch_size: tuple = None


def minmax_normalize(image):
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return np.zeros_like(image, dtype=np.float64)
    return (image.astype(np.float64) - lo) / (hi - lo)


def preprocess_case(raw, cfg):
    """Resample to ``cfg.target_spacing`` (linear image, nearest label) and min-max normalise."""
    spacing = tuple(float(s) for s in raw.spacing)
    if any(not s > 0 for s in spacing):
        raise DataError(f"spacing must be positive, got {spacing}")
    image, label = raw.image, raw.label
    target = spacing if cfg.target_spacing is None else tuple(float(s) for s in cfg.target_spacing)
    if any(not s > 0 for s in target):
        raise DataError(f"target spacing must be positive, got {target}")
    if target != spacing:
        shape = tuple(max(1, int(round(n * s / t))) for n, s, t in zip(image.shape, spacing, target))
        image = _resample(image, shape, order=1)
        if label is not None:
            label = _resample(label, shape, order=0)
    return VolumeSample(minmax_normalize(image), label, target, raw.case_id)


def _resample(arr, shape, order):
    # align voxel centres of the corner voxels, as trilinear resampling tools do
    coords = np.meshgrid(
        *[np.linspace(0, n_in - 1, n_out) for n_in, n_out in zip(arr.shape, shape)], indexing="ij"
    )
    out = ndimage.map_coordinates(arr.astype(np.float64), coords, order=order, mode="nearest")
    return out.astype(arr.dtype) if order == 0 else out


# -- augmentation ----------------------------------------------------------------


@dataclass
class AugmentationConfig:
    rotate_deg: tuple = (-30.0, 30.0)
    scale_range: tuple = (0.7, 1.4)
    rot_scale_prob: float = 0.2
    mirror_prob: float = 0.5
    noise_var: tuple = (0.0, 0.1)
    noise_prob: float = 0.15
    blur_sigma: tuple = (0.5, 1.5)
    blur_prob: float = 0.2
    brightness_range: tuple = (-0.1, 0.1)
    brightness_prob: float = 0.15
    contrast_range: tuple = (0.75, 1.25)
    contrast_prob: float = 0.15

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name.endswith("prob"):
                if not 0.0 <= value <= 1.0:
                    raise ConfigurationError(f"{f.name} must lie in [0, 1], got {value}")
            else:
                value = tuple(float(v) for v in value)
                if len(value) != 2 or value[0] > value[1]:
                    raise ConfigurationError(f"{f.name} must be an ordered pair, got {value}")
                setattr(self, f.name, value)


def _affine(image, label, rng, cfg):
    rank = image.ndim
    angles = np.deg2rad(rng.uniform(*cfg.rotate_deg, size=3 if rank == 3 else 1))
    scale = rng.uniform(*cfg.scale_range)
    if rank == 3:
        rot = Rotation.from_euler("xyz", angles).as_matrix()
    else:
        c, s = np.cos(angles[0]), np.sin(angles[0])
        rot = np.array([[c, -s], [s, c]])
    # output voxel o samples input at centre + M (o - centre); M = R^T / scale
    mat = rot.T / scale
    centre = (np.array(image.shape) - 1) / 2.0
    offset = centre - mat @ centre
    image = ndimage.affine_transform(image, mat, offset, order=1, mode="nearest")
    label = ndimage.affine_transform(label, mat, offset, order=0, mode="nearest")
    return image, label


def augment_sample(sample, cfg, rng):
    """Random spatial and intensity transforms in a fixed order.

    Each transform first draws ``rng.random()`` against its probability and
    only then draws its parameters, so a generator that always misses returns
    the input unchanged.
    """
    image = np.array(sample.image, dtype=np.float64)
    label = None if sample.label is None else np.array(sample.label)
    if rng.random() < cfg.rot_scale_prob:
        dummy = np.zeros(image.shape, dtype=np.int64) if label is None else label
        image, label_out = _affine(image, dummy, rng, cfg)
        label = None if label is None else label_out
    for axis in range(image.ndim):
        if rng.random() < cfg.mirror_prob:
            image = np.flip(image, axis)
            label = None if label is None else np.flip(label, axis)
    if rng.random() < cfg.noise_prob:
        var = rng.uniform(*cfg.noise_var)
        image = image + rng.normal(0.0, math.sqrt(var), size=image.shape)
    if rng.random() < cfg.blur_prob:
        image = ndimage.gaussian_filter(image, rng.uniform(*cfg.blur_sigma))
    if rng.random() < cfg.brightness_prob:
        image = image + rng.uniform(*cfg.brightness_range)
    if rng.random() < cfg.contrast_prob:
        factor = rng.uniform(*cfg.contrast_range)
        mean = image.mean()
        image = (image - mean) * factor + mean
    label = None if label is None else np.ascontiguousarray(label)
    return VolumeSample(np.ascontiguousarray(image), label, sample.spacing, sample.case_id)


# -- patches ---------------------------------------------------------------------


@dataclass
class Patch:
    image: np.ndarray
    label: np.ndarray
    start: tuple


def pad_to(arr, shape, value=0):
    """Zero-pad symmetrically (extra voxel after) up to ``shape``; returns array and offsets."""
    before = [max(0, (s - n) // 2) for n, s in zip(arr.shape, shape)]
    after = [max(0, s - n - b) for n, s, b in zip(arr.shape, shape, before)]
    if any(before) or any(after):
        arr = np.pad(arr, list(zip(before, after)), constant_values=value)
    return arr, tuple(before)


def extract_patch(sample, patch_size, policy="random", rng=None, fg_prob=1.0 / 3.0):
    """Cut one patch; ``policy`` is ``random``, ``center`` or ``foreground_biased``.

    Under ``foreground_biased`` a draw below ``fg_prob`` centres the patch on
    a random foreground voxel; otherwise, or when the label is empty, the
    start is uniform. ``start`` is reported in padded coordinates.
    """
    patch_size = tuple(int(n) for n in patch_size)
    if len(patch_size) != sample.image.ndim:
        raise ConfigurationError(f"patch {patch_size} does not match volume rank {sample.image.ndim}")
    image, _ = pad_to(sample.image, patch_size)
    label = None
    if sample.label is not None:
        label, _ = pad_to(sample.label, patch_size)
    room = [n - p for n, p in zip(image.shape, patch_size)]
    if policy == "center":
        start = tuple(r // 2 for r in room)
    elif policy in ("random", "foreground_biased"):
        if rng is None:
            raise ConfigurationError(f"policy {policy!r} needs an rng")
        start = None
        if policy == "foreground_biased" and rng.random() < fg_prob and label is not None:
            fg = np.flatnonzero(label)
            if fg.size:
                voxel = np.unravel_index(fg[rng.integers(fg.size)], label.shape)
                start = tuple(int(min(max(v - p // 2, 0), r)) for v, p, r in zip(voxel, patch_size, room))
        if start is None:
            start = tuple(int(rng.integers(r + 1)) for r in room)
    else:
        raise ConfigurationError(f"unknown patch policy {policy!r}")
    sl = tuple(slice(s, s + p) for s, p in zip(start, patch_size))
    return Patch(image[sl].copy(), None if label is None else label[sl].copy(), start)


# -- training loop -------------------------------------------------------------------


@dataclass
class RunConfig:
    """Training run settings; serialised verbatim into logs and checkpoints."""

    epochs: int = 1000
    iters_per_epoch: int = 250
    batch_size: int = 2
    patch_size: tuple = (192, 192, 96)
    base_lr: float = 0.001
    momentum: float = 0.99
    poly_power: float = 0.9
    augment: bool = True
    foreground_prob: float = 1.0 / 3.0
    patch_policy: str = "foreground_biased"
    seed: int = 0
    checkpoint_every: int = 1
    augmentation: dict = field(default_factory=dict)

    def __post_init__(self):
        self.patch_size = tuple(int(n) for n in self.patch_size)
        if self.epochs < 1 or self.iters_per_epoch < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs, iters_per_epoch and batch_size must be positive")
        if self.base_lr < 0:
            raise ConfigurationError("base_lr must be non-negative")
        AugmentationConfig(**self.augmentation)

    def to_dict(self):
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown run config fields {sorted(unknown)}")
        return cls(**d)


def pooled_dice(pred, target, num_classes):
    """Mean over foreground classes of ``2|P&G| / (|P|+|G|)`` pooled over the batch."""
    scores = []
    for c in range(1, num_classes):
        p, g = pred == c, target == c
        denom = p.sum() + g.sum()
        scores.append(1.0 if denom == 0 else 2.0 * np.logical_and(p, g).sum() / denom)
    return float(np.mean(scores))


def _batch(samples, indices, cfg, rng):
    aug = AugmentationConfig(**cfg.augmentation)
    images, labels = [], []
    for i in indices:
        s = samples[i]
        if cfg.augment:
            s = augment_sample(s, aug, rng)
        p = extract_patch(s, cfg.patch_size, cfg.patch_policy, rng, cfg.foreground_prob)
        images.append(p.image[None])
        labels.append(p.label)
    return np.stack(images), np.stack(labels)


@dataclass
class TrainResult:
    log: list
    checkpoint: str = None
    final_loss: float = None


def train_step(model, images, labels, state, lr):
    model.requires_grad_(True)
    model.zero_grad()
    with Tape() as tape:
        logits = model.forward(Tensor(images))
        loss = combined_loss(logits, labels)
    value = loss.item()
    if not math.isfinite(value):
        with no_grad():
            layer = first_nonfinite_layer(model, images) or "loss"
        raise NonFiniteLossError(f"non-finite loss {value}; first non-finite layer: {layer}",
                                 layer=layer)
    tape.backward(loss)
    params = {n: t.data for n, t in model.params.items()}
    grads = {n: t.grad for n, t in model.params.items() if t.grad is not None}
    sgd_nesterov_step(params, grads, state, lr)
    pred = np.argmax(logits.data, axis=1)
    return value, pred


def checkpoint_state(model, state, rng, epoch, cfg):
    return dict(
        spec=model.spec.to_dict(),
        params={n: t.data for n, t in model.params.items()},
        velocities=dict(state.velocities),
        rng_state=rng.bit_generator.state,
        epoch=epoch,
        extra={"run_config": cfg.to_dict(), "momentum": state.momentum, "base_lr": state.base_lr},
    )


def train(model, samples, cfg, out_dir=None, resume=None, stop_after=None):
    """Run the training loop.

    ``samples`` are preprocessed :class:`VolumeSample` objects; batch ``k``
    takes cases ``k*B .. k*B+B-1`` modulo the case count. With ``out_dir``
    each epoch appends a JSON line to ``train_log.jsonl`` and checkpoints go
    to ``checkpoint.bin``. ``resume`` is a checkpoint path to continue from;
    ``stop_after`` ends the run early after that many epochs (for split runs).
    """
    if not samples:
        raise DataError("training needs at least one case")
    n_cls = model.spec.num_classes
    for s in samples:
        if s.label is None or s.label.max() >= n_cls or s.label.min() < 0:
            raise DataError(f"case {s.case_id}: labels must lie in [0, {n_cls})")
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState(momentum=cfg.momentum, base_lr=cfg.base_lr)
    start_epoch = 0
    log = []
    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = out / "checkpoint.bin" if out is not None else None
    log_path = out / "train_log.jsonl" if out is not None else None
    if resume is not None:
        ck = io.load_checkpoint(resume)
        if ck.spec != model.spec.to_dict():
            raise ConfigurationError("checkpoint network spec differs from the model being trained")
        io.apply_params(model, ck.params)
        state.velocities = {n: v.copy() for n, v in ck.velocities.items()}
        rng.bit_generator.state = ck.rng_state
        start_epoch = ck.epoch
        log = list(ck.extra.get("log", []))
    end_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, start_epoch + stop_after)
    n = len(samples)
    step = start_epoch * cfg.iters_per_epoch
    final = None
    for epoch in range(start_epoch, end_epoch):
        lr = poly_lr(epoch, cfg.epochs, cfg.base_lr, cfg.poly_power)
        losses, preds, targets = [], [], []
        for _ in range(cfg.iters_per_epoch):
            idx = [(step * cfg.batch_size + j) % n for j in range(cfg.batch_size)]
            images, labels = _batch(samples, idx, cfg, rng)
            value, pred = train_step(model, images, labels, state, lr)
            losses.append(value)
            preds.append(pred)
            targets.append(labels)
            step += 1
        final = float(np.mean(losses))
        record = {
            "epoch": epoch,
            "lr": lr,
            "loss": final,
            "train_dsc": pooled_dice(np.concatenate(preds), np.concatenate(targets), n_cls),
        }
        log.append(record)
        done = epoch + 1
        if ckpt_path is not None and (done % cfg.checkpoint_every == 0 or done == end_epoch):
            snap = checkpoint_state(model, state, rng, done, cfg)
            snap["extra"]["log"] = log
            io.save_checkpoint(ckpt_path, **snap)
        if log_path is not None:
            io.atomic_write(log_path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in log))
    return TrainResult(log, str(ckpt_path) if ckpt_path else None, final)
