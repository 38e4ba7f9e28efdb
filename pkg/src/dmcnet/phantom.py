"""Synthetic organ phantoms for desk-scale training and evaluation.

Each phantom is a smooth noisy background with one randomly oriented,
randomly proportioned ellipsoid (class 1) whose surface is perturbed by
low-frequency radial noise, and optionally a small blob (class 2) inside it
with its own intensity. The organ is sized so that all foreground covers
0.5-3 % of the volume, the small-structure regime the networks target.
"""

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .errors import ConfigurationError
from .io import VolumeSample

FG_FRACTION_RANGE = (0.008, 0.022)  # target band; measured band is 0.005-0.03
ORGAN_CONTRAST = 0.8
TUMOR_CONTRAST = -0.5


def _rotation(rng, rank):
    if rank == 3:
        return Rotation.random(random_state=rng).as_matrix()
    theta = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _radial_noise(rng, shape, amplitude):
    # coarse random field, upsampled smoothly: a few bumps across the volume
    coarse = rng.standard_normal(tuple(4 for _ in shape))
    field = ndimage.zoom(coarse, [n / 4 for n in shape], order=3, mode="nearest")
    field = field[tuple(slice(0, n) for n in shape)]
    field /= max(np.abs(field).max(), 1e-12)
    return amplitude * field


def _ellipsoid_radius(coords, center, axes, rot):
    # normalised radius: < 1 inside the ellipsoid
    d = np.tensordot(rot.T, coords - center[:, None], axes=1)
    return np.sqrt(np.sum((d / axes[:, None]) ** 2, axis=0))


def synth_phantom(seed, size=(48, 48, 32), spacing=(1.0, 1.0, 1.0), with_tumor=False):
    """Return a :class:`VolumeSample` with float32 image and uint8 label.

    Fully determined by ``seed``; every axis must be at least 32 voxels.
    """
    size = tuple(int(n) for n in size)
    if len(size) not in (2, 3):
        raise ConfigurationError(f"phantoms are 2-D or 3-D, got size {size}")
    if any(n < 32 for n in size):
        raise ConfigurationError(f"phantom extents must be >= 32, got {size}")
    if len(spacing) != len(size):
        raise ConfigurationError("spacing must have one entry per axis")
    rng = np.random.default_rng(seed)
    rank = len(size)
    total = float(np.prod(size))

    target = rng.uniform(*FG_FRACTION_RANGE)
    aspect = rng.uniform(0.6, 1.6, size=rank)
    rot = _rotation(rng, rank)
    shape_noise = _radial_noise(rng, size, 0.15)
    grid = np.indices(size, dtype=np.float64).reshape(rank, -1)

    # volume of a unit-aspect ellipsoid in voxels, scaled to hit the target
    unit = np.pi if rank == 2 else 4.0 / 3.0 * np.pi
    scale = (target * total / (unit * np.prod(aspect))) ** (1.0 / rank)
    axes = aspect * scale
    margin = axes.max() + 2
    center = np.array([rng.uniform(margin, n - 1 - margin) if n - 1 > 2 * margin else (n - 1) / 2
                       for n in size])
    for _ in range(3):
        # correct once or twice for the volume change from the perturbation
        r = _ellipsoid_radius(grid, center, axes, rot).reshape(size)
        organ = r < 1.0 + shape_noise
        got = organ.sum() / total
        if got > 0:
            axes = axes * (target / got) ** (1.0 / rank)

    label = organ.astype(np.uint8)
    tumor = np.zeros(size, dtype=bool)
    if with_tumor:
        inside = np.argwhere(organ & (r < 0.6))
        if len(inside) == 0:
            inside = np.argwhere(organ)
        tc = inside[rng.integers(len(inside))].astype(np.float64)
        t_axes = axes * rng.uniform(0.25, 0.4)
        tumor = (_ellipsoid_radius(grid, tc, t_axes, np.eye(rank)).reshape(size) < 1.0) & organ
        label[tumor] = 2

    texture = ndimage.gaussian_filter(rng.standard_normal(size), 1.0)
    texture /= max(texture.std(), 1e-12)
    image = 0.15 * texture + 0.05 * rng.standard_normal(size)
    image += ORGAN_CONTRAST * organ
    image += TUMOR_CONTRAST * tumor
    return VolumeSample(image.astype(np.float32), label, tuple(float(s) for s in spacing),
                        case_id=f"phantom_{seed:04d}")


def foreground_fraction(label):
    return float(np.count_nonzero(label)) / label.size
