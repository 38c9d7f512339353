"""Synthetic scenes, KITTI-style depth PNGs, a nearest-neighbour baseline and error metrics.

Depth PNGs follow the KITTI depth benchmark convention: 16-bit greyscale,
``meters = value / 256``, and value 0 marks a missing pixel.  A dataset
directory is laid out as ``<root>/<split>/{sparse,gt}/NNNNN.png``.
"""

import os
from dataclasses import asdict, dataclass

import numpy as np
import png
from scipy.spatial import cKDTree

from nconv.tensor import seeded_rng

DEPTH_SCALE = 256.0
MIN_DEPTH, MAX_DEPTH = 2.0, 80.0
DELTA_BASE = 1.01


class DepthFormatError(ValueError):
    pass


@dataclass
class Sample:
    sparse_depth: np.ndarray  # (1, 1, h, w), meters, 0 where unmeasured
    input_conf: np.ndarray  # (1, 1, h, w), 1 where measured
    gt_depth: np.ndarray  # (1, 1, h, w), meters
    gt_valid: np.ndarray  # (1, 1, h, w), 1 where ground truth is usable


def _quantize(depth):
    return np.round(depth * DEPTH_SCALE) / DEPTH_SCALE


def _scene(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    far = rng.uniform(45.0, 78.0)
    depth = far - rng.uniform(20.0, 35.0) * yy + rng.uniform(-5.0, 5.0) * xx
    for _ in range(rng.integers(2, 7)):
        h, w = rng.integers(size // 8, size // 3 + 1, size=2)
        top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        base = rng.uniform(5.0, 30.0)
        gy, gx = rng.uniform(-4.0, 4.0, size=2)
        patch = base + gy * (yy[top:top + h, left:left + w] - yy[top, 0]) \
            + gx * (xx[top:top + h, left:left + w] - xx[0, left])
        depth[top:top + h, left:left + w] = patch
    return _quantize(np.clip(depth, MIN_DEPTH, MAX_DEPTH))


def gen_synthetic(seed, n, size=64, density=0.05, gt_coverage=0.3):
    """Seeded piecewise-planar depth scenes with i.i.d. sparse sampling.

    Each scene is a tilted background plane with 2-6 nearer rectangular
    planes in front of it, depths quantized to 1/256 m within [2, 80].
    """
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must be in (0, 1], got {density}")
    if not 0.0 < gt_coverage <= 1.0:
        raise ValueError(f"gt_coverage must be in (0, 1], got {gt_coverage}")
    if size < 4 or size % 4:
        raise ValueError(f"size must be a positive multiple of 4, got {size}")
    rng = seeded_rng(seed)
    samples = []
    for _ in range(n):
        depth = _scene(rng, size)
        measured = (rng.random((size, size)) < density).astype(np.float64)
        valid = (rng.random((size, size)) < gt_coverage).astype(np.float64)
        samples.append(Sample(
            (depth * measured)[None, None],
            measured[None, None],
            depth[None, None],
            valid[None, None],
        ))
    return samples


def punch_hole(sample, top, left, size):
    """Copy of ``sample`` with no measurements inside a square window."""
    conf = sample.input_conf.copy()
    conf[..., top:top + size, left:left + size] = 0.0
    return Sample(sample.sparse_depth * conf, conf, sample.gt_depth, sample.gt_valid)


def _as_image(x, name):
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(x.shape[-2:]) if x.ndim > 2 and np.prod(x.shape[:-2]) == 1 else x
    if x.ndim != 2:
        raise ValueError(f"{name} must be a single 2-D image, got shape {x.shape}")
    return x


def load_depth_png(path):
    """Read a 16-bit depth PNG; returns ``(depth, conf)`` as (1, 1, h, w) tensors."""
    try:
        width, height, rows, info = png.Reader(filename=str(path)).read()
        values = np.vstack([np.asarray(r, dtype=np.uint16) for r in rows])
    except png.Error as exc:
        raise DepthFormatError(f"{path}: not a readable PNG ({exc})") from exc
    if info["bitdepth"] != 16 or info["planes"] != 1:
        raise DepthFormatError(
            f"{path}: expected 16-bit single-channel PNG, got bitdepth={info['bitdepth']} "
            f"planes={info['planes']}"
        )
    values = values.reshape(height, width)
    conf = (values > 0).astype(np.float64)
    depth = values.astype(np.float64) / DEPTH_SCALE
    return depth[None, None], conf[None, None]


def _write_png(path, values, bitdepth):
    h, w = values.shape
    with open(path, "wb") as fh:
        png.Writer(width=w, height=h, greyscale=True, bitdepth=bitdepth).write(fh, values.tolist())


def save_depth_png(depth, path):
    """Write depth in meters as a 16-bit PNG (round half up, saturating at 65535)."""
    depth = _as_image(depth, "depth")
    if np.any(depth < 0) or not np.all(np.isfinite(depth)):
        raise ValueError("depth must be finite and non-negative")
    values = np.minimum(np.floor(depth * DEPTH_SCALE + 0.5), 65535).astype(np.uint16)
    _write_png(path, values, 16)


def save_conf_png(conf, path):
    """Write a [0, 1] confidence map as an 8-bit greyscale PNG."""
    conf = _as_image(conf, "confidence")
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidence must lie in [0, 1]")
    _write_png(path, np.floor(conf * 255.0 + 0.5).astype(np.uint8), 8)


def load_conf_png(path):
    width, height, rows, info = png.Reader(filename=str(path)).read()
    if info["bitdepth"] != 8 or info["planes"] != 1:
        raise DepthFormatError(f"{path}: expected 8-bit single-channel PNG")
    return np.vstack([np.asarray(r, dtype=np.uint8) for r in rows]).reshape(height, width)


def write_dataset(samples, root, split):
    for sub in ("sparse", "gt"):
        os.makedirs(os.path.join(root, split, sub), exist_ok=True)
    for i, s in enumerate(samples):
        save_depth_png(s.sparse_depth, os.path.join(root, split, "sparse", f"{i:05d}.png"))
        save_depth_png(s.gt_depth * s.gt_valid, os.path.join(root, split, "gt", f"{i:05d}.png"))


def load_dataset(root, split):
    sparse_dir = os.path.join(root, split, "sparse")
    gt_dir = os.path.join(root, split, "gt")
    if not os.path.isdir(sparse_dir) or not os.path.isdir(gt_dir):
        raise FileNotFoundError(f"missing {sparse_dir} or {gt_dir}")
    names = sorted(f for f in os.listdir(sparse_dir) if f.endswith(".png"))
    if not names:
        raise FileNotFoundError(f"no PNG files in {sparse_dir}")
    samples = []
    for name in names:
        gt_path = os.path.join(gt_dir, name)
        if not os.path.exists(gt_path):
            raise FileNotFoundError(f"ground truth {gt_path} missing for {name}")
        sparse, conf = load_depth_png(os.path.join(sparse_dir, name))
        gt, valid = load_depth_png(gt_path)
        if gt.shape != sparse.shape:
            raise DepthFormatError(f"{name}: sparse {sparse.shape} and gt {gt.shape} sizes differ")
        samples.append(Sample(sparse, conf, gt, valid))
    return samples


def nn_fill(sparse, conf):
    """Fill every unmeasured pixel with its nearest measured neighbour.

    Distances are Euclidean in pixel units; ties go to the measured pixel with
    the smallest row-major index.  Accepts 2-D images or (1, 1, h, w) tensors
    and returns the same shape.
    """
    shape = np.shape(sparse)
    img = _as_image(sparse, "sparse")
    mask = _as_image(conf, "conf") > 0
    if not mask.any():
        raise ValueError("nn_fill needs at least one measured pixel")
    out = img.copy()
    src = np.argwhere(mask)  # row-major order
    dst = np.argwhere(~mask)
    if len(dst):
        tree = cKDTree(src)
        dist, _ = tree.query(dst)
        # all sources at the minimal (integer-squared) distance, pick lowest index
        near = tree.query_ball_point(dst, dist + 1e-9)
        pick = np.fromiter((min(ix) for ix in near), dtype=np.int64, count=len(dst))
        chosen = src[pick]
        out[dst[:, 0], dst[:, 1]] = img[chosen[:, 0], chosen[:, 1]]
    return out.reshape(shape)


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    mre: float
    delta: tuple
    n_valid: int

    def to_dict(self):
        d = asdict(self)
        d["delta"] = list(self.delta)
        return d


def evaluate(pred, gt, valid):
    """MAE, RMSE, MRE and the three max-ratio inlier fractions over valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(valid) > 0
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise ValueError("pred, gt and valid must share one shape")
    if not mask.any():
        raise ValueError("no valid pixels to evaluate")
    z, t = pred[mask], gt[mask]
    if np.any(t <= 0):
        raise ValueError("ground truth must be positive on valid pixels")
    err = z - t
    with np.errstate(divide="ignore"):
        ratio = np.where(z > 0, np.maximum(z / t, t / np.where(z > 0, z, 1.0)), np.inf)
    delta = tuple(float(np.mean(ratio < DELTA_BASE ** i)) for i in (1, 2, 3))
    return MetricsReport(
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err * err))),
        mre=float(np.mean(np.abs(err) / t)),
        delta=delta,
        n_valid=int(mask.sum()),
    )
