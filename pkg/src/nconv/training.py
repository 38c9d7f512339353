"""Confidence-aware loss, ADAM, the training loop and a finite-difference gradient checker."""

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from nconv.layer import NConvLayer, nconv_backward, nconv_forward
from nconv.network import (
    Model,
    flatten_grads,
    model_backward,
    model_forward,
    parameters,
    save_model,
)
from nconv.tensor import seeded_rng

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "mean_data_loss", "mean_total_loss", "mean_output_conf", "seconds")


class NumericalAbort(RuntimeError):
    pass


def huber(z, t):
    d = np.abs(np.asarray(z, dtype=np.float64) - t)
    return np.where(d < 1.0, 0.5 * d * d, d - 0.5)


def huber_grad(z, t):
    """Derivative of :func:`huber` with respect to ``z``."""
    return np.clip(np.asarray(z, dtype=np.float64) - t, -1.0, 1.0)


@dataclass
class LossReport:
    data_term: float
    confidence_term: float
    total: float
    n_valid: int


def _valid_mask(valid, shape):
    valid = np.asarray(valid) > 0
    if valid.shape != shape:
        raise ValueError(f"mask shape {valid.shape} != prediction shape {shape}")
    counts = valid.reshape(shape[0], -1).sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("every sample needs at least one valid ground-truth pixel")
    return valid, counts


def conf_loss(z, c, target, valid, p):
    """Huber data term plus the epoch-weighted confidence reward.

    Per valid pixel ``E = huber(z, t)`` and ``E~ = E - (c - E*c) / p``.  Each
    sample is reduced by its mean over valid pixels and the batch by the mean
    over samples, so for a single sample this is the plain masked mean.
    """
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if z.shape != c.shape or z.shape != np.shape(target):
        raise ValueError("prediction, confidence and target shapes must agree")
    if p < 1:
        raise ValueError(f"epoch index p must be >= 1, got {p}")
    valid, counts = _valid_mask(valid, z.shape)
    e = huber(z, target)
    conf_term = -(c - e * c) / p
    n = z.shape[0]

    def reduce(x):
        per_sample = np.where(valid, x, 0.0).reshape(n, -1).sum(axis=1) / counts
        return float(per_sample.mean())

    data = reduce(e)
    ct = reduce(conf_term)
    return LossReport(data, ct, reduce(e + conf_term), int(counts.sum()))


def conf_loss_grad(z, c, target, valid, p):
    """Gradients of ``conf_loss(...).total`` with respect to ``z`` and ``c``."""
    valid, counts = _valid_mask(valid, np.shape(z))
    n = z.shape[0]
    weight = valid / (counts[:, None, None, None] * n)
    e = huber(z, target)
    gz = huber_grad(z, target) * (1.0 + c / p) * weight
    gc = -(1.0 - e) / p * weight
    return gz, gc


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Bias-corrected ADAM update applied in place to the arrays in ``params``."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {key} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.setdefault(key, np.zeros_like(p))
        v = state.v.setdefault(key, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.01
    seed: int = 0
    output_dir: str = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


def stack_samples(samples):
    return (
        np.concatenate([s.sparse_depth for s in samples]),
        np.concatenate([s.input_conf for s in samples]),
        np.concatenate([s.gt_depth for s in samples]),
        np.concatenate([s.gt_valid for s in samples]),
    )


def _dump_batch(path, batch_index, arrays):
    np.savez(path, batch_index=batch_index, sparse=arrays[0], conf=arrays[1],
             gt=arrays[2], valid=arrays[3])


def train(model, dataset, cfg, on_epoch_end=None):
    """Train ``model`` in place.  Returns the list of per-epoch history rows.

    When ``cfg.output_dir`` is set, ``history.csv``, ``best.ncm`` (lowest
    mean data loss) and ``final.ncm`` are written there.  ``on_epoch_end``
    is called as ``on_epoch_end(row, model)`` after every epoch.
    """
    dataset = [s for s in dataset if np.any(s.gt_valid > 0)]
    if not dataset:
        raise ValueError("dataset is empty (or has no sample with valid ground truth)")
    out_dir = cfg.output_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    rng = seeded_rng(cfg.seed)
    state = AdamState(lr=cfg.lr)
    params = parameters(model)
    history = []
    best = np.inf

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(dataset))
        sums = np.zeros(3)
        for bi, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [dataset[i] for i in order[lo:lo + cfg.batch_size]]
            arrays = stack_samples(batch)
            z, c, tape = model_forward(model, arrays[0], arrays[1])
            report = conf_loss(z, c, arrays[2], arrays[3], epoch)
            if not (np.isfinite(report.total) and np.all(np.isfinite(z)) and np.all(np.isfinite(c))):
                msg = f"non-finite loss at epoch {epoch}, batch {bi}"
                if out_dir:
                    dump = os.path.join(out_dir, f"abort_epoch{epoch}_batch{bi}.npz")
                    _dump_batch(dump, bi, arrays)
                    msg += f" (batch dumped to {dump})"
                raise NumericalAbort(msg)
            gz, gc = conf_loss_grad(z, c, arrays[2], arrays[3], epoch)
            grads = flatten_grads(model_backward(model, tape, gz, gc))
            adam_step(params, grads, state)
            w = len(batch)
            sums += w * np.array([report.data_term, report.total, c.mean()])
        means = sums / len(dataset)
        row = {
            "epoch": epoch,
            "mean_data_loss": float(means[0]),
            "mean_total_loss": float(means[1]),
            "mean_output_conf": float(means[2]),
            "seconds": time.perf_counter() - start,
        }
        history.append(row)
        log.info("epoch %d: E=%.4f total=%.4f conf=%.4f (%.1fs)", epoch, *means, row["seconds"])
        if on_epoch_end is not None:
            on_epoch_end(row, model)
        if out_dir and row["mean_data_loss"] < best:
            best = row["mean_data_loss"]
            save_model(model, os.path.join(out_dir, "best.ncm"))

    if out_dir:
        write_history(history, os.path.join(out_dir, "history.csv"))
        save_model(model, os.path.join(out_dir, "final.ncm"))
    return history


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_COLUMNS})


def read_history(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(r[k]) if k == "epoch" else float(r[k])) for k in HISTORY_COLUMNS} for r in rows]


@dataclass
class GradcheckResult:
    max_rel_error: float
    location: str
    n_probed: int

    def as_dict(self):
        return asdict(self)


def relative_error(analytic, numeric, floor=1e-12):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


# entries far below the largest gradient are judged against this fraction of
# it; central differences at h=1e-6 carry ~1e-9 absolute roundoff
SCALE_FLOOR = 1e-3


def gradcheck(target, size=8, batch=1, seed=0, h=1e-6, max_params=None, corrupt=0.0):
    """Compare analytic gradients with central differences on a random probe.

    ``target`` is an :class:`NConvLayer` or a :class:`Model`.  The probe is
    the scalar ``sum(rz * z_out) + sum(rc * c_out)`` with random weights
    ``rz``, ``rc``.  For a layer the input gradients are checked too.
    ``corrupt`` scales the analytic gradients by ``1 + corrupt`` to let the
    harness test itself.
    """
    rng = seeded_rng(seed)
    if isinstance(target, NConvLayer):
        in_ch = target.in_ch
    elif isinstance(target, Model):
        in_ch = 1
    else:
        raise TypeError(f"cannot gradcheck {type(target).__name__}")
    z = rng.uniform(0.0, 1.0, size=(batch, in_ch, size, size))
    c = rng.uniform(0.1, 0.9, size=(batch, in_ch, size, size))

    if isinstance(target, NConvLayer):
        def run():
            zo, co, cache = nconv_forward(z, c, target)
            return zo, co, cache
        zo, co, cache = run()
        rz, rc = rng.normal(size=zo.shape), rng.normal(size=co.shape)
        gz_in, gc_in, gw, gb = nconv_backward(rz, rc, cache, target)
        checks = {
            "weights": (target.weights, gw),
            "bias": (target.bias, gb),
            "z_prev": (z, gz_in),
            "c_prev": (c, gc_in),
        }
    else:
        def run():
            return model_forward(target, z, c)
        zo, co, tape = run()
        rz, rc = rng.normal(size=zo.shape), rng.normal(size=co.shape)
        grads = flatten_grads(model_backward(target, tape, rz, rc))
        params = parameters(target)
        checks = {k: (params[k], grads[k]) for k in params}

    def probe():
        zo, co, _ = run()
        return float((rz * zo).sum() + (rc * co).sum())

    locations = [(k, i) for k, (arr, _) in checks.items() for i in range(arr.size)]
    if max_params is not None and len(locations) > max_params:
        pick = rng.choice(len(locations), size=max_params, replace=False)
        locations = [locations[i] for i in sorted(pick)]

    scale = max(float(np.max(np.abs(g))) for _, g in checks.values())
    floor = max(SCALE_FLOOR * scale, 1e-12)
    worst, where = 0.0, ""
    for key, i in locations:
        arr, analytic = checks[key]
        flat = arr.reshape(-1)
        old = flat[i]
        flat[i] = old + h
        fp = probe()
        flat[i] = old - h
        fm = probe()
        flat[i] = old
        numeric = (fp - fm) / (2 * h)
        err = relative_error(analytic.reshape(-1)[i] * (1.0 + corrupt), numeric, floor)
        if err > worst:
            worst, where = err, f"{key}[{np.unravel_index(i, arr.shape)}]"
    return GradcheckResult(worst, where, len(locations))
