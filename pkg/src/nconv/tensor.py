"""Rank-4 float64 tensors and the numeric primitives the layers are built on.

Tensors are plain C-ordered ``numpy.ndarray`` objects of shape
``(batch, channel, height, width)``; weight banks are arrays of shape
``(out_ch, in_ch, kh, kw)``.  No function here mutates its inputs.

Checkpoint blocks use a small binary format: the magic ``b"NCT1"``, four
little-endian ``u32`` dimensions, then the values as little-endian ``f64``
in row-major order.
"""

import struct

import numpy as np

TENSOR_MAGIC = b"NCT1"
_HEADER = struct.Struct("<4s4I")


def as_tensor4(x, name="tensor"):
    """Return ``x`` as a C-contiguous float64 rank-4 array, validating shape and values."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"{name} must be rank 4 (n, c, h, w), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def seeded_rng(seed):
    """PCG64 generator; equal seeds give identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def _same_pad(kh, kw, pad):
    if pad is None:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"same-size correlation needs odd kernel dims, got {kh}x{kw}")
        return (kh - 1) // 2, (kw - 1) // 2
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    return pad, pad


def correlate2d(x, w, pad=None):
    """Stride-1 multi-channel cross-correlation with zero padding.

    ``out[b, o, i, j] = sum_{c, m, n} x[b, c, i+m-pad, j+n-pad] * w[o, c, m, n]``.
    ``pad=None`` requests same-size output and requires odd kernel dims.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"expected rank-4 input and weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"input has {x.shape[1]} channels but weights expect {w.shape[1]} "
            f"(input {x.shape}, weights {w.shape})"
        )
    n, _, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph, pw = _same_pad(kh, kw, pad)
    oh, ow = h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, o, oh, ow))
    # one channel-mixing product per kernel tap keeps memory at O(output)
    for m in range(kh):
        for k in range(kw):
            tap = w[:, :, m, k]
            if not tap.any():
                continue
            out += np.einsum("oc,nchw->nohw", tap, xp[:, :, m:m + oh, k:k + ow])
    return out


def correlate2d_grad_input(g, w, in_shape, pad=None):
    """Adjoint of :func:`correlate2d` with respect to its input."""
    o, c, kh, kw = w.shape
    ph, pw = _same_pad(kh, kw, pad)
    n, _, h, wd = in_shape
    oh, ow = g.shape[2], g.shape[3]
    gp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
    for m in range(kh):
        for k in range(kw):
            gp[:, :, m:m + oh, k:k + ow] += np.einsum("oc,nohw->nchw", w[:, :, m, k], g)
    return gp[:, :, ph:ph + h, pw:pw + wd]


def correlate2d_grad_weight(g, x, kernel, pad=None):
    """Adjoint of :func:`correlate2d` with respect to its weights."""
    kh, kw = kernel
    ph, pw = _same_pad(kh, kw, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    oh, ow = g.shape[2], g.shape[3]
    gw = np.empty((g.shape[1], x.shape[1], kh, kw))
    for m in range(kh):
        for k in range(kw):
            gw[:, :, m, k] = np.einsum("nohw,nchw->oc", g, xp[:, :, m:m + oh, k:k + ow])
    return gw


def concat_channels(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels needs two rank-4 tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concat {a.shape} and {b.shape}: batch/spatial dims differ")
    return np.concatenate([a, b], axis=1)


def upsample_nearest(x, s):
    if int(s) != s or s < 1:
        raise ValueError(f"upsampling factor must be an integer >= 1, got {s}")
    s = int(s)
    x = np.asarray(x, dtype=np.float64)
    if s == 1:
        return x.copy()
    return np.repeat(np.repeat(x, s, axis=2), s, axis=3)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim and b.ndim and a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def add(a, b):
    a, b = _check_pair(a, b)
    return a + b


def sub(a, b):
    a, b = _check_pair(a, b)
    return a - b


def mul(a, b):
    a, b = _check_pair(a, b)
    return a * b


def div_eps(a, b, eps):
    """``a / (b + eps)``; with ``eps > 0`` the denominator is never exactly zero."""
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    a, b = _check_pair(a, b)
    return a / (b + eps)


def tensor_to_bytes(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"only rank-4 blocks can be serialized, got shape {x.shape}")
    return _HEADER.pack(TENSOR_MAGIC, *x.shape) + x.astype("<f8").tobytes(order="C")


def tensor_from_bytes(buf, offset=0):
    """Decode one tensor block; returns ``(array, next_offset)``."""
    if len(buf) - offset < _HEADER.size:
        raise ValueError("truncated tensor header")
    magic, *dims = _HEADER.unpack_from(buf, offset)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    offset += _HEADER.size
    count = int(np.prod(dims))
    end = offset + 8 * count
    if end > len(buf):
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64)
    return arr.reshape(dims), end
