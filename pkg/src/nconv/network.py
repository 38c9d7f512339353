"""Model graphs for the four network variants.

A model is a straight-line program over named (data, confidence) registers.
Instructions refer to layers by name, so one filter bank can be used at
several sites; ``model_backward`` accumulates gradients from every use.

Variants
--------
``OneScale16`` / ``OneScale4``
    Six normalized convolutions (11, 7, 5, 3, 3, 1) with 16 or 4 channels.
``HMS``
    Three-scale hierarchy.  A 5x5 (1->4) and a 3x3 (4->4) layer at full
    scale; confidence max-pooling by 2 followed by the same 3x3 layer at 1/2
    and again at 1/4.  Coarse scales are upsampled, concatenated with the
    next finer scale and fused by one shared 3x3 (8->4) normalized
    convolution.  A 1x1 (4->1) layer merges the channels.
``SF_STD``
    As ``HMS`` but the fusion is an ordinary convolution that ignores
    confidence; the fused confidence is the mean of the two inputs.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from nconv.layer import DEFAULT_EPS, NConvLayer, nconv_backward, nconv_forward
from nconv.tensor import (
    as_tensor4,
    concat_channels,
    correlate2d,
    correlate2d_grad_input,
    correlate2d_grad_weight,
    seeded_rng,
    tensor_from_bytes,
    tensor_to_bytes,
    upsample_nearest,
)

VARIANTS = ("OneScale16", "OneScale4", "HMS", "SF_STD")
MODEL_MAGIC = b"NCM1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "HMS"
    epsilon: float = DEFAULT_EPS
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(variant=d["variant"], epsilon=float(d["epsilon"]), seed=int(d["seed"]))


@dataclass
class StdConvLayer:
    """Unconstrained convolution with bias; ignores confidence."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)

    @classmethod
    def init(cls, in_ch, out_ch, kernel, rng):
        bound = 1.0 / np.sqrt(in_ch * kernel * kernel)
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, kernel, kernel))
        return cls(w, np.zeros(out_ch))

    @property
    def in_ch(self):
        return self.weights.shape[1]

    @property
    def out_ch(self):
        return self.weights.shape[0]

    @property
    def kernel(self):
        return self.weights.shape[2:]

    def n_params(self):
        return self.weights.size + self.bias.size


@dataclass(frozen=True)
class Instr:
    op: str  # nconv | stdfuse | pool | up | concat
    out: str
    inputs: tuple
    arg: object = None  # layer name or scale factor


@dataclass
class PoolRecord:
    indices: np.ndarray  # flat row-major offset inside each s x s window
    s: int
    in_shape: tuple


@dataclass
class Model:
    spec: ModelSpec
    layers: dict
    program: list
    input_multiple: int = 1

    @property
    def variant(self):
        return self.spec.variant

    def uses(self, name):
        return sum(1 for ins in self.program if ins.arg == name)


@dataclass
class ForwardTape:
    registers: dict
    caches: list = field(default_factory=list)


def _single_scale(channels):
    kernels = (11, 7, 5, 3, 3, 1)
    widths = (1,) + (channels,) * 5 + (1,)
    plan = [(f"conv{i + 1}", widths[i], widths[i + 1], k) for i, k in enumerate(kernels)]
    program = []
    prev = "in"
    for name, *_ in plan:
        out = "out" if name == plan[-1][0] else name
        program.append(Instr("nconv", out, (prev,), name))
        prev = out
    return plan, program


def _multi_scale(std_fusion):
    plan = [
        ("enc1", 1, 4, 5),
        ("enc2", 4, 4, 3),
        ("fuse", 8, 4, 3),
        ("final", 4, 1, 1),
    ]
    fuse_op = "stdfuse" if std_fusion else "nconv"
    program = [
        Instr("nconv", "e0", ("in",), "enc1"),
        Instr("nconv", "s0", ("e0",), "enc2"),
        Instr("pool", "p1", ("s0",), 2),
        Instr("nconv", "s1", ("p1",), "enc2"),
        Instr("pool", "p2", ("s1",), 2),
        Instr("nconv", "s2", ("p2",), "enc2"),
        Instr("up", "u1", ("s2",), 2),
        Instr("concat", "f1", ("s1", "u1")),
        Instr(fuse_op, "d1", ("f1",), "fuse"),
        Instr("up", "u0", ("d1",), 2),
        Instr("concat", "f0", ("s0", "u0")),
        Instr(fuse_op, "d0", ("f0",), "fuse"),
        Instr("nconv", "out", ("d0",), "final"),
    ]
    return plan, program


def build_model(spec):
    if isinstance(spec, str):
        spec = ModelSpec(spec)
    if spec.variant == "OneScale16":
        plan, program = _single_scale(16)
    elif spec.variant == "OneScale4":
        plan, program = _single_scale(4)
    else:
        plan, program = _multi_scale(std_fusion=spec.variant == "SF_STD")
    rng = seeded_rng(spec.seed)
    layers = {}
    for name, cin, cout, k in plan:
        if spec.variant == "SF_STD" and name == "fuse":
            layers[name] = StdConvLayer.init(cin, cout, k, rng)
        else:
            layers[name] = NConvLayer.init(cin, cout, k, rng, spec.epsilon)
    multiple = 4 if spec.variant in ("HMS", "SF_STD") else 1
    return Model(spec, layers, program, multiple)


def count_params(model):
    """Trainable scalars, counting each shared bank once."""
    return sum(layer.n_params() for layer in model.layers.values())


def layer_manifest(model):
    rows = []
    for name, layer in model.layers.items():
        rows.append({
            "name": name,
            "kind": "nconv" if isinstance(layer, NConvLayer) else "conv",
            "in_ch": layer.in_ch,
            "out_ch": layer.out_ch,
            "kernel": list(layer.kernel),
            "params": layer.n_params(),
            "uses": model.uses(name),
        })
    return rows


def conf_maxpool(z, c, s):
    """Max-pool confidences by ``s`` and carry the data at the chosen cells.

    Pooled confidences are divided by ``s**2``.  Ties go to the smallest
    row-major offset inside the window.
    """
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if z.shape != c.shape:
        raise ValueError(f"data {z.shape} and confidence {c.shape} shapes differ")
    if s < 2 or int(s) != s:
        raise ValueError(f"pooling factor must be an integer >= 2, got {s}")
    n, ch, h, w = c.shape
    if h % s or w % s:
        raise ValueError(f"spatial dims {h}x{w} not divisible by pooling factor {s}")

    def windows(x):
        return (x.reshape(n, ch, h // s, s, w // s, s)
                 .transpose(0, 1, 2, 4, 3, 5)
                 .reshape(n, ch, h // s, w // s, s * s))

    cw = windows(c)
    idx = np.argmax(cw, axis=-1)
    zp = np.take_along_axis(windows(z), idx[..., None], axis=-1)[..., 0]
    cp = np.take_along_axis(cw, idx[..., None], axis=-1)[..., 0] / (s * s)
    return zp, cp, PoolRecord(idx, int(s), c.shape)


def _unpool_grad(g, rec):
    n, ch, h, w = rec.in_shape
    s = rec.s
    full = np.zeros((n, ch, h // s, w // s, s * s))
    np.put_along_axis(full, rec.indices[..., None], g[..., None], axis=-1)
    return (full.reshape(n, ch, h // s, w // s, s, s)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, ch, h, w))


def conf_unpool_upsample(z, c, s):
    """Nearest upsampling; confidences are multiplied back by ``s**2`` and clamped at 1."""
    if s < 2:
        raise ValueError(f"upsampling factor must be >= 2, got {s}")
    zu = upsample_nearest(z, s)
    cu = np.minimum(upsample_nearest(c, s) * (s * s), 1.0)
    return zu, cu


def _block_sum(g, s):
    n, ch, h, w = g.shape
    return g.reshape(n, ch, h // s, s, w // s, s).sum(axis=(3, 5))


def _stdfuse_forward(z, c, layer):
    out = correlate2d(z, layer.weights) + layer.bias[None, :, None, None]
    k = c.shape[1] // 2
    return out, 0.5 * (c[:, :k] + c[:, k:])


def model_forward(model, z, c):
    """Run the model; returns ``(z_out, c_out, tape)``."""
    z = as_tensor4(z, "input data")
    c = as_tensor4(c, "input confidence")
    if z.shape != c.shape:
        raise ValueError(f"data {z.shape} and confidence {c.shape} shapes differ")
    if z.shape[1] != 1:
        raise ValueError(f"model input must be single-channel, got {z.shape[1]} channels")
    if np.any(c < 0) or np.any(c > 1):
        raise ValueError("input confidence must lie in [0, 1]")
    m = model.input_multiple
    if z.shape[2] % m or z.shape[3] % m:
        raise ValueError(
            f"{model.variant} needs spatial dims divisible by {m}, got {z.shape[2]}x{z.shape[3]}"
        )

    regs = {"in": (z, c)}
    caches = []
    for ins in model.program:
        if ins.op == "nconv":
            zi, ci = regs[ins.inputs[0]]
            zo, co, cache = nconv_forward(zi, ci, model.layers[ins.arg])
        elif ins.op == "stdfuse":
            zi, ci = regs[ins.inputs[0]]
            zo, co = _stdfuse_forward(zi, ci, model.layers[ins.arg])
            cache = zi
        elif ins.op == "pool":
            zo, co, cache = conf_maxpool(*regs[ins.inputs[0]], ins.arg)
        elif ins.op == "up":
            zi, ci = regs[ins.inputs[0]]
            zo, co = conf_unpool_upsample(zi, ci, ins.arg)
            cache = upsample_nearest(ci, ins.arg) * ins.arg ** 2 <= 1.0
        elif ins.op == "concat":
            (za, ca), (zb, cb) = regs[ins.inputs[0]], regs[ins.inputs[1]]
            zo, co = concat_channels(za, zb), concat_channels(ca, cb)
            cache = za.shape[1]
        else:
            raise ValueError(f"unknown instruction {ins.op!r}")
        regs[ins.out] = (zo, co)
        caches.append(cache)
    zo, co = regs["out"]
    return zo, co, ForwardTape(regs, caches)


def _zero_grads(model):
    return {name: [np.zeros_like(l.weights), np.zeros_like(l.bias)] for name, l in model.layers.items()}


def model_backward(model, tape, grad_z, grad_c, return_input_grad=False):
    """Parameter gradients ``{layer name: (grad_weights, grad_bias)}``.

    Shared layers accumulate the gradient of every site where they are used.
    """
    if len(tape.caches) != len(model.program):
        raise ValueError("tape does not belong to this model's program")
    zo, co = tape.registers["out"]
    grad_z = np.asarray(grad_z, dtype=np.float64)
    grad_c = np.asarray(grad_c, dtype=np.float64)
    if grad_z.shape != zo.shape or grad_c.shape != co.shape:
        raise ValueError(f"output gradient shapes {grad_z.shape}/{grad_c.shape} != {zo.shape}")

    params = _zero_grads(model)
    grads = {"out": [grad_z, grad_c]}

    def accumulate(reg, gz, gc):
        if reg in grads:
            grads[reg][0] = grads[reg][0] + gz
            grads[reg][1] = grads[reg][1] + gc
        else:
            grads[reg] = [gz, gc]

    for ins, cache in zip(reversed(model.program), reversed(tape.caches)):
        gz, gc = grads.pop(ins.out)
        if ins.op == "nconv":
            layer = model.layers[ins.arg]
            gzi, gci, gw, gb = nconv_backward(gz, gc, cache, layer)
            params[ins.arg][0] += gw
            params[ins.arg][1] += gb
            accumulate(ins.inputs[0], gzi, gci)
        elif ins.op == "stdfuse":
            layer = model.layers[ins.arg]
            zi = cache
            params[ins.arg][0] += correlate2d_grad_weight(gz, zi, layer.kernel)
            params[ins.arg][1] += gz.sum(axis=(0, 2, 3))
            gzi = correlate2d_grad_input(gz, layer.weights, zi.shape)
            gci = 0.5 * np.concatenate([gc, gc], axis=1)
            accumulate(ins.inputs[0], gzi, gci)
        elif ins.op == "pool":
            s = cache.s
            accumulate(ins.inputs[0], _unpool_grad(gz, cache), _unpool_grad(gc, cache) / (s * s))
        elif ins.op == "up":
            s = ins.arg
            accumulate(ins.inputs[0], _block_sum(gz, s), _block_sum(gc * cache, s) * (s * s))
        elif ins.op == "concat":
            k = cache
            accumulate(ins.inputs[0], gz[:, :k], gc[:, :k])
            accumulate(ins.inputs[1], gz[:, k:], gc[:, k:])
    result = {name: (g[0], g[1]) for name, g in params.items()}
    if return_input_grad:
        return result, tuple(grads.get("in", (None, None)))
    return result


def parameters(model):
    """Flat ``{key: array}`` view of all parameters, keyed ``"<layer>.weights"`` / ``"<layer>.bias"``."""
    out = {}
    for name, layer in model.layers.items():
        out[f"{name}.weights"] = layer.weights
        out[f"{name}.bias"] = layer.bias
    return out


def flatten_grads(grads):
    out = {}
    for name, (gw, gb) in grads.items():
        out[f"{name}.weights"] = gw
        out[f"{name}.bias"] = gb
    return out


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def model_to_bytes(model):
    header = {
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "layers": layer_manifest(model),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blocks = []
    for layer in model.layers.values():
        blocks.append(tensor_to_bytes(layer.weights))
        blocks.append(tensor_to_bytes(layer.bias.reshape(-1, 1, 1, 1)))
    return MODEL_MAGIC + struct.pack("<I", len(head)) + head + b"".join(blocks)


def load_model(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return model_from_bytes(buf, source=str(path))


def model_from_bytes(buf, source="<bytes>"):
    if buf[:4] != MODEL_MAGIC:
        raise ValueError(f"{source}: not a model checkpoint (bad magic {buf[:4]!r})")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{source}: unsupported checkpoint version {header.get('version')}")
    model = build_model(ModelSpec.from_dict(header["spec"]))
    offset = 8 + hlen
    for row in header["layers"]:
        layer = model.layers[row["name"]]
        w, offset = tensor_from_bytes(buf, offset)
        b, offset = tensor_from_bytes(buf, offset)
        if w.shape != layer.weights.shape or b.size != layer.bias.size:
            raise ValueError(f"{source}: layer {row['name']} shape mismatch")
        layer.weights = w
        layer.bias = b.reshape(-1)
    return model
