import copy
import dataclasses
import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nconv.network import (
    Model,
    ModelSpec,
    build_model,
    conf_maxpool,
    conf_unpool_upsample,
    count_params,
    flatten_grads,
    model_backward,
    model_forward,
    model_from_bytes,
    model_to_bytes,
)
from nconv.training import gradcheck


@pytest.mark.parametrize("variant,expected", [
    ("OneScale16", 25504 + 81),
    ("OneScale4", 1960 + 21),
    ("HMS", 100 + 4 + 144 + 4 + 288 + 4 + 4 + 1),
    ("SF_STD", 549),
])
def test_param_counts(variant, expected):
    assert count_params(build_model(variant)) == expected


def test_closed_form_counts():
    def single(ch):
        ks, widths = (11, 7, 5, 3, 3, 1), (1,) + (ch,) * 5 + (1,)
        return sum(widths[i] * widths[i + 1] * k * k + widths[i + 1] for i, k in enumerate(ks))
    assert single(16) == count_params(build_model("OneScale16"))
    assert single(4) == count_params(build_model("OneScale4"))


def test_hms_and_sf_std_differ_only_in_fusion():
    hms, sf = build_model("HMS"), build_model("SF_STD")
    for name in ("enc1", "enc2", "final"):
        assert hms.layers[name].n_params() == sf.layers[name].n_params()
    assert count_params(hms) - hms.layers["fuse"].n_params() == count_params(sf) - sf.layers["fuse"].n_params()


def test_unknown_variant():
    with pytest.raises(ValueError, match="unknown variant"):
        ModelSpec("NConv-9000")


def test_shared_layer_used_at_all_scales():
    m = build_model("HMS")
    assert m.uses("enc2") == 3
    assert m.uses("fuse") == 2


# -- pooling ------------------------------------------------------------------

def test_maxpool_example():
    c = np.array([[0.9, 0.1], [0.2, 0.3]])[None, None]
    z = np.array([[5.0, 6.0], [7.0, 8.0]])[None, None]
    zp, cp, rec = conf_maxpool(z, c, 2)
    assert zp.item() == 5.0
    assert cp.item() == pytest.approx(0.225, abs=1e-16)
    assert rec.indices.item() == 0


def test_maxpool_tie_takes_first():
    c = np.full((1, 1, 2, 2), 0.6)
    z = np.array([[1.0, 2.0], [3.0, 4.0]])[None, None]
    zp, cp, rec = conf_maxpool(z, c, 2)
    assert zp.item() == 1.0 and rec.indices.item() == 0
    assert cp.item() == pytest.approx(0.15)


def naive_pool(z, c, s):
    n, ch, h, w = c.shape
    zo = np.zeros((n, ch, h // s, w // s))
    co = np.zeros_like(zo)
    idx = np.zeros(zo.shape, dtype=int)
    for b in range(n):
        for k in range(ch):
            for i in range(h // s):
                for j in range(w // s):
                    best, bi = -np.inf, 0
                    for u in range(s):
                        for v in range(s):
                            val = c[b, k, i * s + u, j * s + v]
                            if val > best:
                                best, bi = val, u * s + v
                    idx[b, k, i, j] = bi
                    zo[b, k, i, j] = z[b, k, i * s + bi // s, j * s + bi % s]
                    co[b, k, i, j] = best / (s * s)
    return zo, co, idx


def test_maxpool_matches_naive(rng):
    z = rng.normal(size=(1, 4, 8, 8))
    c = np.round(rng.uniform(size=z.shape), 1)  # rounding creates ties
    zp, cp, rec = conf_maxpool(z, c, 2)
    zo, co, idx = naive_pool(z, c, 2)
    np.testing.assert_array_equal(zp, zo)
    np.testing.assert_array_equal(cp, co)
    np.testing.assert_array_equal(rec.indices, idx)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), s=st.sampled_from([2, 4]), k=st.floats(1e-3, 1e3))
def test_pool_cross_selection_and_argmax_invariance(seed, s, k):
    r = np.random.default_rng(seed)
    z = r.normal(size=(2, 3, 8, 8))
    c = r.uniform(size=z.shape) * (r.random(z.shape) < 0.6)
    zp, cp, rec = conf_maxpool(z, c, s)
    assert np.all((rec.indices >= 0) & (rec.indices < s * s))
    # data and confidence are selected at the same cell
    _, _, idx = naive_pool(z, c, s)
    np.testing.assert_array_equal(rec.indices, idx)
    rows = rec.indices // s
    cols = rec.indices % s
    ii, jj = np.meshgrid(np.arange(8 // s), np.arange(8 // s), indexing="ij")
    y, x = ii * s + rows, jj * s + cols
    b, ch = np.meshgrid(np.arange(2), np.arange(3), indexing="ij")
    picked_c = c[b[..., None, None], ch[..., None, None], y, x]
    picked_z = z[b[..., None, None], ch[..., None, None], y, x]
    np.testing.assert_array_equal(zp, picked_z)
    np.testing.assert_array_equal(cp * s * s, picked_c)
    _, _, rec_k = conf_maxpool(z, c * k, s)
    np.testing.assert_array_equal(rec_k.indices, rec.indices)


def test_maxpool_errors():
    with pytest.raises(ValueError, match="divisible"):
        conf_maxpool(np.ones((1, 1, 5, 4)), np.ones((1, 1, 5, 4)), 2)


def test_unpool_round_trip_and_clamp(rng):
    z = rng.normal(size=(1, 2, 8, 8))
    c = np.full(z.shape, 0.7)
    zp, cp, _ = conf_maxpool(z, c, 2)
    _, cu = conf_unpool_upsample(zp, cp, 2)
    np.testing.assert_allclose(cu, 0.7, atol=1e-15)
    zu, cu = conf_unpool_upsample(np.full((1, 1, 1, 1), 3.0), np.full((1, 1, 1, 1), 0.25), 2)
    np.testing.assert_array_equal(zu, np.full((1, 1, 2, 2), 3.0))
    np.testing.assert_array_equal(cu, 1.0)
    _, cu = conf_unpool_upsample(z[:, :, :1, :1], np.full((1, 2, 1, 1), 0.3), 2)
    np.testing.assert_array_equal(cu, 1.0)


# -- forward ------------------------------------------------------------------

VARIANTS = ["OneScale4", "HMS", "SF_STD"]


@pytest.mark.parametrize("variant", VARIANTS + ["OneScale16"])
def test_full_confidence_fixed_point(variant, rng):
    model = build_model(variant)
    z = rng.uniform(5, 50, size=(1, 1, 64, 64))
    _, c, _ = model_forward(model, z, np.ones_like(z))
    # zero padding carries zero confidence, so only pixels whose receptive
    # field stays inside the image reach the fixed point
    np.testing.assert_allclose(c[..., 28:36, 28:36], 1.0, atol=1e-6)
    assert np.all(c <= 1.0 + 1e-6)


@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_confidence_input(variant, rng):
    model = build_model(variant)
    z = rng.uniform(5, 50, size=(1, 1, 16, 16))
    _, c, _ = model_forward(model, z, np.zeros_like(z))
    assert np.all(c <= 1e-6)


@pytest.mark.parametrize("variant", VARIANTS)
def test_output_confidence_range(variant, rng):
    model = build_model(variant)
    z = rng.uniform(5, 50, size=(2, 1, 16, 16))
    c = rng.uniform(size=z.shape) * (rng.random(z.shape) < 0.3)
    _, co, _ = model_forward(model, z, c)
    assert np.all(co >= 0) and np.all(co <= 1 + 1e-6)


def test_forward_input_checks():
    model = build_model("HMS")
    with pytest.raises(ValueError, match="divisible"):
        model_forward(model, np.ones((1, 1, 10, 12)), np.ones((1, 1, 10, 12)))
    with pytest.raises(ValueError, match="single-channel"):
        model_forward(model, np.ones((1, 2, 8, 8)), np.ones((1, 2, 8, 8)))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        model_forward(model, np.ones((1, 1, 8, 8)), np.full((1, 1, 8, 8), 1.5))


def _golden_input():
    r = np.random.default_rng(2024)
    z = r.uniform(2, 80, size=(1, 1, 16, 16))
    c = (r.random(z.shape) < 0.2).astype(float)
    return z * c, c


def _digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.round(a, 9).tobytes())
    return h.hexdigest()[:16]


# recorded once from this implementation (seed 0 models, fixed input); values
# rounded to 1e-9 before hashing so BLAS summation order cannot flip the digest
GOLDEN = {
    "HMS": "520e4690b07789d8",
    "SF_STD": "d1964c2cb3ee02fd",
    "OneScale4": "063632eb4c3c6737",
}


@pytest.mark.parametrize("variant", sorted(GOLDEN))
def test_forward_golden_digest(variant):
    z, c = _golden_input()
    zo, co, _ = model_forward(build_model(variant), z, c)
    zo2, co2, _ = model_forward(build_model(variant), z, c)
    assert _digest(zo, co) == _digest(zo2, co2)
    assert _digest(zo, co) == GOLDEN[variant]


# -- backward -----------------------------------------------------------------

@pytest.mark.parametrize("variant", VARIANTS)
def test_backward_zero(variant, rng):
    model = build_model(variant)
    z = rng.uniform(size=(1, 1, 8, 8))
    zo, co, tape = model_forward(model, z, np.full_like(z, 0.5))
    for gw, gb in model_backward(model, tape, np.zeros_like(zo), np.zeros_like(co)).values():
        assert not gw.any() and not gb.any()


def unshare(model, layer):
    """Copy of ``model`` where every use of ``layer`` gets its own identical bank."""
    layers = {k: copy.deepcopy(v) for k, v in model.layers.items() if k != layer}
    program, names = [], []
    for ins in model.program:
        if ins.arg == layer:
            name = f"{layer}_{len(names)}"
            names.append(name)
            layers[name] = copy.deepcopy(model.layers[layer])
            ins = dataclasses.replace(ins, arg=name)
        program.append(ins)
    return Model(model.spec, layers, program, model.input_multiple), names


@pytest.mark.parametrize("layer", ["enc2", "fuse"])
def test_shared_gradient_is_sum_of_unshared(layer, rng):
    model = build_model("HMS")
    loose, names = unshare(model, layer)
    z = rng.uniform(2, 30, size=(2, 1, 16, 16))
    c = rng.uniform(0.1, 0.9, size=z.shape)
    zo, co, tape = model_forward(model, z, c)
    zl, cl, tape_l = model_forward(loose, z, c)
    np.testing.assert_allclose(zl, zo, atol=1e-12)
    gz, gc = rng.normal(size=(2, *zo.shape))
    shared = model_backward(model, tape, gz, gc)[layer]
    split = model_backward(loose, tape_l, gz, gc)
    np.testing.assert_allclose(shared[0], sum(split[n][0] for n in names), rtol=1e-10, atol=1e-13)
    np.testing.assert_allclose(shared[1], sum(split[n][1] for n in names), rtol=1e-10, atol=1e-13)


@pytest.mark.parametrize("variant", VARIANTS)
def test_model_finite_difference(variant):
    res = gradcheck(build_model(variant), size=8, max_params=120, seed=3)
    assert res.max_rel_error < 1e-4, res


def test_sharing_is_real(rng):
    model = build_model("HMS")
    z = rng.uniform(2, 30, size=(1, 1, 16, 16))
    c = rng.uniform(0.1, 0.9, size=z.shape)
    _, _, before = model_forward(model, z, c)
    model.layers["enc2"].weights[0, 0, 1, 1] += 0.5
    _, _, after = model_forward(model, z, c)
    for reg in ("s0", "s1", "s2"):
        assert not np.allclose(before.registers[reg][0], after.registers[reg][0])


@pytest.mark.parametrize("variant", VARIANTS + ["OneScale16"])
def test_checkpoint_roundtrip(variant, tmp_path):
    model = build_model(ModelSpec(variant, epsilon=1e-6, seed=5))
    buf = model_to_bytes(model)
    assert buf[:4] == b"NCM1"
    back = model_from_bytes(buf)
    assert back.spec == model.spec
    assert model_to_bytes(back) == buf
    for name in model.layers:
        np.testing.assert_array_equal(back.layers[name].weights, model.layers[name].weights)
    with pytest.raises(ValueError, match="magic"):
        model_from_bytes(b"XXXX" + buf[4:])
