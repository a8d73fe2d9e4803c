import math

import numpy as np
import pytest

from tinymotion.fusion import (
    FusionParams,
    adaptive_weight_block,
    cbam,
    fusion_backward,
    fusion_forward,
    init_params,
    load_params,
    save_params,
)


def naive_sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def naive_weight_block(f_rgb, f_m, p):
    """Loop-based re-implementation used as an oracle."""
    c = f_rgb.shape[0]
    z = [float(f_rgb[i].mean()) for i in range(c)] + [float(f_m[i].mean()) for i in range(c)]
    hidden = []
    for row in range(p.gate_w1.shape[0]):
        acc = p.gate_b1[row]
        for col in range(2 * c):
            acc += p.gate_w1[row, col] * z[col]
        hidden.append(max(acc, 0.0))
    logits = []
    for row in range(2):
        acc = p.gate_b2[row]
        for col in range(len(hidden)):
            acc += p.gate_w2[row, col] * hidden[col]
        logits.append(acc)
    m = max(logits)
    exps = [math.exp(v - m) for v in logits]
    w = [e / sum(exps) for e in exps]
    mixed = w[0] * f_rgb + w[1] * f_m
    return (w[0], w[1]), mixed


def naive_cbam(mixed, p):
    c, h, w = mixed.shape

    def mlp(x):
        hid = []
        for row in range(p.chan_w1.shape[0]):
            acc = p.chan_b1[row]
            for col in range(c):
                acc += p.chan_w1[row, col] * x[col]
            hid.append(max(acc, 0.0))
        out = []
        for row in range(c):
            acc = p.chan_b2[row]
            for col in range(len(hid)):
                acc += p.chan_w2[row, col] * hid[col]
            out.append(acc)
        return out

    avg = [float(mixed[i].mean()) for i in range(c)]
    mx = [float(mixed[i].max()) for i in range(c)]
    ma, mm = mlp(avg), mlp(mx)
    mc = np.array([naive_sigmoid(ma[i] + mm[i]) for i in range(c)])
    attended = mc[:, None, None] * mixed

    out = np.zeros_like(mixed)
    ms = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            logit = p.spatial_bias
            for ky in range(7):
                for kx in range(7):
                    sy, sx = y + ky - 3, x + kx - 3
                    if 0 <= sy < h and 0 <= sx < w:
                        col = attended[:, sy, sx]
                        logit += p.spatial_kernel[0, ky, kx] * float(col.mean())
                        logit += p.spatial_kernel[1, ky, kx] * float(col.max())
            ms[y, x] = naive_sigmoid(logit)
            out[:, y, x] = ms[y, x] * attended[:, y, x]
    return out, mc, ms


def rand_maps(rng, c=4, h=6, w=6):
    return rng.normal(size=(c, h, w)), rng.normal(size=(c, h, w))


class TestInitParams:
    def test_deterministic(self):
        a, b = init_params(8, 4, rng_seed=3), init_params(8, 4, rng_seed=3)
        assert all(
            np.array_equal(getattr(a, f), getattr(b, f))
            for f in ("gate_w1", "gate_w2", "chan_w1", "chan_w2", "spatial_kernel")
        )

    def test_hidden_widths(self):
        p = init_params(8, 4, rng_seed=0)
        assert p.gate_w1.shape == (4, 16)  # hidden 2c/r = 4
        assert p.chan_w1.shape == (2, 8)  # hidden c/r = 2

    def test_invalid_reduction(self):
        with pytest.raises(ValueError, match="divide"):
            init_params(8, 3)

    def test_bounds(self):
        p = init_params(16, 4, rng_seed=1)
        assert np.abs(p.gate_w1).max() <= 1 / np.sqrt(32)
        assert np.abs(p.spatial_kernel).max() <= 1 / np.sqrt(98)


class TestAdaptiveWeightBlock:
    def test_zero_params_mean_mix(self, rng):
        p = init_params(4, 2, rng_seed=0)
        zeroed = FusionParams(
            gate_w1=np.zeros_like(p.gate_w1),
            gate_b1=np.zeros_like(p.gate_b1),
            gate_w2=np.zeros_like(p.gate_w2),
            gate_b2=np.zeros_like(p.gate_b2),
            chan_w1=p.chan_w1,
            chan_b1=p.chan_b1,
            chan_w2=p.chan_w2,
            chan_b2=p.chan_b2,
            spatial_kernel=p.spatial_kernel,
            spatial_bias=p.spatial_bias,
        )
        f_rgb, f_m = rand_maps(rng)
        (w0, w1), mixed = adaptive_weight_block(f_rgb, f_m, zeroed)
        assert w0 == pytest.approx(0.5) and w1 == pytest.approx(0.5)
        assert np.allclose(mixed, 0.5 * (f_rgb + f_m))

    def test_equal_inputs_weight_free(self, rng):
        p = init_params(4, 2, rng_seed=1)
        f, _ = rand_maps(rng)
        _, mixed = adaptive_weight_block(f, f, p)
        assert np.allclose(mixed, f, atol=1e-12)

    def test_matches_naive_oracle(self, rng):
        for seed in range(5):
            p = init_params(4, 2, rng_seed=seed)
            f_rgb, f_m = rand_maps(rng)
            (w0, w1), mixed = adaptive_weight_block(f_rgb, f_m, p)
            (ow0, ow1), omixed = naive_weight_block(f_rgb, f_m, p)
            assert w0 == pytest.approx(ow0, abs=1e-12)
            assert w1 == pytest.approx(ow1, abs=1e-12)
            assert np.abs(mixed - omixed).max() < 1e-12

    def test_weights_sum_to_one(self, rng):
        for seed in range(20):
            p = init_params(4, 2, rng_seed=seed)
            f_rgb, f_m = rand_maps(rng)
            (w0, w1), _ = adaptive_weight_block(f_rgb, f_m, p)
            assert 0.0 < w0 < 1.0 and 0.0 < w1 < 1.0
            assert w0 + w1 == pytest.approx(1.0, abs=1e-12)

    def test_shape_mismatch(self, rng):
        p = init_params(4, 2, rng_seed=0)
        with pytest.raises(ValueError, match="mismatch"):
            adaptive_weight_block(rng.normal(size=(4, 6, 6)), rng.normal(size=(4, 6, 5)), p)

    def test_empty_axis_rejected(self):
        p = init_params(4, 2, rng_seed=0)
        with pytest.raises(ValueError, match="non-empty"):
            adaptive_weight_block(np.zeros((4, 0, 6)), np.zeros((4, 0, 6)), p)

    def test_non_finite_rejected(self):
        p = init_params(4, 2, rng_seed=0)
        bad = np.zeros((4, 6, 6))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            adaptive_weight_block(bad, np.zeros((4, 6, 6)), p)


class TestCbam:
    def test_zero_input_zero_output(self):
        p = init_params(4, 2, rng_seed=2)
        out, mc, ms = cbam(np.zeros((4, 5, 5)), p)
        assert (out == 0).all()
        assert ((0 < mc) & (mc < 1)).all()
        assert ((0 < ms) & (ms < 1)).all()

    def test_attention_in_open_unit_interval(self, rng):
        p = init_params(4, 2, rng_seed=3)
        out, mc, ms = cbam(rng.normal(size=(4, 6, 6)) * 50, p)
        assert ((0 < mc) & (mc < 1)).all() and ((0 < ms) & (ms < 1)).all()

    def test_matches_naive_oracle(self, rng):
        for seed in range(3):
            p = init_params(4, 2, rng_seed=seed)
            mixed = rng.normal(size=(4, 6, 6))
            out, mc, ms = cbam(mixed, p)
            oout, omc, oms = naive_cbam(mixed, p)
            assert np.abs(out - oout).max() < 1e-12
            assert np.abs(mc - omc).max() < 1e-12
            assert np.abs(ms - oms).max() < 1e-12


class TestFusionForward:
    def test_output_shape(self, rng):
        p = init_params(4, 2, rng_seed=4)
        f_rgb, f_m = rand_maps(rng)
        trace = fusion_forward(f_rgb, f_m, p)
        assert trace.output.shape == f_rgb.shape

    def test_big_logit_gap_ignores_motion_stream(self, rng):
        p = init_params(4, 2, rng_seed=5)
        steered = FusionParams(
            gate_w1=np.zeros_like(p.gate_w1),
            gate_b1=np.zeros_like(p.gate_b1),
            gate_w2=np.zeros_like(p.gate_w2),
            gate_b2=np.array([50.0, 0.0]),
            chan_w1=p.chan_w1,
            chan_b1=p.chan_b1,
            chan_w2=p.chan_w2,
            chan_b2=p.chan_b2,
            spatial_kernel=p.spatial_kernel,
            spatial_bias=p.spatial_bias,
        )
        f_rgb, _ = rand_maps(rng)
        trace = fusion_forward(f_rgb, np.zeros_like(f_rgb), steered)
        expected, _, _ = cbam(f_rgb, steered)
        assert np.abs(trace.output - expected).max() < 1e-9

    def test_composes_the_two_stages(self, rng):
        p = init_params(4, 2, rng_seed=6)
        f_rgb, f_m = rand_maps(rng)
        trace = fusion_forward(f_rgb, f_m, p)
        (w0, w1), mixed = naive_weight_block(f_rgb, f_m, p)
        oout, omc, oms = naive_cbam(mixed, p)
        assert trace.weights[0] == pytest.approx(w0, abs=1e-12)
        assert np.abs(trace.mixed - mixed).max() < 1e-12
        assert np.abs(trace.channel_attention - omc).max() < 1e-12
        assert np.abs(trace.spatial_attention - oms).max() < 1e-12
        assert np.abs(trace.output - oout).max() < 1e-12

    def test_structural_symmetry_under_stream_swap(self, rng):
        c = 4
        p = init_params(c, 2, rng_seed=7)
        swapped = FusionParams(
            gate_w1=np.concatenate([p.gate_w1[:, c:], p.gate_w1[:, :c]], axis=1),
            gate_b1=p.gate_b1,
            gate_w2=p.gate_w2[::-1].copy(),
            gate_b2=p.gate_b2[::-1].copy(),
            chan_w1=p.chan_w1,
            chan_b1=p.chan_b1,
            chan_w2=p.chan_w2,
            chan_b2=p.chan_b2,
            spatial_kernel=p.spatial_kernel,
            spatial_bias=p.spatial_bias,
        )
        f_rgb, f_m = rand_maps(rng)
        a = fusion_forward(f_rgb, f_m, p)
        b = fusion_forward(f_m, f_rgb, swapped)
        assert np.abs(a.output - b.output).max() < 1e-12


def flatten_params(p: FusionParams):
    names = [
        "gate_w1", "gate_b1", "gate_w2", "gate_b2",
        "chan_w1", "chan_b1", "chan_w2", "chan_b2",
        "spatial_kernel", "spatial_bias",
    ]
    return names, [np.atleast_1d(np.asarray(getattr(p, n), dtype=np.float64)) for n in names]


def rebuild_params(names, arrays):
    kwargs = dict(zip(names, arrays))
    kwargs["spatial_bias"] = float(kwargs["spatial_bias"][0])
    return FusionParams(**kwargs)


def loss_fn(f_rgb, f_m, p):
    return float(fusion_forward(f_rgb, f_m, p).output.sum())


def gradcheck(seed, step=1e-5, tol=1e-4):
    rng = np.random.default_rng(seed)
    p = init_params(4, 2, rng_seed=seed)
    f_rgb = rng.normal(size=(4, 6, 6))
    f_m = rng.normal(size=(4, 6, 6))
    trace = fusion_forward(f_rgb, f_m, p)
    grads = fusion_backward(trace, np.ones_like(trace.output), p)

    def rel_err(analytic, numeric):
        return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)

    worst = 0.0
    names, arrays = flatten_params(p)
    for name, arr in zip(names, arrays):
        grad = np.atleast_1d(np.asarray(getattr(grads, name), dtype=np.float64))
        for idx in range(arr.size):
            bumped = [a.copy() for a in arrays]
            bumped[names.index(name)] = bumped[names.index(name)].reshape(arr.shape)
            flat = bumped[names.index(name)].reshape(-1)
            flat[idx] += step
            hi = loss_fn(f_rgb, f_m, rebuild_params(names, bumped))
            flat[idx] -= 2 * step
            lo = loss_fn(f_rgb, f_m, rebuild_params(names, bumped))
            numeric = (hi - lo) / (2 * step)
            worst = max(worst, rel_err(grad.reshape(-1)[idx], numeric))
    for label, tensor, grad in (("rgb", f_rgb, grads.f_rgb), ("m", f_m, grads.f_m)):
        for idx in range(tensor.size):
            bumped = tensor.copy().reshape(-1)
            bumped[idx] += step
            hi = loss_fn(bumped.reshape(tensor.shape), f_m, p) if label == "rgb" else loss_fn(
                f_rgb, bumped.reshape(tensor.shape), p
            )
            bumped[idx] -= 2 * step
            lo = loss_fn(bumped.reshape(tensor.shape), f_m, p) if label == "rgb" else loss_fn(
                f_rgb, bumped.reshape(tensor.shape), p
            )
            numeric = (hi - lo) / (2 * step)
            worst = max(worst, rel_err(grad.reshape(-1)[idx], numeric))
    return worst


class TestFusionBackward:
    def test_zero_upstream_zero_grads(self, rng):
        p = init_params(4, 2, rng_seed=8)
        f_rgb, f_m = rand_maps(rng)
        trace = fusion_forward(f_rgb, f_m, p)
        grads = fusion_backward(trace, np.zeros_like(trace.output), p)
        names, _ = flatten_params(p)
        for name in names:
            assert np.all(np.asarray(getattr(grads, name)) == 0.0)
        assert np.all(grads.f_rgb == 0.0) and np.all(grads.f_m == 0.0)

    def test_gradcheck_two_seeds(self):
        for seed in (0, 1):
            assert gradcheck(seed) <= 1e-4

    def test_upstream_shape_checked(self, rng):
        p = init_params(4, 2, rng_seed=9)
        f_rgb, f_m = rand_maps(rng)
        trace = fusion_forward(f_rgb, f_m, p)
        with pytest.raises(ValueError, match="shape"):
            fusion_backward(trace, np.zeros((4, 6, 5)), p)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        p = init_params(8, 4, rng_seed=11)
        path = tmp_path / "params.bin"
        save_params(p, path)
        q = load_params(path)
        names, arrays = flatten_params(p)
        _, arrays_q = flatten_params(q)
        for a, b in zip(arrays, arrays_q):
            assert np.array_equal(a, b)

    def test_rejects_other_files(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b'{"format": "other"}\n1234')
        with pytest.raises(ValueError, match="fusion params"):
            load_params(path)
