"""Tests for the training core.

The load-bearing oracle is central finite differences in float64: every
layer's analytic backward must reproduce the numerical derivative of the
loss.  Layer forwards are additionally checked against direct numpy
formulas where those are trivial to state.
"""

import numpy as np
import pytest

from bitbranch.bitcore import PAD_NEG_ONE, PAD_ZERO, ConvGeometry
from bitbranch.nnengine import (
    ActSign,
    Adam,
    AvgPool2d,
    BatchNorm2d,
    EngineError,
    GlobalAvgPool,
    Identity,
    Linear,
    Model,
    NanError,
    PReLU,
    Parameter,
    QuantConv2d,
    Sequential,
    TrainConfig,
    evaluate,
    linear_lr,
    make_rng,
    pixel_softmax_cross_entropy,
    softmax_cross_entropy,
    train_stage,
    two_stage_train,
)


def fd_check_params(model, x, labels, loss_fn, rtol=1e-4, h=1e-5, max_coords=6, seed=0):
    """Compare analytic parameter gradients with central differences."""
    out, tape = model.forward(x, train=True)
    _, dl = loss_fn(out, labels)
    model.zero_grad()
    model.backward(tape, dl)
    rng = np.random.default_rng(seed)

    def loss_value():
        o, _ = model.forward(x, train=True)
        return loss_fn(o, labels)[0]

    for name, p in model.named_params():
        analytic = p.grad_or_zero()
        flat = p.data.reshape(-1)
        coords = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss_value()
            flat[idx] = orig - h
            lm = loss_value()
            flat[idx] = orig
            fd = (lp - lm) / (2 * h)
            a = analytic.reshape(-1)[idx]
            err = abs(fd - a) / max(abs(fd), abs(a), 1e-8)
            assert err <= rtol or abs(fd - a) <= 1e-9, (
                f"{name}[{idx}]: analytic {a} vs fd {fd}"
            )


def fd_check_input(model, x, labels, loss_fn, rtol=1e-4, h=1e-5, max_coords=8, seed=1):
    out, tape = model.forward(x, train=True)
    _, dl = loss_fn(out, labels)
    model.zero_grad()
    gx = model.backward(tape, dl)
    rng = np.random.default_rng(seed)
    flat = x.reshape(-1)
    coords = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
    for idx in coords:
        orig = flat[idx]
        flat[idx] = orig + h
        lp = loss_fn(model.forward(x, train=True)[0], labels)[0]
        flat[idx] = orig - h
        lm = loss_fn(model.forward(x, train=True)[0], labels)[0]
        flat[idx] = orig
        fd = (lp - lm) / (2 * h)
        a = gx.reshape(-1)[idx]
        err = abs(fd - a) / max(abs(fd), abs(a), 1e-8)
        assert err <= rtol or abs(fd - a) <= 1e-9


class TestLayerGradients:
    def test_linear(self):
        rng = make_rng(0, "t-linear")
        model = Model(Linear(6, 4, rng=rng))
        x = rng.standard_normal((3, 6))
        labels = np.array([0, 2, 1])
        fd_check_params(model, x, labels, softmax_cross_entropy)
        fd_check_input(model, x, labels, softmax_cross_entropy)

    @pytest.mark.parametrize("stride,pad,dil", [(1, 1, 1), (2, 1, 1), (1, 0, 2), (2, 2, 1)])
    def test_conv_geometries(self, stride, pad, dil):
        rng = make_rng(1, "t-conv")
        geom = ConvGeometry(stride, pad, dil, PAD_ZERO)
        model = Model(Sequential(
            QuantConv2d(3, 4, 3, geom, rng=rng),
            GlobalAvgPool(),
        ))
        x = rng.standard_normal((2, 3, 8, 8))
        labels = np.array([1, 3])
        fd_check_params(model, x, labels, softmax_cross_entropy)
        fd_check_input(model, x, labels, softmax_cross_entropy)

    def test_batchnorm_train_mode(self):
        rng = make_rng(2, "t-bn")
        bn = BatchNorm2d(3)
        bn.gamma.data = rng.uniform(0.5, 1.5, 3)
        bn.beta.data = rng.standard_normal(3)
        model = Model(Sequential(bn, GlobalAvgPool()))
        x = rng.standard_normal((4, 3, 5, 5))
        labels = np.array([0, 1, 2, 0])
        fd_check_params(model, x, labels, softmax_cross_entropy)
        fd_check_input(model, x, labels, softmax_cross_entropy)

    def test_prelu(self):
        rng = make_rng(3, "t-prelu")
        model = Model(Sequential(PReLU(3), GlobalAvgPool()))
        x = rng.standard_normal((2, 3, 4, 4)) + 0.05
        labels = np.array([2, 0])
        fd_check_params(model, x, labels, softmax_cross_entropy)
        fd_check_input(model, x, labels, softmax_cross_entropy)

    def test_avg_pool(self):
        rng = make_rng(4, "t-pool")
        model = Model(Sequential(AvgPool2d(2), GlobalAvgPool()))
        x = rng.standard_normal((2, 3, 4, 4))
        labels = np.array([1, 1])
        fd_check_input(model, x, labels, softmax_cross_entropy)

    def test_pixel_loss(self):
        rng = make_rng(5, "t-pix")
        model = Model(QuantConv2d(2, 3, 1, ConvGeometry(pad_value=PAD_ZERO), rng=rng))
        x = rng.standard_normal((2, 2, 4, 4))
        labels = rng.integers(0, 3, size=(2, 4, 4))
        fd_check_params(model, x, labels, pixel_softmax_cross_entropy)
        fd_check_input(model, x, labels, pixel_softmax_cross_entropy)


class TestFullModelGradient:
    def test_two_conv_model_fd(self):
        # two conv layers, 8 channels, 8x8 input, quantizers as identity
        rng = make_rng(7, "t-full")
        model = Model(Sequential(
            QuantConv2d(3, 8, 3, ConvGeometry(padding=1, pad_value=PAD_ZERO), rng=rng),
            BatchNorm2d(8),
            PReLU(8),
            QuantConv2d(8, 8, 3, ConvGeometry(padding=1, pad_value=PAD_ZERO), rng=rng),
            BatchNorm2d(8),
            PReLU(8),
            GlobalAvgPool(),
            Linear(8, 4, rng=rng),
        ))
        x = rng.standard_normal((3, 3, 8, 8))
        labels = np.array([0, 3, 1])
        fd_check_params(model, x, labels, softmax_cross_entropy, rtol=1e-4)


class TestQuantizedPaths:
    def test_sign_backward_factor_unit(self):
        # gradient through the binarizer at x = -0.5 is scaled by exactly 1
        layer = ActSign()
        cache = {}
        layer.forward(np.array([[-0.5]]), True, cache)
        g = layer.backward(np.array([[3.0]]), cache)
        assert g[0, 0] == pytest.approx(3.0)

    def test_zero_input_parity(self):
        # sign(0) = +1, so a zero image becomes all +1 and each output equals
        # the sum of that filter's weight signs at interior positions
        rng = make_rng(8, "t-parity")
        conv = QuantConv2d(5, 3, 3, ConvGeometry(), weight_quant="sign", rng=rng)
        model = Model(Sequential(ActSign(), conv))
        x = np.zeros((1, 5, 5, 5))
        out, _ = model.forward(x, train=False)
        want = np.sign(conv.weight.data).sum(axis=(1, 2, 3))
        for o in range(3):
            assert np.all(out[0, o] == want[o])

    def test_packed_equals_real_route(self):
        rng = make_rng(9, "t-packed")
        conv = QuantConv2d(70, 4, 3, ConvGeometry(padding=1), weight_quant="sign", rng=rng)
        model = Model(Sequential(ActSign(), conv))
        x = rng.standard_normal((2, 70, 6, 6))
        out_real, _ = model.forward(x, train=False)
        conv.use_packed = True
        out_packed, _ = model.forward(x, train=False)
        np.testing.assert_array_equal(out_real, out_packed)
        assert conv.calls_real == 1 and conv.calls_packed == 1

    def test_packed_requires_binary_input(self):
        rng = make_rng(10, "t-packed2")
        conv = QuantConv2d(4, 2, 1, weight_quant="sign", rng=rng)
        conv.use_packed = True
        with pytest.raises(Exception):
            conv.forward(np.full((1, 4, 2, 2), 0.5), False, {})

    def test_frozen_param_gets_no_grad(self):
        rng = make_rng(11, "t-frozen")
        lin = Linear(4, 2, rng=rng)
        lin.weight.frozen = True
        model = Model(lin)
        x = rng.standard_normal((2, 4))
        out, tape = model.forward(x)
        _, dl = softmax_cross_entropy(out, np.array([0, 1]))
        model.backward(tape, dl)
        assert lin.weight.grad is None
        assert np.all(lin.weight.grad_or_zero() == 0)
        assert lin.bias.grad is not None


class TestBatchNormModes:
    def test_inference_is_pure_function_of_running_stats(self):
        rng = make_rng(12, "t-bnmode")
        bn = BatchNorm2d(3)
        bn.running_mean = rng.standard_normal(3)
        bn.running_var = rng.uniform(0.5, 2.0, 3)
        x1 = rng.standard_normal((2, 3, 4, 4))
        x2 = rng.standard_normal((8, 3, 4, 4))
        y1 = bn.forward(x1, False, {})
        # a different batch in eval mode must not disturb x1's outputs
        bn.forward(x2, False, {})
        y1again = bn.forward(x1, False, {})
        np.testing.assert_array_equal(y1, y1again)
        inv = 1 / np.sqrt(bn.running_var + bn.eps)
        want = (x1 - bn.running_mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
        np.testing.assert_allclose(y1, want)

    def test_train_mode_updates_running_stats(self):
        bn = BatchNorm2d(2)
        x = np.random.default_rng(0).standard_normal((4, 2, 3, 3))
        before = bn.running_mean.copy()
        bn.forward(x, True, {})
        assert not np.array_equal(bn.running_mean, before)

    def test_identity_state_passthrough(self):
        bn = BatchNorm2d(3, eps=0.0)
        bn.running_var = np.ones(3)
        x = np.random.default_rng(1).standard_normal((2, 3, 4, 4))
        np.testing.assert_array_equal(bn.forward(x, False, {}), x)


class TestIdentityConvExample:
    def test_identity_conv_plus_identity_bn(self):
        conv = QuantConv2d(3, 3, 1, ConvGeometry(pad_value=PAD_ZERO))
        conv.weight.data = np.eye(3).reshape(3, 3, 1, 1).astype(np.float64)
        bn = BatchNorm2d(3, eps=0.0)
        model = Model(Sequential(conv, bn))
        x = np.random.default_rng(2).standard_normal((2, 3, 5, 5))
        out, _ = model.forward(x, train=False)
        np.testing.assert_array_equal(out, x)


class TestAdam:
    def test_zero_grad_keeps_params(self):
        p = Parameter(np.array([1.0, 2.0]), decay=True)
        opt = Adam([p], TrainConfig(), weight_decay=0.0)
        for _ in range(3):
            p.zero_grad()
            opt.step(1e-3)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_single_step_closed_form(self):
        # one step with constant grad g: m-hat = g, v-hat = g^2, so the
        # update is -lr * g / (|g| + eps)
        g = np.array([0.3, -2.0])
        p = Parameter(np.zeros(2))
        cfg = TrainConfig()
        opt = Adam([p], cfg)
        p.add_grad(g)
        opt.step(1e-2)
        want = -1e-2 * g / (np.abs(g) + cfg.eps)
        np.testing.assert_allclose(p.data, want, rtol=1e-10)

    def test_schedule_endpoints(self):
        assert linear_lr(5e-4, 0, 90) == pytest.approx(5e-4)
        assert linear_lr(5e-4, 90, 90) == 0.0
        assert linear_lr(1.0, 30, 90) == pytest.approx(2 / 3)

    def test_decay_only_on_flagged_params(self):
        pw = Parameter(np.array([1.0]), decay=True)
        pg = Parameter(np.array([1.0]), decay=False)
        opt = Adam([pw, pg], TrainConfig(), weight_decay=0.1)
        pw.zero_grad()
        pg.zero_grad()
        opt.step(1e-2)
        assert pw.data[0] < 1.0
        assert pg.data[0] == 1.0


def tiny_classifier(mode: str, seed: int = 13) -> Model:
    rng = make_rng(seed, "tiny-model")
    wq = "sign" if mode == "stage2" else None
    act = ActSign() if mode in ("stage1", "stage2") else Identity()
    layers = [
        QuantConv2d(3, 8, 3, ConvGeometry(padding=1, pad_value=PAD_ZERO), rng=rng),
        BatchNorm2d(8),
        PReLU(8),
        act,
        QuantConv2d(8, 8, 3, ConvGeometry(padding=1, pad_value=PAD_NEG_ONE),
                    weight_quant=wq, rng=rng),
        PReLU(8),
        BatchNorm2d(8),
        GlobalAvgPool(),
        Linear(8, 4, rng=rng),
    ]
    return Model(Sequential(*layers))


def tiny_data(n=64, seed=0):
    rng = make_rng(seed, "tiny-data")
    labels = rng.integers(0, 4, size=n)
    images = rng.standard_normal((n, 3, 8, 8)) * 0.3
    for i, lab in enumerate(labels):
        images[i, lab % 3, :, :] += 1.0 + 0.5 * (lab // 3)
    return images, labels


class TestTraining:
    def test_loss_decreases_on_smoke_run(self):
        images, labels = tiny_data(64)
        model = tiny_classifier("stage1")
        cfg = TrainConfig(lr0=5e-3, batch_size=16, epochs_stage1=4)
        res = train_stage(model, images, labels, cfg, 4, 1e-5, make_rng(0, "smoke"))
        assert res.stats[-1].mean_loss < res.stats[0].mean_loss
        assert np.isfinite(res.stats[-1].mean_loss)

    def test_two_stage_inheritance_and_packed_forward(self):
        images, labels = tiny_data(32)
        cfg = TrainConfig(lr0=1e-3, batch_size=16, epochs_stage1=1, epochs_stage2=1, seed=3)
        captured = {}

        def build(mode):
            model = tiny_classifier(mode)
            captured[mode] = model
            if mode == "stage2":
                # capture the state right after loading to verify inheritance
                orig = model.load_state_dict

                def load_and_record(state):
                    orig(state)
                    captured["inherited"] = model.state_dict()

                model.load_state_dict = load_and_record
            return model

        model2, res1, _ = two_stage_train(build, images, labels, cfg)
        for k, v in res1.state.items():
            np.testing.assert_array_equal(captured["inherited"][k], v)
        binary_convs = [c for c in model2.conv_layers() if c.weight_quant == "sign"]
        assert binary_convs
        for conv in binary_convs:
            assert conv.calls_packed > 0
            assert conv.calls_real == 0
        stage1_convs = captured["stage1"].conv_layers()
        assert all(c.calls_packed == 0 for c in stage1_convs)

    def test_determinism_bitwise(self):
        images, labels = tiny_data(32)
        cfg = TrainConfig(lr0=1e-3, batch_size=16, epochs_stage1=2, seed=5)

        def run():
            model = tiny_classifier("stage1", seed=5)
            return train_stage(
                model, images, labels, cfg, 2, 1e-5, make_rng(5, "det")
            ).state

        s1, s2 = run(), run()
        assert set(s1) == set(s2)
        for k in s1:
            np.testing.assert_array_equal(s1[k], s2[k])

    def test_empty_dataset_rejected(self):
        model = tiny_classifier("stage1")
        with pytest.raises(EngineError):
            train_stage(model, np.empty((0, 3, 8, 8)), np.empty(0, dtype=int),
                        TrainConfig(), 1, 0.0, make_rng(0, "e"))

    def test_nan_aborts_with_location(self):
        images, labels = tiny_data(16)
        model = tiny_classifier("stage1")
        model.params()[0].data[0] = np.inf
        with np.errstate(invalid="ignore"), pytest.raises(NanError):
            train_stage(model, images, labels, TrainConfig(batch_size=8),
                        1, 0.0, make_rng(0, "nan"))

    def test_evaluate_range(self):
        images, labels = tiny_data(32)
        model = tiny_classifier("stage1")
        acc = evaluate(model, images, labels)
        assert 0.0 <= acc <= 1.0


class TestLosses:
    def test_softmax_ce_uniform(self):
        logits = np.zeros((2, 4))
        loss, grad = softmax_cross_entropy(logits, np.array([0, 1]))
        assert loss == pytest.approx(np.log(4))
        np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-12)

    def test_softmax_ce_matches_manual(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((5, 3))
        labels = rng.integers(0, 3, 5)
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        want = -np.log(p[np.arange(5), labels]).mean()
        loss, _ = softmax_cross_entropy(logits, labels)
        assert loss == pytest.approx(want)

    def test_shape_errors(self):
        with pytest.raises(EngineError):
            softmax_cross_entropy(np.zeros((2, 3)), np.zeros(3, dtype=int))
        with pytest.raises(EngineError):
            pixel_softmax_cross_entropy(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3), dtype=int))


class TestErrorPaths:
    def test_shape_error_names_layer(self):
        model = Model(Sequential(Linear(4, 2), Linear(3, 2)))
        with pytest.raises(EngineError, match="layer 1"):
            model.forward(np.zeros((1, 4)))

    def test_backward_without_tape(self):
        model = Model(Sequential(Linear(4, 2)))
        with pytest.raises(EngineError):
            model.backward({}, np.zeros((1, 2)))

    def test_state_dict_roundtrip(self):
        m1 = tiny_classifier("stage1", seed=1)
        m2 = tiny_classifier("stage1", seed=2)
        m2.load_state_dict(m1.state_dict())
        for (k1, p1), (k2, p2) in zip(m1.named_params(), m2.named_params()):
            assert k1 == k2
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_state_dict_rejects_mismatch(self):
        m1 = tiny_classifier("stage1")
        state = m1.state_dict()
        state.pop(next(iter(state)))
        with pytest.raises(EngineError):
            m1.load_state_dict(state)
