import inspect

import numpy as np
import pytest
from gradcheck import generic_point, scalar_loss_check
from threadpoolctl import threadpool_limits

from dasdenoise.cpunet import (
    ArchitectureError,
    CheckpointError,
    CMLayer,
    CPMLayer,
    CPUNet,
    CPUNetConfig,
    TrainConfig,
    branch_dims,
    build_cpunet,
    cm_forward,
    cpm_forward,
    cpunet_forward,
    denoise_record,
    fit_record,
    load_checkpoint,
    prepare_patches,
    save_checkpoint,
    train_unsupervised,
)
from dasdenoise.nn_core import (
    DropoutConfig,
    LeakyReluConfig,
    ShapeError,
    UsageError,
    dense_forward,
    layer_norm_forward,
    leaky_relu,
)
from dasdenoise.patching import PatchConfig

# smallest widths that still give every CPM three non-empty branches
SMALL = dict(input_dim=16, encoder_dims=(8, 6, 4, 3), decoder_dims=(3, 4, 6, 8))


class TestBranches:
    def test_split_64(self):
        assert branch_dims(64) == (32, 16, 16)

    @pytest.mark.parametrize("d", [3, 5, 7, 8, 9, 13, 128])
    def test_split_sums(self, d):
        dims = branch_dims(d)
        assert sum(dims) == d and min(dims) >= 1
        assert dims[0] >= dims[1] >= dims[2]

    def test_too_narrow(self):
        with pytest.raises(ArchitectureError):
            branch_dims(2)


class TestCPM:
    def test_output_length(self):
        cpm = CPMLayer(20, 64, np.random.default_rng(0))
        assert cpm.dims == (32, 16, 16)
        assert cpm_forward(cpm, np.ones((3, 20))).shape == (3, 64)

    def test_zero_input_is_bias_path(self):
        cpm = CPMLayer(7, 8, np.random.default_rng(1), dropout=0.3)
        cpm.eval()
        for b in cpm.branches:
            b.dense.p.bias[:] = np.random.default_rng(2).standard_normal(b.out_dim)
            b.norm.p.gamma[:] = 1.5
        expected = np.concatenate([
            leaky_relu(layer_norm_forward(b.norm.p, b.dense.p.bias[None]), LeakyReluConfig())
            for b in cpm.branches
        ], axis=-1)
        np.testing.assert_allclose(cpm_forward(cpm, np.zeros((1, 7))), expected, rtol=1e-12)

    def test_shape_error(self):
        cpm = CPMLayer(5, 8, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            cpm.forward(np.zeros((1, 6)))

    @pytest.mark.parametrize("dropout", [0.0, 0.25])
    def test_gradients(self, dropout):
        rng = np.random.default_rng(3)
        cpm = generic_point(CPMLayer(6, 8, rng, dropout=dropout))
        cpm.train()
        x = rng.standard_normal((4, 6))
        w = rng.standard_normal((4, 8))

        class Fixed:
            # replay the same dropout masks on every forward
            def forward(self, x):
                cpm.reseed_dropout(11)
                return cpm.forward(x)

            def backward(self, g):
                return cpm.backward(g)

            named_parameters = cpm.named_parameters
            named_gradients = cpm.named_gradients

        assert scalar_loss_check(Fixed(), x, w) <= 1e-4


class TestCM:
    def test_eval_is_deterministic_block(self):
        rng = np.random.default_rng(4)
        cm = CMLayer(16, rng, dropout=0.5).eval()
        x = rng.standard_normal((2, 16))
        expected = leaky_relu(layer_norm_forward(cm.norm.p, dense_forward(cm.dense.p, x)), LeakyReluConfig())
        out = cm_forward(cm, x)
        assert out.shape == (2, 16)
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(5)
        cm = CMLayer(5, rng)
        assert scalar_loss_check(cm, rng.standard_normal((3, 5)), rng.standard_normal((3, 5))) <= 1e-4

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            CMLayer(4, np.random.default_rng(0)).forward(np.zeros(5))


class TestArchitecture:
    @pytest.mark.parametrize("cfg", [CPUNetConfig(), CPUNetConfig.field_preset()], ids=["synthetic", "field"])
    def test_closure(self, cfg):
        net = build_cpunet(cfg)
        enc = cfg.encoder_dims
        assert [e.out_dim for e in net.encoders] == list(enc)
        assert [e.in_dim for e in net.encoders] == [cfg.input_dim, *enc[:-1]]
        assert [c.out_dim for c in net.cms] == list(enc[:-1])
        assert net.decoders[0].in_dim == enc[-1]
        for k in range(1, 4):
            assert net.decoders[k].in_dim == net.decoders[k - 1].out_dim + cfg.decoder_dims[k]
        assert net.head.p.weights.shape == (cfg.input_dim, cfg.decoder_dims[-1])

    def test_field_preset(self):
        assert build_cpunet(CPUNetConfig.field_preset()).encoders[0].out_dim == 128

    @pytest.mark.parametrize("kw,stage", [
        (dict(encoder_dims=(64, 32, 16, 8), decoder_dims=(8, 16, 32, 32)), "reversed"),
        (dict(encoder_dims=(64, 32, 16), decoder_dims=(16, 32, 64)), "4 encoder"),
        (dict(encoder_dims=(64, 32, 2, 8), decoder_dims=(8, 2, 32, 64)), "encoder stage 3"),
    ])
    def test_bad_dims_name_stage(self, kw, stage):
        with pytest.raises(ArchitectureError, match=stage):
            CPUNet(CPUNetConfig(**kw))

    def test_deterministic_build(self):
        a, b = build_cpunet(CPUNetConfig(seed=3)), build_cpunet(CPUNetConfig(seed=3))
        assert a.parameter_count() == b.parameter_count()
        for (na, pa), (nb, pb) in zip(a.named_parameters().items(), b.named_parameters().items()):
            assert na == nb and pa.tobytes() == pb.tobytes()
        c = build_cpunet(CPUNetConfig(seed=4))
        assert c.parameter_count() == a.parameter_count()
        assert c.head.p.weights.tobytes() != a.head.p.weights.tobytes()

    def test_forward_sane_and_repeatable(self):
        net = build_cpunet().eval()
        y = np.random.default_rng(0).standard_normal(2304)
        out = cpunet_forward(net, y)
        assert out.shape == (2304,) and np.all(np.isfinite(out))
        assert cpunet_forward(net, y).tobytes() == out.tobytes()
        with pytest.raises(ShapeError):
            cpunet_forward(net, y[:-1])

    def test_shrunken_full_gradient(self):
        rng = np.random.default_rng(6)
        net = generic_point(CPUNet(CPUNetConfig(**SMALL, seed=2)).eval())
        x = rng.standard_normal((3, 16))
        assert scalar_loss_check(net, x, rng.standard_normal((3, 16))) <= 1e-4

    def test_shrunken_full_gradient_with_dropout(self):
        rng = np.random.default_rng(7)
        net = generic_point(CPUNet(CPUNetConfig(**SMALL, dropout=0.2, seed=1)).train(), 1)

        class Replay:
            def forward(self, x):
                net.reseed_dropout(5)
                return net.forward(x)

            backward = net.backward
            named_parameters = net.named_parameters
            named_gradients = net.named_gradients

        assert scalar_loss_check(Replay(), rng.standard_normal((2, 16)), rng.standard_normal((2, 16))) <= 1e-4


def small_net(seed=0, **kw):
    return CPUNet(CPUNetConfig(input_dim=64, encoder_dims=(16, 8, 6, 4), decoder_dims=(4, 6, 8, 16),
                               seed=seed, **kw))


def wavy(shape=(40, 36), seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(shape[0])[:, None]
    x = np.arange(shape[1])[None, :]
    return np.sin(0.3 * t - 0.2 * x) + 0.2 * rng.standard_normal(shape)


class TestTraining:
    def test_zero_epochs(self):
        net = small_net()
        before = {k: v.copy() for k, v in net.named_parameters().items()}
        patches, _ = prepare_patches(wavy(), PatchConfig(8, 4))
        out, hist = train_unsupervised(net, patches, TrainConfig(epochs=0))
        assert out is net and hist == []
        for k, v in net.named_parameters().items():
            assert v.tobytes() == before[k].tobytes()

    def test_empty(self):
        with pytest.raises(UsageError):
            train_unsupervised(small_net(), np.empty((0, 64)))

    def test_wrong_length(self):
        with pytest.raises(ShapeError):
            train_unsupervised(small_net(), np.zeros((3, 63)))

    def test_loss_decreases(self):
        net = small_net()
        _, hist = fit_record(net, wavy(), PatchConfig(8, 4), TrainConfig(epochs=20, lr=3e-3))
        assert len(hist) == 20 and hist[-1] < hist[0]
        assert net.stats is not None

    def test_label_free_api(self):
        for fn in (train_unsupervised, fit_record):
            names = set(inspect.signature(fn).parameters)
            assert not names & {"clean", "target", "labels", "reference"}

    def test_overfit_constant_patch(self):
        net = CPUNet(CPUNetConfig(seed=0))
        c = 0.7
        y = np.full((1, 2304), c)
        train_unsupervised(net, y, TrainConfig(epochs=400, lr=1e-3))
        out = net.predict(y)
        assert np.abs(out - c).max() <= 1e-2 * c

    def test_history_deterministic_across_thread_counts(self):
        cfg = TrainConfig(epochs=3, lr=2e-3, seed=9)
        hists = []
        for threads in (1, 2):
            with threadpool_limits(threads):
                _, h = fit_record(small_net(seed=9, dropout=0.1), wavy(), PatchConfig(8, 4), cfg)
            hists.append(h)
        assert hists[0] == hists[1]

    def test_nan_loss_reports_position(self):
        net = small_net()
        net.head.p.bias[:] = np.nan
        with pytest.raises(FloatingPointError, match="epoch 1, batch 1"):
            train_unsupervised(net, np.ones((4, 64)), TrainConfig(epochs=1))


class TestDenoiseRecord:
    def test_field_record_shape(self):
        net = CPUNet()
        record = np.random.default_rng(0).standard_normal((2000, 960))
        assert denoise_record(net, record, PatchConfig(48, 0)).shape == (2000, 960)

    def test_identity_network_round_trip(self):
        net = small_net()
        net.forward = lambda x: x
        rec = wavy((30, 21))
        np.testing.assert_allclose(denoise_record(net, rec, PatchConfig(8, 3)), rec, rtol=1e-12, atol=1e-12)

    def test_deterministic_even_with_dropout(self):
        net = small_net(dropout=0.4)
        rec = wavy()
        a = denoise_record(net, rec, PatchConfig(8, 2))
        assert denoise_record(net, rec, PatchConfig(8, 2)).tobytes() == a.tobytes()

    def test_too_small(self):
        with pytest.raises(UsageError):
            denoise_record(small_net(), np.zeros((7, 30)), PatchConfig(8, 0))

    def test_patch_size_mismatch(self):
        with pytest.raises(ShapeError):
            denoise_record(small_net(), np.zeros((20, 20)), PatchConfig(9, 0))

    def test_stats_precedence(self):
        net = small_net()
        rec = wavy() * 3 + 1
        own = denoise_record(net, rec, PatchConfig(8, 0))
        net.stats = (1.0, 3.0)
        stored = denoise_record(net, rec, PatchConfig(8, 0))
        explicit = denoise_record(net, rec, PatchConfig(8, 0), stats=(1.0, 3.0))
        assert stored.tobytes() == explicit.tobytes()
        assert not np.array_equal(own, stored)

    def test_improves_snr_on_simple_record(self):
        from dasdenoise.metrics import snr_db

        t = np.arange(64)[:, None]
        x = np.arange(48)[None, :]
        clean = np.sin(0.25 * t - 0.15 * x)
        noisy = clean + 0.6 * np.random.default_rng(3).standard_normal(clean.shape)
        net = CPUNet(CPUNetConfig(input_dim=256, encoder_dims=(16, 8, 6, 4), decoder_dims=(4, 6, 8, 16)))
        fit_record(net, noisy, PatchConfig(16, 12), TrainConfig(epochs=30, lr=3e-3))
        out = denoise_record(net, noisy, PatchConfig(16, 8))
        assert snr_db(clean, out) > snr_db(clean, noisy)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = small_net(seed=3)
        fit_record(net, wavy(), PatchConfig(8, 4), TrainConfig(epochs=2))
        path = tmp_path / "m.cpun"
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        assert back.config == net.config and back.stats == net.stats
        for (na, pa), (nb, pb) in zip(net.named_parameters().items(), back.named_parameters().items()):
            assert na == nb and pa.tobytes() == pb.tobytes()
        rec = wavy(seed=1)
        assert denoise_record(back, rec, PatchConfig(8, 2)).tobytes() == \
            denoise_record(net, rec, PatchConfig(8, 2)).tobytes()
        # no stray temp files from the atomic write
        assert [p.name for p in tmp_path.iterdir()] == ["m.cpun"]

    def test_plain_autoencoder_round_trip(self, tmp_path):
        from dasdenoise.baselines import PlainAutoencoder

        net = PlainAutoencoder(CPUNetConfig(input_dim=64, encoder_dims=(16, 8, 6, 4), decoder_dims=(4, 6, 8, 16)))
        save_checkpoint(net, tmp_path / "p.cpun")
        back = load_checkpoint(tmp_path / "p.cpun")
        assert isinstance(back, PlainAutoencoder)

    @pytest.mark.parametrize("mutate,match", [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + bytes([9]) + b[5:], "version"),
        (lambda b: b[:-8], "truncated"),
        (lambda b: b + b"\0", "trailing"),
    ])
    def test_corrupt(self, tmp_path, mutate, match):
        path = tmp_path / "m.cpun"
        save_checkpoint(small_net(), path)
        path.write_bytes(mutate(path.read_bytes()))
        with pytest.raises(CheckpointError, match=match):
            load_checkpoint(path)


def test_dropout_config_default_rate():
    # the networks default to rate 0 but the layers stay configurable
    assert CPUNetConfig().dropout == 0.0
    assert DropoutConfig().rate == 0.1
