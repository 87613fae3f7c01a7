"""Invertible-layer semantics: exact inverses, log-det-Jacobians against
numerically assembled Jacobians, and the multi-scale encode/decode contract."""

import math

import numpy as np
import pytest

from flowstrike import flow as F
from flowstrike import tensor as T
from flowstrike.flow import FlowConfig, FlowModel, LatentVec
from flowstrike.tensor import Prng, Tensor


def numerical_jacobian(fn, x0: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """J[i, j] = d fn(x)_i / d x_j by central differences; fn maps a flat
    vector to a flat vector."""
    d_in = x0.size
    base = x0.reshape(-1).astype(np.float64)
    cols = []
    for j in range(d_in):
        up = base.copy()
        up[j] += h
        down = base.copy()
        down[j] -= h
        cols.append((fn(up) - fn(down)) / (2 * h))
    return np.stack(cols, axis=1)


def logabsdet_np(mat: np.ndarray) -> float:
    return float(np.linalg.slogdet(mat.astype(np.float64))[1])


def randomize_flow(model: FlowModel, seed: int, amplitude: float = 0.25) -> None:
    """Give every layer a non-trivial, still-invertible parameterization."""
    rng = Prng.from_path(seed, "randomize")
    for name, p in model.parameters():
        if name.endswith("actnorm.scale"):
            p.data = (1.0 + amplitude * rng.normal(p.shape)).astype(p.data.dtype)
            p.data[np.abs(p.data) < 0.2] = 0.5
        elif name.endswith("actnorm.bias"):
            p.data = (amplitude * rng.normal(p.shape)).astype(p.data.dtype)
        elif name.endswith("mix.w"):
            c = p.shape[0]
            p.data = (
                F._orthogonal(rng, c) + amplitude * 0.3 * rng.normal((c, c))
            ).astype(p.data.dtype)
        elif name.endswith(("net.w3", "net.b3")):
            p.data = (amplitude * 0.5 * rng.normal(p.shape)).astype(p.data.dtype)
    model.actnorm_initialized = True


class TestActnorm:
    def test_identity(self):
        x = Tensor(Prng(0).normal((2, 3, 4, 4)))
        y, ld = F.actnorm("encode", x, T.ones(3), T.zeros(3))
        np.testing.assert_allclose(y.data, x.data)
        np.testing.assert_allclose(ld.data, 0.0)

    def test_scale_two_logdet(self):
        x = Tensor(Prng(0).normal((1, 1, 1, 1)))
        _, ld = F.actnorm("encode", x, Tensor([2.0]), T.zeros(1))
        assert ld.data[0] == pytest.approx(math.log(2.0), rel=1e-6)

    def test_decode_inverts(self):
        rng = Prng(1)
        x = Tensor(rng.normal((2, 4, 3, 3)))
        scale = Tensor(rng.normal((4,)) + 2.0)
        bias = Tensor(rng.normal((4,)))
        y, ld_e = F.actnorm("encode", x, scale, bias)
        back, ld_d = F.actnorm("decode", y, scale, bias)
        np.testing.assert_allclose(back.data, x.data, atol=1e-5)
        np.testing.assert_allclose(ld_e.data + ld_d.data, 0.0, atol=1e-5)

    def test_zero_scale_rejected(self):
        with pytest.raises(ValueError):
            F.actnorm("encode", Tensor(np.ones((1, 2, 2, 2))), T.zeros(2), T.zeros(2))

    def test_data_dependent_init_normalizes_first_batch(self):
        cfg = FlowConfig(blocks=1, steps=1, in_shape=(2, 4, 4), cond_channels=3)
        model = FlowModel(cfg, seed=0)
        rng = Prng(2)
        x = Tensor(rng.normal((64, 2, 4, 4)) * 1.7 + 0.4)
        cond = Tensor(rng.normal((64, 3, 2, 2)))
        model.encode(x, cond)
        assert model.actnorm_initialized
        # Re-run the first actnorm's input path and inspect its output stats.
        h = F.squeeze(x)
        y, _ = F.actnorm(
            "encode", h, model.param("b0s0.actnorm.scale"), model.param("b0s0.actnorm.bias")
        )
        means = y.data.mean(axis=(0, 2, 3))
        stds = y.data.std(axis=(0, 2, 3))
        np.testing.assert_allclose(means, 0.0, atol=1e-3)
        np.testing.assert_allclose(stds, 1.0, atol=1e-3)


class TestInvConv:
    def test_identity(self):
        x = Tensor(Prng(0).normal((1, 3, 2, 2)))
        y, ld = F.invconv1x1("encode", x, Tensor(np.eye(3)))
        np.testing.assert_allclose(y.data, x.data)
        np.testing.assert_allclose(ld.data, 0.0)

    def test_channel_swap_is_volume_preserving(self):
        x = Tensor(Prng(1).normal((1, 2, 3, 3)))
        w = Tensor(np.array([[0.0, 1.0], [1.0, 0.0]]))
        y, ld = F.invconv1x1("encode", x, w)
        np.testing.assert_allclose(y.data[:, 0], x.data[:, 1])
        np.testing.assert_allclose(y.data[:, 1], x.data[:, 0])
        np.testing.assert_allclose(ld.data, 0.0, atol=1e-6)

    def test_singular_rejected(self):
        x = Tensor(np.ones((1, 2, 2, 2)))
        with pytest.raises(F.SingularTransform):
            F.invconv1x1("encode", x, Tensor(np.zeros((2, 2))))

    def test_logdet_vs_numerical_jacobian(self):
        rng = Prng(3)
        w_np = F._orthogonal(rng, 3) + 0.2 * rng.normal((3, 3)).astype(np.float64)
        w = Tensor(w_np)
        x0 = rng.normal((3, 2, 2)).astype(np.float64)

        def fn(flat):
            x = Tensor(flat.reshape(1, 3, 2, 2))
            y, _ = F.invconv1x1("encode", x, w)
            return y.data.reshape(-1).astype(np.float64)

        jac = numerical_jacobian(fn, x0)
        assert jac.shape == (12, 12)
        _, ld = F.invconv1x1("encode", Tensor(x0[None]), w)
        assert abs(ld.data[0] - logabsdet_np(jac)) < 1e-3

    def test_orthogonal_init_logdet_zero(self):
        model = FlowModel(FlowConfig(1, 1, (2, 4, 4), 3), seed=5)
        w = model.param("b0s0.mix.w")
        assert abs(logabsdet_np(w.data)) < 1e-5


def zero_init_net(channels: int, cond_channels: int, hidden: int, seed: int):
    model = FlowModel(
        FlowConfig(1, 1, (channels, 2, 2), cond_channels, hidden_width=hidden), seed=seed
    )
    # Single-step model holds exactly one coupling net at 4*channels after the
    # squeeze; build a net dict for direct layer tests instead.
    rng = Prng.from_path(seed, "netparams")
    half = channels // 2
    std1 = np.sqrt(2.0 / ((half + cond_channels) * 9))
    net = {
        "w1": Tensor(rng.normal((hidden, half + cond_channels, 3, 3)) * std1, requires_grad=True),
        "b1": Tensor(np.zeros(hidden), requires_grad=True),
        "w2": Tensor(rng.normal((hidden, hidden, 3, 3)) * 0.1, requires_grad=True),
        "b2": Tensor(np.zeros(hidden), requires_grad=True),
        "w3": Tensor(np.zeros((channels, hidden, 3, 3)), requires_grad=True),
        "b3": Tensor(np.zeros(channels), requires_grad=True),
    }
    return net


class TestCoupling:
    def test_zero_init_scales_by_sigmoid_two(self):
        rng = Prng(0)
        net = zero_init_net(4, 2, 8, seed=1)
        x = Tensor(rng.normal((2, 4, 3, 3)))
        cond = Tensor(rng.normal((2, 2, 3, 3)))
        y, ld = F.coupling("encode", x, cond, net)
        s0 = 1.0 / (1.0 + math.exp(-2.0))
        np.testing.assert_allclose(y.data[:, :2], x.data[:, :2])
        np.testing.assert_allclose(y.data[:, 2:], s0 * x.data[:, 2:], rtol=1e-5)
        expected_ld = 2 * 3 * 3 * math.log(s0)
        np.testing.assert_allclose(ld.data, expected_ld, rtol=1e-5)
        back, _ = F.coupling("decode", y, cond, net)
        np.testing.assert_allclose(back.data, x.data, atol=1e-6)

    def test_nonzero_net_decode_inverts(self):
        net = zero_init_net(4, 2, 8, seed=2)
        rng = Prng(3)
        net["w3"].data = rng.normal(net["w3"].shape) * 0.3
        net["b3"].data = rng.normal(net["b3"].shape) * 0.3
        x = Tensor(rng.normal((2, 4, 3, 3)))
        cond = Tensor(rng.normal((2, 2, 3, 3)))
        y, ld_e = F.coupling("encode", x, cond, net)
        back, ld_d = F.coupling("decode", y, cond, net)
        np.testing.assert_allclose(back.data, x.data, atol=1e-5)
        np.testing.assert_allclose(ld_e.data + ld_d.data, 0.0, atol=1e-6)

    def test_logdet_vs_numerical_jacobian(self):
        net = zero_init_net(2, 1, 6, seed=4)
        rng = Prng(5)
        net["w3"].data = rng.normal(net["w3"].shape) * 0.4
        net["b3"].data = rng.normal(net["b3"].shape) * 0.4
        cond = Tensor(rng.normal((1, 1, 2, 2)).astype(np.float64))
        x0 = rng.normal((2, 2, 2)).astype(np.float64)

        def fn(flat):
            y, _ = F.coupling("encode", Tensor(flat.reshape(1, 2, 2, 2)), cond, net)
            return y.data.reshape(-1).astype(np.float64)

        jac = numerical_jacobian(fn, x0)
        _, ld = F.coupling("encode", Tensor(x0[None]), cond, net)
        assert abs(ld.data[0] - logabsdet_np(jac)) < 1e-3

    def test_condition_changes_only_transformed_half(self):
        net = zero_init_net(4, 2, 8, seed=6)
        rng = Prng(7)
        net["w3"].data = rng.normal(net["w3"].shape) * 0.5
        x = Tensor(rng.normal((1, 4, 3, 3)))
        c1 = Tensor(rng.normal((1, 2, 3, 3)))
        c2 = Tensor(rng.normal((1, 2, 3, 3)))
        y1, _ = F.coupling("encode", x, c1, net)
        y2, _ = F.coupling("encode", x, c2, net)
        np.testing.assert_allclose(y1.data[:, :2], y2.data[:, :2])
        assert not np.allclose(y1.data[:, 2:], y2.data[:, 2:])

    def test_odd_channels_rejected(self):
        net = zero_init_net(4, 2, 8, seed=8)
        with pytest.raises(ValueError):
            F.coupling("encode", Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones((1, 2, 2, 2))), net)


class TestSqueezeSplit:
    def test_shape_arithmetic(self):
        x = Tensor(np.zeros((1, 3, 32, 32)))
        assert F.squeeze(x).shape == (1, 12, 16, 16)

    def test_roundtrip_bit_exact(self):
        x = Tensor(Prng(0).normal((2, 3, 8, 8)))
        back = F.unsqueeze(F.squeeze(x))
        np.testing.assert_array_equal(back.data, x.data)

    def test_block_ordering(self):
        x = np.zeros((1, 1, 2, 2), np.float32)
        x[0, 0] = [[1.0, 2.0], [3.0, 4.0]]  # TL, TR / BL, BR
        out = F.squeeze(Tensor(x))
        np.testing.assert_allclose(out.data.reshape(4), [1.0, 2.0, 3.0, 4.0])

    def test_constant_image_stays_constant(self):
        x = Tensor(np.full((1, 3, 4, 4), 0.7, np.float32))
        out = F.squeeze(x)
        assert out.data.min() == out.data.max() == np.float32(0.7)

    def test_odd_dims_rejected(self):
        with pytest.raises(ValueError):
            F.squeeze(Tensor(np.zeros((1, 1, 3, 4))))

    def test_split_unsplit(self):
        x = Tensor(Prng(1).normal((2, 6, 4, 4)))
        kept, latent = F.split(x)
        assert kept.shape == (2, 3, 4, 4) and latent.shape == (2, 3, 4, 4)
        back = F.unsplit(kept, latent)
        np.testing.assert_array_equal(back.data, x.data)


def make_cond(rng: Prng, n: int, cc: int, spatial: int):
    return Tensor(rng.normal((n, cc, spatial, spatial)))


class TestFlowModel:
    def test_latent_shapes_and_dim(self):
        cfg = FlowConfig(blocks=2, steps=2, in_shape=(3, 32, 32), cond_channels=64)
        assert cfg.latent_shapes() == [(6, 16, 16), (24, 8, 8)]
        assert cfg.latent_dim == 3 * 32 * 32

    def test_divisibility_enforced(self):
        with pytest.raises(ValueError):
            FlowConfig(blocks=3, steps=1, in_shape=(3, 12, 12), cond_channels=4)

    def test_encode_decode_roundtrip(self):
        cfg = FlowConfig(blocks=2, steps=2, in_shape=(3, 16, 16), cond_channels=8)
        model = FlowModel(cfg, seed=0)
        randomize_flow(model, seed=1)
        rng = Prng(2)
        x = Tensor(rng.uniform(0, 1, (4, 3, 16, 16)))
        cond = make_cond(rng, 4, 8, 4)
        z, ld = model.encode(x, cond)
        back = model.decode(z, cond)
        assert np.abs(back.data - x.data).max() < 1e-4

    def test_encode_decode_logdets_are_opposite(self):
        cfg = FlowConfig(blocks=2, steps=1, in_shape=(3, 8, 8), cond_channels=4)
        model = FlowModel(cfg, seed=3)
        randomize_flow(model, seed=4)
        rng = Prng(5)
        x = Tensor(rng.uniform(0, 1, (3, 3, 8, 8)))
        cond = make_cond(rng, 3, 4, 2)
        z, ld_e = model.encode(x, cond)
        _, ld_d = model.decode(z, cond, return_logdet=True)
        np.testing.assert_allclose(ld_e.data + ld_d.data, 0.0, atol=1e-4)

    def test_decode_of_random_latent_encodes_back(self):
        cfg = FlowConfig(blocks=1, steps=2, in_shape=(2, 4, 4), cond_channels=3)
        model = FlowModel(cfg, seed=6)
        randomize_flow(model, seed=7)
        rng = Prng(8)
        flat = Tensor(rng.normal((2, cfg.latent_dim)))
        z = LatentVec.unflatten(flat, cfg)
        cond = make_cond(rng, 2, 3, 2)
        x = model.decode(z, cond)
        z2, _ = model.encode(x, cond)
        np.testing.assert_allclose(z2.flatten().data, flat.data, atol=1e-4)

    def test_conditioning_is_live_in_decode(self):
        cfg = FlowConfig(blocks=1, steps=1, in_shape=(2, 4, 4), cond_channels=3)
        model = FlowModel(cfg, seed=9)
        randomize_flow(model, seed=10)
        rng = Prng(11)
        z = LatentVec.unflatten(Tensor(rng.normal((1, cfg.latent_dim))), cfg)
        out1 = model.decode(z, make_cond(rng, 1, 3, 2))
        out2 = model.decode(z, make_cond(rng, 1, 3, 2))
        assert not np.allclose(out1.data, out2.data)

    def test_encode_logdet_vs_full_numerical_jacobian(self):
        # tiny config: 2x4x4 input, one block, one step -> 32x32 Jacobian
        cfg = FlowConfig(blocks=1, steps=1, in_shape=(2, 4, 4), cond_channels=2)
        for draw in range(3):
            model = FlowModel(cfg, seed=20 + draw)
            randomize_flow(model, seed=30 + draw)
            rng = Prng(40 + draw)
            cond_np = rng.normal((1, 2, 2, 2)).astype(np.float64)
            x0 = rng.uniform(0.1, 0.9, (2, 4, 4)).astype(np.float64)

            def fn(flat):
                z, _ = model.encode(
                    Tensor(flat.reshape(1, 2, 4, 4)), Tensor(cond_np)
                )
                return z.flatten().data.reshape(-1).astype(np.float64)

            jac = numerical_jacobian(fn, x0)
            assert jac.shape == (32, 32)
            z, ld = model.encode(Tensor(x0[None]), Tensor(cond_np))
            assert abs(ld.data[0] - logabsdet_np(jac)) < 1e-3

    def test_density_normalizes(self):
        # 4-dim flow: (1,2,2) input; midpoint rule over [-4,4]^4, step 0.5
        cfg = FlowConfig(blocks=1, steps=1, in_shape=(1, 2, 2), cond_channels=2)
        model = FlowModel(cfg, seed=50)
        rng = Prng(51)
        cond1 = rng.normal((1, 2, 1, 1))
        init = Tensor(rng.normal((256, 1, 2, 2)))
        model.encode(init, Tensor(np.repeat(cond1, 256, axis=0)))  # actnorm init
        step = 0.5
        centers = np.arange(-4 + step / 2, 4, step)
        grid = np.stack(np.meshgrid(*([centers] * 4), indexing="ij"), axis=-1).reshape(-1, 4)
        total = 0.0
        d = 4
        with T.no_grad():
            for lo in range(0, grid.shape[0], 16384):
                chunk = grid[lo : lo + 16384]
                x = Tensor(chunk.reshape(-1, 1, 2, 2))
                cond = Tensor(np.repeat(cond1, chunk.shape[0], axis=0))
                z, ld = model.encode(x, cond)
                flat = z.flatten().data
                logp = (
                    -0.5 * (flat**2).sum(axis=1)
                    - 0.5 * d * np.log(2 * np.pi)
                    + ld.data
                )
                total += float(np.exp(logp.astype(np.float64)).sum()) * step**4
        assert 0.95 < total < 1.05

    def test_latentvec_flatten_unflatten_roundtrip(self):
        cfg = FlowConfig(blocks=2, steps=1, in_shape=(3, 16, 16), cond_channels=4)
        rng = Prng(60)
        flat = Tensor(rng.normal((3, cfg.latent_dim)))
        z = LatentVec.unflatten(flat, cfg)
        assert [p.shape[1:] for p in z.parts] == cfg.latent_shapes()
        np.testing.assert_array_equal(z.flatten().data, flat.data)

    def test_decode_before_init_rejected(self):
        cfg = FlowConfig(blocks=1, steps=1, in_shape=(2, 4, 4), cond_channels=2)
        model = FlowModel(cfg, seed=0)
        z = LatentVec.unflatten(Tensor(np.zeros((1, cfg.latent_dim))), cfg)
        with pytest.raises(RuntimeError):
            model.decode(z, Tensor(np.zeros((1, 2, 2, 2))))


class TestFlowCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        cfg = FlowConfig(blocks=2, steps=2, in_shape=(3, 16, 16), cond_channels=8)
        model = FlowModel(cfg, seed=1)
        randomize_flow(model, seed=2)
        path = tmp_path / "flow.tff"
        F.save_flow(model, path)
        loaded = F.load_flow(path)
        assert loaded.config == cfg
        assert loaded.actnorm_initialized
        for (n1, p1), (n2, p2) in zip(model.parameters(), loaded.parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)
        rng = Prng(3)
        x = Tensor(rng.uniform(0, 1, (2, 3, 16, 16)))
        cond = Tensor(rng.normal((2, 8, 4, 4)))
        z1, ld1 = model.encode(x, cond)
        z2, ld2 = loaded.encode(x, cond)
        np.testing.assert_array_equal(z1.flatten().data, z2.flatten().data)
        np.testing.assert_array_equal(ld1.data, ld2.data)
