import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import finite_diff
from uasplat.deformation import (
    DeformationNet,
    DeformationOutput,
    NetConfig,
    PosEncodingConfig,
    apply_deformation,
    apply_deformation_backward,
    pos_encode,
    softplus,
)
from uasplat.geometry import quat_from_axis_angle, quat_mul


class TestPosEncode:
    def test_zero_scalar(self):
        np.testing.assert_allclose(pos_encode(np.array([0.0]), 2), [0, 1, 0, 1],
                                   atol=1e-15)

    def test_half(self):
        np.testing.assert_allclose(pos_encode(np.array([0.5]), 1), [1.0, 0.0],
                                   atol=1e-15)

    def test_dimension(self):
        out = pos_encode(np.zeros((5, 3)), 4)
        assert out.shape == (5, 24)
        out = pos_encode(np.zeros((5, 3)), 4, include_input=True)
        assert out.shape == (5, 27)

    @settings(max_examples=30, deadline=None)
    @given(x=st.floats(-4, 4), bands=st.integers(1, 6))
    def test_two_periodic(self, x, bands):
        a = pos_encode(np.array([x]), bands)
        b = pos_encode(np.array([x + 2.0]), bands)
        np.testing.assert_allclose(a, b, atol=1e-9)


def toy_config(**kw) -> NetConfig:
    defaults = dict(depth=2, width=16, skip_layers=(1,),
                    encoding=PosEncodingConfig(l_xyz=2, l_t=2), pose_dim=8)
    defaults.update(kw)
    return NetConfig(**defaults)


class TestForward:
    def test_zero_init_heads_identity_output(self):
        net = DeformationNet(toy_config(), rng=np.random.default_rng(0))
        means = np.random.default_rng(1).uniform(-1, 1, (7, 3))
        out, _ = net.forward(means, 0.3, np.zeros(8))
        assert not out.dmu.any() and not out.dscale.any()
        np.testing.assert_allclose(out.drot, np.tile([1.0, 0, 0, 0], (7, 1)))
        np.testing.assert_allclose(out.sigma, np.log(2.0), rtol=1e-12)
        assert abs(out.sigma[0] - 0.6931) < 1e-4

    def test_deterministic(self):
        net = DeformationNet(toy_config(), rng=np.random.default_rng(2))
        for name in net.params:
            net.params[name] = np.random.default_rng(3).normal(0, 0.3,
                                                               net.params[name].shape)
        means = np.random.default_rng(4).uniform(-1, 1, (5, 3))
        a, _ = net.forward(means, 0.7, np.ones(8))
        b, _ = net.forward(means, 0.7, np.ones(8))
        assert np.array_equal(a.dmu, b.dmu) and np.array_equal(a.sigma, b.sigma)

    def test_sigma_positive_everywhere(self):
        rng = np.random.default_rng(5)
        net = DeformationNet(toy_config(), rng=rng)
        for name in net.params:
            net.params[name] = rng.normal(0, 1.0, net.params[name].shape)
        out, _ = net.forward(rng.uniform(-1, 1, (50, 3)), 0.2, rng.normal(size=8))
        assert np.all(out.sigma > 0)

    def test_pose_dim_validated(self):
        net = DeformationNet(toy_config(), rng=np.random.default_rng(6))
        with pytest.raises(ValueError):
            net.forward(np.zeros((2, 3)), 0.0, np.zeros(5))

    def test_full_depth_config_shapes(self):
        cfg = NetConfig(depth=8, width=256, skip_layers=(4,),
                        encoding=PosEncodingConfig(l_xyz=10, l_t=6), pose_dim=24)
        net = DeformationNet(cfg, rng=np.random.default_rng(7))
        assert net.params["layer0.W"].shape == (256, cfg.input_dim)
        assert net.params["layer4.W"].shape == (256, 256 + cfg.input_dim)
        assert net.params["head_sigma.W"].shape == (1, 256)
        out, _ = net.forward(np.zeros((3, 3)), 0.5, np.zeros(24))
        assert out.dmu.shape == (3, 3) and out.sigma.shape == (3,)


class TestBackward:
    def test_zero_upstream_zero_grads(self):
        net = DeformationNet(toy_config(), rng=np.random.default_rng(8))
        means = np.zeros((4, 3))
        out, cache = net.forward(means, 0.1, np.zeros(8))
        grads = net.backward(cache, np.zeros((4, 3)), np.zeros((4, 4)),
                             np.zeros((4, 3)), np.zeros(4))
        assert all(not g.any() for g in grads.values())

    def test_single_linear_layer_outer_product(self):
        # depth-1 net, no skip: gradient of W is upstream^T @ input
        cfg = NetConfig(depth=1, width=8, skip_layers=(),
                        encoding=PosEncodingConfig(l_xyz=1, l_t=1), pose_dim=2)
        rng = np.random.default_rng(9)
        net = DeformationNet(cfg, rng=rng)
        net.params["head_dmu.W"] = rng.normal(size=(3, 8))
        means = rng.uniform(-0.5, 0.5, (3, 3))
        out, cache = net.forward(means, 0.4, rng.normal(size=2))
        up = rng.normal(size=(3, 3))
        grads = net.backward(cache, up, np.zeros((3, 4)), np.zeros((3, 3)), np.zeros(3))
        d_h = up @ net.params["head_dmu.W"]
        d_z = d_h * (cache.pre_acts[0] > 0)
        np.testing.assert_allclose(grads["layer0.W"], d_z.T @ cache.layer_inputs[0],
                                   atol=1e-14)
        np.testing.assert_allclose(grads["head_dmu.W"], up.T @ cache.hidden, atol=1e-14)

    def test_matches_finite_differences_full_depth(self):
        cfg = NetConfig(depth=8, width=24, skip_layers=(4,),
                        encoding=PosEncodingConfig(l_xyz=3, l_t=2), pose_dim=8)
        rng = np.random.default_rng(10)
        net = DeformationNet(cfg, rng=rng)
        for name in net.params:
            if name.startswith("head_"):
                net.params[name] = rng.normal(0, 0.3, net.params[name].shape)
        means = rng.uniform(-0.8, 0.8, (5, 3))
        pose = rng.normal(size=8)
        out, cache = net.forward(means, 0.35, pose)
        assert min(float(np.abs(z).min()) for z in cache.pre_acts) > 1e-4
        ups = [rng.normal(size=out.dmu.shape), rng.normal(size=out.drot.shape),
               rng.normal(size=out.dscale.shape), rng.normal(size=out.sigma.shape)]
        grads = net.backward(cache, *ups)

        def scalar(params):
            o, _ = DeformationNet(cfg, params=params).forward(means, 0.35, pose)
            return float(np.sum(ups[0] * o.dmu) + np.sum(ups[1] * o.drot)
                         + np.sum(ups[2] * o.dscale) + np.sum(ups[3] * o.sigma))

        check = np.random.default_rng(11)
        worst = 0.0
        for name in ("layer0.W", "layer4.W", "layer7.b", "head_sigma.W", "head_dmu.b"):
            arr = net.params[name]
            for ci in check.choice(arr.size, size=min(10, arr.size), replace=False):
                orig = arr.reshape(-1)[ci]
                arr.reshape(-1)[ci] = orig + 1e-4
                fp = scalar(net.params)
                arr.reshape(-1)[ci] = orig - 1e-4
                fm = scalar(net.params)
                arr.reshape(-1)[ci] = orig
                fd = (fp - fm) / 2e-4
                ana = grads[name].reshape(-1)[ci]
                worst = max(worst, abs(ana - fd) / max(abs(ana), abs(fd), 1e-3))
        assert worst < 1e-5  # float64 tolerance at parameter step 1e-4

    def test_stop_gradient_on_canonical_means(self):
        """The network input path must contribute no gradient to the means:
        perturbing a mean changes the output, but backward returns parameter
        gradients only, and the pipeline's mean gradient comes solely from
        the additive dmu path (checked in the rasterizer tests)."""
        net = DeformationNet(toy_config(), rng=np.random.default_rng(12))
        rng = np.random.default_rng(13)
        for name in net.params:
            net.params[name] = rng.normal(0, 0.3, net.params[name].shape)
        means = rng.uniform(-0.5, 0.5, (4, 3))
        out_a, _ = net.forward(means, 0.2, np.zeros(8))
        shifted = means.copy()
        shifted[0, 0] += 0.05
        out_b, _ = net.forward(shifted, 0.2, np.zeros(8))
        assert not np.allclose(out_a.dmu, out_b.dmu)  # value genuinely depends


class TestApplyDeformation:
    def test_identity_delta(self):
        rng = np.random.default_rng(14)
        means = rng.normal(size=(5, 3))
        q = np.tile([1.0, 0, 0, 0], (5, 1))
        s = rng.normal(size=(5, 3))
        out = DeformationOutput.zeros(5)
        mu, qd, sd, _ = apply_deformation(means, q, s, out)
        np.testing.assert_allclose(mu, means)
        np.testing.assert_allclose(qd, q)
        np.testing.assert_allclose(sd, s)

    def test_translation_delta(self):
        out = DeformationOutput.zeros(1)
        out.dmu = np.array([[1.0, 0, 0]])
        mu, _, _, _ = apply_deformation(np.zeros((1, 3)),
                                        np.array([[1.0, 0, 0, 0]]), np.zeros((1, 3)), out)
        np.testing.assert_allclose(mu, [[1.0, 0, 0]])

    def test_quaternion_composition(self):
        q90 = quat_from_axis_angle([0, 0, 1], np.pi / 2)
        out = DeformationOutput.zeros(1)
        out.drot = q90[None]
        _, qd, _, _ = apply_deformation(np.zeros((1, 3)), q90[None], np.zeros((1, 3)), out)
        np.testing.assert_allclose(qd[0], quat_from_axis_angle([0, 0, 1], np.pi),
                                   atol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(15)
        n = 3
        means = rng.normal(size=(n, 3))
        q = rng.normal(size=(n, 4)) + [2, 0, 0, 0]
        s = rng.normal(size=(n, 3))
        out = DeformationOutput(dmu=rng.normal(size=(n, 3)),
                                drot=rng.normal(size=(n, 4)) + [1.5, 0, 0, 0],
                                dscale=rng.normal(size=(n, 3)),
                                sigma=np.ones(n), sigma_raw=np.zeros(n))
        up_mu = rng.normal(size=(n, 3))
        up_q = rng.normal(size=(n, 4))
        up_s = rng.normal(size=(n, 3))

        def scalar(means_, q_, s_, drot_):
            o2 = DeformationOutput(dmu=out.dmu, drot=drot_, dscale=out.dscale,
                                   sigma=out.sigma, sigma_raw=out.sigma_raw)
            mu, qd, sd, _ = apply_deformation(means_, q_, s_, o2)
            return float(np.sum(up_mu * mu) + np.sum(up_q * qd) + np.sum(up_s * sd))

        _, _, _, cache = apply_deformation(means, q, s, out)
        d_mu_can, d_q_can, d_s_can, d_dmu, d_drot, d_dscale = \
            apply_deformation_backward(cache, up_mu, up_q, up_s)
        fd_q = finite_diff(lambda v: scalar(means, v, s, out.drot), q.copy())
        fd_rot = finite_diff(lambda v: scalar(means, q, s, v), out.drot.copy())
        np.testing.assert_allclose(d_q_can, fd_q, rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(d_drot, fd_rot, rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(d_mu_can, up_mu)
        np.testing.assert_allclose(d_s_can, up_s)


def test_softplus_matches_reference():
    x = np.linspace(-20, 20, 101)
    np.testing.assert_allclose(softplus(x), np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0),
                               rtol=1e-12)
