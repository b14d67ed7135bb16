import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import finite_diff
from uasplat.geometry import (
    Camera,
    build_covariance,
    build_covariance_backward,
    project_gaussian,
    project_gaussians,
    project_gaussians_backward,
    quat_from_axis_angle,
    quat_mul,
    quat_normalize,
    quat_to_rotmat,
)

finite_vec = st.lists(st.floats(-3, 3), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 1e-3
)


class TestBuildCovariance:
    def test_identity(self):
        sigma = build_covariance(np.array([1.0, 0, 0, 0]), np.zeros(3))
        np.testing.assert_allclose(sigma, np.eye(3), atol=1e-15)

    def test_rotated_axis_swap(self):
        q = quat_from_axis_angle([0, 0, 1], np.pi / 2)
        sigma = build_covariance(q, np.array([np.log(2.0), 0.0, 0.0]))
        np.testing.assert_allclose(sigma, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_rejects_zero_quaternion(self):
        with pytest.raises(ValueError):
            build_covariance(np.zeros(4), np.zeros(3))

    @settings(max_examples=40, deadline=None)
    @given(q=finite_vec, s=st.lists(st.floats(-2, 2), min_size=3, max_size=3))
    def test_eigenvalues_are_exp_2s(self, q, s):
        sigma = build_covariance(np.array(q), np.array(s))
        eig = np.sort(np.linalg.eigvalsh(sigma))
        np.testing.assert_allclose(eig, np.sort(np.exp(2 * np.array(s))), rtol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(q=finite_vec, s=st.lists(st.floats(-2, 2), min_size=3, max_size=3))
    def test_quaternion_double_cover(self, q, s):
        q = np.array(q)
        s = np.array(s)
        np.testing.assert_allclose(build_covariance(q, s), build_covariance(-q, s),
                                   atol=1e-12)

    def test_symmetric_psd(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            sigma = build_covariance(rng.normal(size=4) + [2, 0, 0, 0],
                                     rng.uniform(-1, 1, 3))
            np.testing.assert_allclose(sigma, sigma.T, atol=1e-14)
            assert np.linalg.eigvalsh(sigma).min() >= -1e-9


class TestBuildCovarianceBackward:
    def test_zero_upstream(self):
        dq, ds = build_covariance_backward(np.array([1.0, 0, 0, 0]), np.zeros(3),
                                           np.zeros((3, 3)))
        assert not dq.any() and not ds.any()

    def test_identity_diag_upstream(self):
        s = np.array([0.3, -0.2, 0.7])
        _, ds = build_covariance_backward(np.array([1.0, 0, 0, 0]), s, np.eye(3))
        np.testing.assert_allclose(ds, 2 * np.exp(2 * s), rtol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            q = rng.normal(size=4) + np.sign(rng.normal(size=4)) * 0.3
            s = rng.uniform(-1, 1, 3)
            up = rng.normal(size=(3, 3))
            up = 0.5 * (up + up.T)
            dq, ds = build_covariance_backward(q, s, up)
            fd_q = finite_diff(lambda v: float(np.sum(up * build_covariance(v, s))), q, 1e-5)
            fd_s = finite_diff(lambda v: float(np.sum(up * build_covariance(q, v))), s, 1e-5)
            np.testing.assert_allclose(dq, fd_q, rtol=1e-4, atol=1e-8)
            np.testing.assert_allclose(ds, fd_s, rtol=1e-4, atol=1e-8)


class TestQuaternions:
    def test_product_composes_rotations(self):
        qa = quat_from_axis_angle([0, 0, 1], np.pi / 2)
        qb = quat_from_axis_angle([0, 0, 1], np.pi / 2)
        np.testing.assert_allclose(quat_mul(qa, qb),
                                   quat_from_axis_angle([0, 0, 1], np.pi), atol=1e-12)

    def test_rotmat_orthonormal(self):
        rng = np.random.default_rng(3)
        q = quat_normalize(rng.normal(size=(50, 4)) + [2, 0, 0, 0])
        R = quat_to_rotmat(q)
        np.testing.assert_allclose(R @ np.swapaxes(R, -1, -2),
                                   np.broadcast_to(np.eye(3), (50, 3, 3)), atol=1e-12)


def _front_camera(width=64, height=64, fx=100.0):
    return Camera(R=np.eye(3), t=np.zeros(3), fx=fx, fy=fx,
                  cx=(width - 1) / 2, cy=(height - 1) / 2, width=width, height=height)


class TestProjection:
    def test_axis_point(self):
        cam = _front_camera()
        g = project_gaussian(np.array([0, 0, 1.0]), 1e-4 * np.eye(3), cam)
        np.testing.assert_allclose(g.mean, [cam.cx, cam.cy])
        np.testing.assert_allclose(g.cov, np.diag([1.3, 1.3]), atol=1e-12)
        assert g.depth == 1.0

    def test_behind_camera_is_culled(self):
        cam = _front_camera()
        assert project_gaussian(np.array([0, 0, -1.0]), 1e-4 * np.eye(3), cam) is None

    def test_offscreen_is_culled(self):
        cam = _front_camera()
        assert project_gaussian(np.array([50.0, 0, 1.0]), 1e-4 * np.eye(3), cam) is None

    def test_visible_cov_symmetric_positive(self):
        rng = np.random.default_rng(4)
        cam = _front_camera()
        for _ in range(50):
            mean = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2),
                             rng.uniform(0.5, 4.0)])
            cov = build_covariance(rng.normal(size=4) + [2, 0, 0, 0],
                                   rng.uniform(-4, -1.5, 3))
            g = project_gaussian(mean, cov, cam)
            if g is None:
                continue
            np.testing.assert_allclose(g.cov, g.cov.T, atol=1e-12)
            assert np.linalg.det(g.cov) > 0

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        cam = _front_camera()
        for _ in range(5):
            mean = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2),
                             rng.uniform(1.0, 3.0)])
            cov = build_covariance(rng.normal(size=4) + [2, 0, 0, 0],
                                   rng.uniform(-4, -2, 3))
            pc = project_gaussians(mean[None], cov[None], cam)
            assert pc.valid[0]
            wm = rng.normal(size=2)
            wc = rng.normal(size=(2, 2))
            wc = 0.5 * (wc + wc.T)

            def f(mw):
                p = project_gaussians(mw[None], cov[None], cam)
                return float(wm @ p.means2d[0] + np.sum(wc * p.covs2d[0]))

            dmw, dcv = project_gaussians_backward(pc, wm[None], wc[None])
            np.testing.assert_allclose(dmw[0], finite_diff(f, mean), rtol=1e-4, atol=1e-8)

            for i in range(3):
                for j in range(i, 3):
                    h = 1e-6
                    d = np.zeros((3, 3))
                    d[i, j] = d[j, i] = 1.0

                    def fc(c):
                        p = project_gaussians(mean[None], c[None], cam)
                        return float(wm @ p.means2d[0] + np.sum(wc * p.covs2d[0]))

                    fd = (fc(cov + h * d) - fc(cov - h * d)) / (2 * h)
                    ana = dcv[0][i, j] + dcv[0][j, i] if i != j else dcv[0][i, i]
                    assert abs(ana - fd) / max(abs(ana), abs(fd), 1e-3) < 1e-4

    def test_culled_gets_zero_gradient(self):
        cam = _front_camera()
        pc = project_gaussians(np.array([[0, 0, -1.0]]), np.eye(3)[None] * 1e-4, cam)
        dmw, dcv = project_gaussians_backward(pc, np.ones((1, 2)), np.ones((1, 2, 2)))
        assert not dmw.any() and not dcv.any()

    def test_camera_validates_rotation(self):
        with pytest.raises(ValueError):
            Camera(R=np.eye(3) * 2.0, t=np.zeros(3), fx=10, fy=10, cx=0, cy=0,
                   width=8, height=8)
