import numpy as np
import pytest
from skimage.metrics import structural_similarity

from pwmface.face_model import FaceParams
from pwmface.metrics import MetricReport, aed, akd, apd, head_pose_angles, l1, ssim, to_unit_range


def reference_ssim(a, b):
    return structural_similarity(a, b, channel_axis=0, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False)


def test_ssim_self_is_one(rng):
    x = rng.uniform(size=(3, 32, 32))
    assert ssim(x, x) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(3))
def test_ssim_with_noise_matches_reference(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(3, 40, 40))
    y = x + rng.normal(scale=0.1, size=x.shape)
    assert ssim(x, y) == pytest.approx(reference_ssim(x, y), abs=1e-9)
    assert ssim(x, y) < 0.95


def test_ssim_shape_check():
    with pytest.raises(ValueError):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 9, 9)))


def test_l1_with_and_without_mask():
    a = np.zeros((3, 2, 2))
    b = np.ones((3, 2, 2))
    b[:, 0, 0] = 5
    assert l1(a, b) == pytest.approx((5 + 1 + 1 + 1) / 4)
    mask = np.array([[True, False], [False, False]])
    assert l1(a, b, mask=mask[None]) == 5.0
    assert l1(a, b, mask=np.zeros((1, 2, 2), bool)) == 0.0


def test_unit_range():
    np.testing.assert_allclose(to_unit_range(np.array([-1.0, 0.0, 1.0])), [0, 0.5, 1])


def test_akd_is_mean_l1_per_landmark():
    a = np.zeros((68, 2))
    b = np.zeros((68, 2))
    b[0] = [3, 4]
    assert akd(a, b) == pytest.approx(7 / 68)
    assert akd(a, a) == 0.0


def test_head_pose_angles_pure_yaw():
    np.testing.assert_allclose(head_pose_angles([0, np.deg2rad(20), 0]), [20, 0, 0], atol=1e-9)
    np.testing.assert_allclose(head_pose_angles([np.deg2rad(-10), 0, 0]), [0, -10, 0], atol=1e-9)


def test_apd_aed(asset):
    p = FaceParams.neutral(asset)
    q = p.copy()
    q.theta[0, 1] = np.deg2rad(30)
    q.psi[:] = [1, -1, 0.5, 0]
    assert apd(p, q) == pytest.approx(10.0)
    assert aed(p, q) == pytest.approx(2.5 / 4)


def test_apd_monotone_along_yaw_sweep(asset):
    p = FaceParams.neutral(asset)
    vals = []
    for yaw in np.linspace(0, 0.6, 6):
        q = p.copy()
        q.theta[0, 1] = yaw
        vals.append(apd(p, q))
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_report_invariants():
    MetricReport(0.1, 0.5, 1.0, 0.0, 0.0, 0.2, 4).check()
    MetricReport(None, None, None, 1.0, 0.0, None, 4, "cross").check()
    with pytest.raises(ValueError):
        MetricReport(float("nan"), 0.5, 1.0, 0, 0, 0, 1).check()
    with pytest.raises(ValueError):
        MetricReport(0.1, 1.5, 1.0, 0, 0, 0, 1).check()
