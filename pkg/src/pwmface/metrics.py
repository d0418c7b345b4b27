"""Image and geometry metrics: L1, SSIM, AKD, APD, AED."""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial.transform import Rotation

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def to_unit_range(img):
    """[-1, 1] channel-first image(s) -> [0, 1] float64."""
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0


def l1(a, b, mask=None):
    diff = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    if mask is None:
        return float(diff.mean())
    m = np.broadcast_to(mask, diff.shape)
    return float(diff[m].mean()) if m.any() else 0.0


def ssim(a, b, data_range=1.0):
    """Mean SSIM of two C x H x W images with an 11x11 Gaussian window (sigma 1.5).

    Statistics use population (biased) variances; the 5-pixel border where
    the window would leave the image is excluded.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("ssim needs images of identical shape")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    radius = SSIM_WINDOW // 2
    truncate = radius / SSIM_SIGMA

    def filt(x):
        return gaussian_filter(x, SSIM_SIGMA, truncate=truncate, mode="reflect")

    vals = []
    for x, y in zip(a, b):
        mx, my = filt(x), filt(y)
        vxx = filt(x * x) - mx * mx
        vyy = filt(y * y) - my * my
        vxy = filt(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * vxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vxx + vyy + c2))
        vals.append(s[radius:-radius, radius:-radius].mean())
    return float(np.mean(vals))


def akd(landmarks_a, landmarks_b):
    """Average per-landmark L1 distance (pixels)."""
    d = np.abs(np.asarray(landmarks_a) - np.asarray(landmarks_b)).sum(axis=-1)
    return float(d.mean())


def head_pose_angles(global_rotation):
    """Yaw, pitch, roll in degrees of an axis-angle global head rotation."""
    yaw, pitch, roll = Rotation.from_rotvec(np.asarray(global_rotation, dtype=np.float64)).as_euler("YXZ", degrees=True)
    return np.array([yaw, pitch, roll])


def apd(params_a, params_b):
    return float(np.abs(head_pose_angles(params_a.theta[0]) - head_pose_angles(params_b.theta[0])).mean())


def aed(params_a, params_b):
    return float(np.abs(params_a.psi - params_b.psi).mean())


@dataclass
class MetricReport:
    l1: float
    ssim: float
    akd: float
    apd: float
    aed: float
    face_l1: float
    n_pairs: int
    protocol: str = "same"

    def to_dict(self):
        return asdict(self)

    def check(self):
        vals = [self.l1, self.ssim, self.akd, self.apd, self.aed, self.face_l1]
        if not all(np.isfinite(v) for v in vals if v is not None):
            raise ValueError(f"non-finite metric in {self}")
        if self.ssim is not None and not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"SSIM {self.ssim} outside [-1, 1]")
        return self
