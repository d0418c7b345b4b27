"""Reenactment, parameter editing and evaluation drivers on top of a trained animator."""

import re

import numpy as np
import torch

from .face_model import JOINT_NAMES, FaceParams, landmarks2d, lbs
from .guidance import FrameGeometry
from .metrics import MetricReport, aed, akd, apd, l1, ssim, to_unit_range


class ProtocolError(ValueError):
    pass


def guidance_params(params_s, params_d, mode="same"):
    """Parameters of the driving mesh used for guidance.

    In ``cross`` mode the driving shape is replaced by the source shape so the
    guidance carries only pose, expression and camera from the driver.
    """
    if mode == "cross":
        return FaceParams(params_s.beta.copy(), params_d.theta.copy(), params_d.psi.copy(), params_d.camera.copy())
    if mode == "same":
        return params_d.copy()
    raise ProtocolError(f"unknown reenactment mode {mode!r}")


def build_geometries(asset, params_s, params_d, resolution, mode="same"):
    drive = guidance_params(params_s, params_d, mode)
    geom_s = FrameGeometry.build(lbs(asset, params_s), params_s.camera, resolution, resolution)
    geom_d = FrameGeometry.build(lbs(asset, drive), drive.camera, resolution, resolution)
    return geom_s, geom_d, drive


@torch.no_grad()
def run_animator(animator, sources, geoms_s, geoms_d):
    animator.eval()
    out, _ = animator(sources, geoms_s, geoms_d)
    return out


def reenact(animator, asset, source, params_s, params_d, mode="same"):
    """Animate one source image (3 x H x W tensor in [-1, 1]) with driving parameters."""
    res = animator.cfg.resolution
    if tuple(source.shape[-2:]) != (res, res):
        raise ProtocolError(f"source image must be {res}x{res} for this checkpoint")
    geom_s, geom_d, _ = build_geometries(asset, params_s, params_d, res, mode)
    return run_animator(animator, source[None], [geom_s], [geom_d])[0]


_JOINT_INDEX = {name: i for i, name in enumerate(JOINT_NAMES)}
_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


def apply_override(params, key, value):
    """Set one scalar addressed like ``beta.0``, ``psi.2``, ``camera.0`` or ``theta.jaw.x``."""
    p = params.copy()
    parts = key.split(".")
    if parts[0] in ("beta", "psi", "camera") and len(parts) == 2:
        getattr(p, parts[0])[int(parts[1])] = value
    elif parts[0] == "theta" and len(parts) == 3:
        joint = _JOINT_INDEX[parts[1]] if parts[1] in _JOINT_INDEX else int(parts[1])
        axis = _AXIS_INDEX[parts[2]] if parts[2] in _AXIS_INDEX else int(parts[2])
        p.theta[joint, axis] = value
    else:
        raise ProtocolError(f"cannot interpret override key {key!r}")
    return FaceParams(p.beta, p.theta, p.psi, p.camera)


def sweep_params(params_s, overrides):
    """Expand ``{key: [v0, v1, ...]}`` sweeps (equal lengths, zipped) into parameter sets."""
    if not overrides:
        return [params_s.copy()]
    lengths = {len(v) for v in overrides.values()}
    if len(lengths) != 1:
        raise ProtocolError("all sweeps in one edit must have the same number of values")
    out = []
    for k in range(lengths.pop()):
        p = params_s
        for key, values in overrides.items():
            p = apply_override(p, key, values[k])
        out.append(p)
    return out


def edit(animator, asset, source, params_s, overrides):
    """One reenacted image per sweep point of ``overrides``."""
    return [reenact(animator, asset, source, params_s, p, mode="same") for p in sweep_params(params_s, overrides)]


def parse_sweep(text):
    """``"theta.jaw.x=0,0.1,0.2"`` -> ``("theta.jaw.x", [0.0, 0.1, 0.2])``."""
    key, sep, values = text.partition("=")
    if not sep or not re.match(r"^[a-z_]+(\.[a-z_0-9]+)+$", key.strip()):
        raise ProtocolError(f"bad sweep {text!r}; expected key=v1,v2,...")
    return key.strip(), [float(v) for v in values.split(",") if v.strip()]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

class AnimatorPredictor:
    """Wraps a trained animator; the geometry it realizes is the guidance it was given."""

    def __init__(self, animator, asset):
        self.animator = animator
        self.asset = asset

    def __call__(self, sources, params_s, params_d, mode):
        res = self.animator.cfg.resolution
        geoms_s, geoms_d, used = [], [], []
        for ps, pd in zip(params_s, params_d):
            gs, gd, drive = build_geometries(self.asset, ps, pd, res, mode)
            geoms_s.append(gs)
            geoms_d.append(gd)
            used.append(drive)
        return run_animator(self.animator, sources, geoms_s, geoms_d), used


class CopySourcePredictor:
    """Baseline that returns the source frame unchanged."""

    def __call__(self, sources, params_s, params_d, mode):
        return sources.clone(), [p.copy() for p in params_s]


def sample_pairs(dataset, protocol, n_pairs, seed):
    """Evaluation pairs as ((src identity, src frame), (drv identity, drv frame)).

    Same-identity pairs are emitted in both directions.
    """
    rng = np.random.default_rng(seed)
    ids = dataset.heldout_ids or dataset.train_ids
    pairs = []
    if protocol == "same":
        for _ in range(n_pairs):
            i = int(ids[rng.integers(len(ids))])
            a, b = (int(x) for x in rng.choice(dataset.n_frames, size=2, replace=False))
            pairs.append(((i, a), (i, b)))
            pairs.append(((i, b), (i, a)))
    elif protocol == "cross":
        if len(ids) < 2:
            raise ProtocolError("cross-identity evaluation needs at least two held-out identities")
        for _ in range(n_pairs):
            i, j = (int(x) for x in rng.choice(ids, size=2, replace=False))
            a, b = (int(x) for x in rng.integers(dataset.n_frames, size=2))
            pairs.append(((i, a), (j, b)))
    else:
        raise ProtocolError(f"unknown protocol {protocol!r}")
    if not pairs:
        raise ProtocolError("empty evaluation set")
    return pairs


def evaluate(predictor, dataset, protocol="same", n_pairs=16, seed=0, batch_size=8):
    """Metric means over sampled pairs.

    ``same``: L1/SSIM/face-region L1 against the ground-truth target frame;
    AKD/APD/AED compare the parameters the predictor realized with the
    target's.  ``cross``: only APD/AED against the driving parameters.
    """
    pairs = sample_pairs(dataset, protocol, n_pairs, seed)
    res = dataset.resolution
    rows = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        sources = torch.stack([dataset.image(*s) for s, _ in chunk])
        params_s = [dataset.params(*s) for s, _ in chunk]
        params_d = [dataset.params(*d) for _, d in chunk]
        outputs, used = predictor(sources, params_s, params_d, protocol)
        outputs = outputs.detach().cpu().numpy()
        for k, (s, d) in enumerate(chunk):
            row = {"apd": apd(used[k], params_d[k]), "aed": aed(used[k], params_d[k])}
            if protocol == "same":
                out = to_unit_range(outputs[k])
                gt = to_unit_range(dataset.image(*d).numpy())
                row["l1"] = l1(out, gt)
                row["ssim"] = ssim(out, gt)
                row["face_l1"] = l1(out, gt, mask=dataset.geometry(*d).coverage[None])
                row["akd"] = akd(landmarks2d(dataset.asset, used[k], res, res), dataset.landmarks[d[0], d[1]])
            rows.append(row)

    def mean(key):
        vals = [r[key] for r in rows if key in r]
        return float(np.mean(vals)) if vals else None

    return MetricReport(l1=mean("l1"), ssim=mean("ssim"), akd=mean("akd"), apd=mean("apd"), aed=mean("aed"),
                        face_l1=mean("face_l1"), n_pairs=len(rows), protocol=protocol).check()
