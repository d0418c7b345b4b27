"""Input checking shared by the estimator, the drivers and the CLI."""

import numpy as np
import torch

from .face_model import FaceParams


def check_images(images, resolution=None, name="images"):
    """Return a float32 ``B x 3 x H x W`` tensor in [-1, 1].

    Accepts a tensor or array, batched or a single ``3 x H x W`` image.
    """
    x = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images)
    if x.dim() == 3:
        x = x[None]
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"{name} must have shape (B, 3, H, W) or (3, H, W), got {tuple(x.shape)}")
    if x.shape[2] != x.shape[3]:
        raise ValueError(f"{name} must be square")
    if resolution is not None and x.shape[2] != resolution:
        raise ValueError(f"{name} must be {resolution}x{resolution}, got {x.shape[2]}x{x.shape[3]}")
    x = x.to(torch.float32)
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contain non-finite values")
    if x.min() < -1.0 - 1e-6 or x.max() > 1.0 + 1e-6:
        raise ValueError(f"{name} must be scaled to [-1, 1]")
    return x


def check_face_params(params, asset, n=None, name="params"):
    """Normalize a FaceParams or a sequence of them into a list checked against ``asset``."""
    seq = [params] if isinstance(params, FaceParams) else list(params)
    for p in seq:
        if not isinstance(p, FaceParams):
            raise TypeError(f"{name} must contain FaceParams, got {type(p).__name__}")
        if p.beta.shape != (asset.n_shape,) or p.psi.shape != (asset.n_expression,) \
                or p.theta.shape != (asset.n_joints, 3):
            raise ValueError(f"{name} do not match the head asset dimensions")
    if n is not None and len(seq) != n:
        raise ValueError(f"expected {n} {name}, got {len(seq)}")
    return seq


def check_dataset(dataset):
    for attr in ("asset", "sample_batch", "resolution", "heldout_ids"):
        if not hasattr(dataset, attr):
            raise TypeError(f"expected a SyntheticDataset, got {type(dataset).__name__}")
    return dataset
