"""Rasterized guidance patterns: geometric displacement fields, posed neural codes and NMFC."""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .face_model import project
from .rasterizer import interpolate, rasterize_backward, rasterize_geometry

GEOM_DISP = "geom-disp"
NEURAL_CODES = "neural-codes"
NMFC = "nmfc"
COMBINED = "geom-disp+neural-codes"
GUIDANCE_KINDS = (GEOM_DISP, NEURAL_CODES, NMFC, COMBINED)
CODE_DIM = 16


class GuidanceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GuidanceMap:
    image: object          # c x H x W (numpy array, or torch tensor for learnable codes)
    coverage: np.ndarray   # H x W bool
    kind: str

    def __post_init__(self):
        expected = {GEOM_DISP: 2, NMFC: 3}.get(self.kind)
        if expected is not None and self.image.shape[0] != expected:
            raise GuidanceError(f"{self.kind} guidance must have {expected} channels")


@dataclass(frozen=True, eq=False)
class FrameGeometry:
    """Projected vertices of one posed mesh plus its visibility pass."""
    positions2d: np.ndarray
    depth: np.ndarray
    cache: object

    @classmethod
    def build(cls, mesh, camera, height, width):
        pos, depth = project(mesh, camera, width, height)
        cache, _ = rasterize_geometry(pos, depth, mesh.faces, width, height, cull_backfaces=True)
        return cls(pos, depth, cache)

    @property
    def coverage(self):
        return self.cache.coverage


class _RenderAttributes(torch.autograd.Function):
    @staticmethod
    def forward(ctx, attributes, cache):
        ctx.cache = cache
        ctx.dtype = attributes.dtype
        img = interpolate(cache, attributes.detach().cpu().numpy())
        return torch.as_tensor(img, dtype=attributes.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        g = rasterize_backward(grad_output.detach().cpu().numpy(), ctx.cache)
        return torch.as_tensor(g, dtype=ctx.dtype), None


def render_attributes(attributes, cache):
    """Differentiable (w.r.t. ``attributes``) rasterization of an N x c tensor."""
    return _RenderAttributes.apply(attributes, cache)


def displacement_attributes(geom_s, geom_d):
    """Per-vertex V_{d->s}: source minus driving projected positions, in pixels."""
    if geom_s.positions2d.shape != geom_d.positions2d.shape:
        raise GuidanceError("source and driving meshes must share the asset topology")
    return geom_s.positions2d - geom_d.positions2d


def geom_disp_field(mesh_s, mesh_d, cam_s, cam_d, height, width):
    """2-channel displacement image rasterized over the driving mesh."""
    if mesh_s.vertices.shape != mesh_d.vertices.shape or not np.array_equal(mesh_s.faces, mesh_d.faces):
        raise GuidanceError("source and driving meshes must share the asset topology")
    geom_s = FrameGeometry.build(mesh_s, cam_s, height, width)
    geom_d = FrameGeometry.build(mesh_d, cam_d, height, width)
    return geom_disp_from_geometry(geom_s, geom_d)


def geom_disp_from_geometry(geom_s, geom_d):
    img = interpolate(geom_d.cache, displacement_attributes(geom_s, geom_d))
    return GuidanceMap(img, geom_d.coverage, GEOM_DISP)


class NeuralCodes(nn.Module):
    """Learnable per-vertex latent codes."""

    def __init__(self, n_vertices, dim=CODE_DIM, init_std=0.02, generator=None):
        super().__init__()
        init = torch.randn(n_vertices, dim, generator=generator) * init_std
        self.codes = nn.Parameter(init)

    @property
    def dim(self):
        return self.codes.shape[1]

    def render(self, geometry):
        return render_attributes(self.codes, geometry.cache)


def posed_neural_codes(codes, mesh, cam, height, width):
    """Rasterize codes (tensor, ``NeuralCodes`` or array) over the posed mesh."""
    if isinstance(codes, NeuralCodes):
        codes = codes.codes
    if codes.shape[0] != mesh.vertices.shape[0]:
        raise GuidanceError(f"{codes.shape[0]} codes for a mesh with {mesh.vertices.shape[0]} vertices")
    geom = FrameGeometry.build(mesh, cam, height, width)
    if isinstance(codes, torch.Tensor):
        img = render_attributes(codes, geom.cache)
    else:
        img = interpolate(geom.cache, codes)
    return GuidanceMap(img, geom.coverage, NEURAL_CODES)


def nmfc(asset, mesh, cam, height, width):
    """3-channel render of the asset's normalized template coordinates."""
    geom = FrameGeometry.build(mesh, cam, height, width)
    return nmfc_from_geometry(asset, geom)


def nmfc_from_geometry(asset, geom):
    return GuidanceMap(interpolate(geom.cache, asset.normalized_template), geom.coverage, NMFC)
