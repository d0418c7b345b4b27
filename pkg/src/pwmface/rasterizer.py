"""Software triangle rasterizer with z-buffering and per-vertex attribute interpolation.

Conventions:

* pixel (i, j) samples the point (j + 0.5, i + 0.5); y grows downwards;
* a triangle is front-facing when its vertices run counter-clockwise as seen
  on screen, i.e. its cross product in y-down pixel coordinates is negative;
* shared edges follow the top-left rule, so every pixel center on an edge
  belongs to exactly one of the triangles sharing it;
* the smallest depth wins and exact depth ties go to the lower triangle index.

Interpolation is affine in screen space.  The forward pass records, for every
covered pixel, the winning triangle and its barycentric weights; this is all
``rasterize_backward`` needs to push image gradients back onto the vertex
attributes.  Geometry never receives gradients.
"""

from dataclasses import dataclass

import numpy as np


class RasterInputError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AttributeMesh:
    positions2d: np.ndarray  # N x 2 pixel coordinates
    depth: np.ndarray        # N (or N x 1), smaller is nearer
    faces: np.ndarray        # F x 3
    attributes: np.ndarray   # N x c

    def __post_init__(self):
        attrs = np.asarray(self.attributes, dtype=np.float64)
        if attrs.ndim == 1:
            attrs = attrs[:, None]
        object.__setattr__(self, "attributes", attrs)
        object.__setattr__(self, "positions2d", np.asarray(self.positions2d, dtype=np.float64))
        object.__setattr__(self, "depth", np.asarray(self.depth, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64))
        n = self.positions2d.shape[0]
        if self.positions2d.shape != (n, 2) or self.depth.shape != (n,) or attrs.shape[0] != n:
            raise RasterInputError("positions2d, depth and attributes must describe the same vertices")
        if attrs.shape[1] < 1:
            raise RasterInputError("at least one attribute channel is required")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise RasterInputError("face index out of range")


@dataclass(frozen=True, eq=False)
class RasterCache:
    """Per-pixel winner record of a forward pass; enough to interpolate or backpropagate."""
    triangle_ids: np.ndarray   # H x W, -1 where uncovered
    barycentric: np.ndarray    # H x W x 3, zeros where uncovered
    vertex_ids: np.ndarray     # H x W x 3, vertex index per barycentric slot (0 where uncovered)
    n_vertices: int

    @property
    def coverage(self):
        return self.triangle_ids >= 0


@dataclass(frozen=True, eq=False)
class RasterOutput:
    image: np.ndarray          # c x H x W
    coverage: np.ndarray       # H x W bool
    depth_buffer: np.ndarray   # H x W, +inf where uncovered
    cache: RasterCache


def edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def owns_edge(dx, dy):
    """Top-left rule for an edge of a positively oriented (y-down cross > 0) triangle."""
    return (dy < 0) | ((dy == 0) & (dx > 0))


def signed_area2(p0, p1, p2):
    """Twice the signed area in y-down pixel coordinates (negative = front-facing)."""
    return (p1[..., 0] - p0[..., 0]) * (p2[..., 1] - p0[..., 1]) - (p1[..., 1] - p0[..., 1]) * (p2[..., 0] - p0[..., 0])


def rasterize_geometry(positions2d, depth, faces, width, height, cull_backfaces=True):
    """Visibility pass: returns ``(cache, depth_buffer)``."""
    if width < 1 or height < 1:
        raise RasterInputError("raster size must be positive")
    pos = np.asarray(positions2d, dtype=np.float64)
    dep = np.asarray(depth, dtype=np.float64).reshape(-1)
    faces = np.asarray(faces, dtype=np.int64)
    if not (np.isfinite(pos).all() and np.isfinite(dep).all()):
        raise RasterInputError("vertex positions and depths must be finite")

    zbuf = np.full((height, width), np.inf)
    tri_ids = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    vids = np.zeros((height, width, 3), dtype=np.int64)

    tri = pos[faces]
    area2 = signed_area2(tri[:, 0], tri[:, 1], tri[:, 2])
    keep = area2 != 0
    if cull_backfaces:
        keep &= area2 < 0
    lo = np.floor(tri.min(axis=1) - 0.5).astype(np.int64)
    hi = np.ceil(tri.max(axis=1) - 0.5).astype(np.int64)

    for t in np.flatnonzero(keep):
        x0, y0 = max(lo[t, 0], 0), max(lo[t, 1], 0)
        x1, y1 = min(hi[t, 0], width - 1), min(hi[t, 1], height - 1)
        if x0 > x1 or y0 > y1:
            continue
        ia, ib, ic = faces[t]
        if area2[t] < 0:
            ib, ic = ic, ib
        ax, ay = pos[ia]
        bx, by = pos[ib]
        cx, cy = pos[ic]
        a2 = -area2[t] if area2[t] < 0 else area2[t]
        px = np.arange(x0, x1 + 1) + 0.5
        py = (np.arange(y0, y1 + 1) + 0.5)[:, None]
        e_a = edge(bx, by, cx, cy, px, py)
        e_b = edge(cx, cy, ax, ay, px, py)
        e_c = edge(ax, ay, bx, by, px, py)
        inside = ((e_a > 0) | ((e_a == 0) & owns_edge(cx - bx, cy - by)))
        inside &= ((e_b > 0) | ((e_b == 0) & owns_edge(ax - cx, ay - cy)))
        inside &= ((e_c > 0) | ((e_c == 0) & owns_edge(bx - ax, by - ay)))
        if not inside.any():
            continue
        la, lb, lc = e_a / a2, e_b / a2, e_c / a2
        z = la * dep[ia] + lb * dep[ib] + lc * dep[ic]
        region = zbuf[y0:y1 + 1, x0:x1 + 1]
        win = inside & (z < region)
        if not win.any():
            continue
        region[win] = z[win]
        tri_ids[y0:y1 + 1, x0:x1 + 1][win] = t
        b = bary[y0:y1 + 1, x0:x1 + 1]
        b[win] = np.stack([la[win], lb[win], lc[win]], axis=-1)
        vids[y0:y1 + 1, x0:x1 + 1][win] = (ia, ib, ic)
    return RasterCache(tri_ids, bary, vids, pos.shape[0]), zbuf


def interpolate(cache, attributes):
    """Barycentric interpolation of N x c attributes using a recorded visibility pass."""
    attrs = np.asarray(attributes, dtype=np.float64)
    if attrs.ndim == 1:
        attrs = attrs[:, None]
    if attrs.shape[0] != cache.n_vertices:
        raise RasterInputError(f"expected {cache.n_vertices} attribute rows, got {attrs.shape[0]}")
    cov = cache.coverage
    h, w = cov.shape
    image = np.zeros((attrs.shape[1], h, w))
    b = cache.barycentric[cov]
    v = cache.vertex_ids[cov]
    image[:, cov] = (b[:, 0:1] * attrs[v[:, 0]] + b[:, 1:2] * attrs[v[:, 1]] + b[:, 2:3] * attrs[v[:, 2]]).T
    return image


def rasterize(mesh, width, height, cull_backfaces=True):
    cache, zbuf = rasterize_geometry(mesh.positions2d, mesh.depth, mesh.faces, width, height, cull_backfaces)
    return RasterOutput(interpolate(cache, mesh.attributes), cache.coverage, zbuf, cache)


def rasterize_backward(output_grad, cache):
    """Scatter a c x H x W image gradient onto the N x c vertex attributes."""
    if cache is None:
        raise RuntimeError("rasterize_backward needs the cache of a forward pass")
    grad = np.asarray(output_grad, dtype=np.float64)
    cov = cache.coverage
    if grad.ndim != 3 or grad.shape[1:] != cov.shape:
        raise RasterInputError("output gradient must be c x H x W matching the forward raster")
    out = np.zeros((cache.n_vertices, grad.shape[0]))
    g = grad[:, cov].T                     # P x c
    b = cache.barycentric[cov]             # P x 3
    v = cache.vertex_ids[cov]              # P x 3
    for k in range(3):
        np.add.at(out, v[:, k], b[:, k:k + 1] * g)
    return out


def save_debug_images(output, prefix):
    """Write ``<prefix>_coverage.png`` and ``<prefix>_attributes.png``."""
    from PIL import Image

    cov = (output.coverage.astype(np.uint8) * 255)
    Image.fromarray(cov, mode="L").save(f"{prefix}_coverage.png")
    img = output.image[:3]
    if img.shape[0] < 3:
        img = np.concatenate([img, np.zeros((3 - img.shape[0],) + img.shape[1:])])
    vals = img[:, output.coverage]
    lo, hi = (vals.min(), vals.max()) if vals.size else (0.0, 1.0)
    scaled = (img - lo) / max(hi - lo, 1e-12)
    scaled[:, ~output.coverage] = 0
    rgb = (np.clip(scaled, 0, 1) * 255).round().astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(rgb, mode="RGB").save(f"{prefix}_attributes.png")
