"""Synthetic talking-head dataset: generation, on-disk layout and batch sampling.

Layout of a dataset directory::

    meta.json          generation settings and parameter layout
    asset.pwma         the head asset used for every render
    params.pwma        arrays ``params`` (I x F x P), ``landmarks`` (I x F x 68 x 2),
                       ``texture`` (I x N x 3), ``beta`` (I x n_shape)
    id_000/frame_000.png ...   8-bit RGB renders

Each identity owns a shape vector, a vertex-color texture and a static
background; frames vary pose, expression and camera.  Parameters are rounded
to float32 before rendering so that everything stored can be recomputed
exactly from the stored parameters.
"""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import archive
from .face_model import FaceParams, load_asset, make_toy_asset, project, lbs, save_asset, vertex_normals
from .guidance import FrameGeometry
from .rasterizer import interpolate, rasterize_geometry

DATASET_FORMAT = "pwmface-dataset"
LIGHT_DIR = np.array([0.35, 0.45, 1.0]) / np.linalg.norm([0.35, 0.45, 1.0])


class DatasetError(RuntimeError):
    pass


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def identity_rng(seed, identity):
    return np.random.default_rng(np.random.SeedSequence([seed, identity]))


def sample_texture(asset, rng):
    """Smooth per-vertex albedo in [0, 1]: skin, hair cap, lips, brows and eyes."""
    v = asset.template_vertices
    skin = np.array([0.85, 0.62, 0.5]) * rng.uniform(0.55, 1.1) + rng.uniform(-0.06, 0.06, 3)
    freq = rng.normal(size=(3, 4)) * 2.5
    phase = rng.uniform(0, 2 * np.pi, 4)
    mottle = np.sin(v @ freq + phase) @ rng.uniform(-0.05, 0.05, (4, 3))
    color = np.clip(skin + mottle, 0, 1)

    hair = np.clip(rng.uniform(0.05, 0.6) * np.array([1.0, 0.8, 0.6]) + rng.uniform(-0.05, 0.05, 3), 0, 1)
    hairline = rng.uniform(0.35, 0.6)
    hair_w = 1 / (1 + np.exp(-(v[:, 1] - hairline + 0.4 * (v[:, 2] < 0) * (0.6 - v[:, 2])) * 14))
    color = color * (1 - hair_w[:, None]) + hair * hair_w[:, None]

    lips = np.exp(-((v[:, 0] / 0.22) ** 2 + ((v[:, 1] + 0.45) / 0.07) ** 2)) * (v[:, 2] > 0.3)
    color = color * (1 - 0.7 * lips[:, None]) + np.array([0.7, 0.2, 0.25]) * 0.7 * lips[:, None]
    for sx in (-1, 1):
        brow = np.exp(-(((v[:, 0] - 0.27 * sx) / 0.13) ** 2 + ((v[:, 1] - 0.38) / 0.04) ** 2)) * (v[:, 2] > 0.3)
        color = color * (1 - 0.8 * brow[:, None]) + hair * 0.8 * brow[:, None]

    # eyeballs: white with a dark iris facing +z
    eye = asset.skinning_weights[:, 3:].sum(axis=1) > 0.5
    centers = asset.joint_regressor[3:] @ v
    for c in centers:
        sel = eye & (np.linalg.norm(v - c, axis=1) < 0.2)
        local = v[sel] - c
        front = local[:, 2] / np.linalg.norm(local, axis=1)
        iris = np.array([0.15, 0.25, 0.35]) * rng.uniform(0.5, 1.5)
        color[sel] = np.where(front[:, None] > 0.75, np.clip(iris, 0, 1), np.array([0.95, 0.95, 0.92]))
    return np.clip(color, 0, 1)


def sample_background(rng, resolution):
    """Mid-gray field with seeded low-frequency color noise, HxWx3 in [0, 1]."""
    coarse = rng.normal(size=(1, 6, 6)) * 0.1 + rng.normal(size=(3, 6, 6)) * 0.05
    t = torch.as_tensor(coarse[None], dtype=torch.float64)
    fine = torch.nn.functional.interpolate(t, size=(resolution, resolution), mode="bicubic", align_corners=True)
    bg = 0.5 + fine[0].numpy().transpose(1, 2, 0) + rng.uniform(-0.08, 0.08, 3)
    return np.clip(bg, 0.05, 0.95)


def sample_params(asset, rng, beta):
    theta = np.zeros((asset.n_joints, 3))
    theta[0] = [rng.uniform(-0.3, 0.3), rng.uniform(-0.5, 0.5), rng.uniform(-0.2, 0.2)]
    theta[1] = rng.normal(size=3) * 0.05
    theta[2, 0] = rng.uniform(0.0, 0.35)
    gaze = [rng.uniform(-0.25, 0.25), rng.uniform(-0.3, 0.3), 0.0]
    theta[3] = theta[4] = gaze
    psi = rng.uniform(-1.5, 1.5, asset.n_expression)
    camera = [rng.uniform(0.72, 0.82), rng.uniform(-0.06, 0.06), rng.uniform(-0.06, 0.06)]
    return FaceParams(_f32(beta), _f32(theta), _f32(psi), _f32(camera))


def render_frame(asset, params, texture, background, resolution):
    """Lambertian-shaded, vertex-colored render over ``background``; returns (HxWx3 float, coverage)."""
    mesh = lbs(asset, params)
    pos, depth = project(mesh, params.camera, resolution, resolution)
    cache, _ = rasterize_geometry(pos, depth, mesh.faces, resolution, resolution, cull_backfaces=True)
    normals = vertex_normals(mesh.vertices, mesh.faces)
    shade = 0.35 + 0.65 * np.clip(normals @ LIGHT_DIR, 0, None)
    colors = texture * shade[:, None]
    face = interpolate(cache, colors).transpose(1, 2, 0)
    cov = cache.coverage
    img = np.where(cov[..., None], face, background)
    return np.clip(img, 0, 1), cov


def to_uint8(img):
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def _generate_identity(args):
    seed, identity, frames, resolution, asset = args
    rng = identity_rng(seed, identity)
    beta = _f32(np.clip(rng.normal(size=asset.n_shape), -2, 2))
    texture = _f32(sample_texture(asset, rng))
    background = sample_background(rng, resolution)
    images, params, landmarks = [], [], []
    for f in range(frames):
        p = sample_params(asset, rng, beta)
        img, cov = render_frame(asset, p, texture, background, resolution)
        if not cov.any():
            raise DatasetError(f"identity {identity} frame {f} has no face coverage")
        images.append(to_uint8(img))
        params.append(p.to_vector())
        mesh_lm = lbs(asset, p).vertices[asset.landmark_indices]
        landmarks.append(project(mesh_lm, p.camera, resolution, resolution)[0])
    return identity, beta, texture, images, np.array(params), np.array(landmarks)


def gen_dataset(out_dir, seed=0, n_identities=20, frames_per_identity=20, resolution=64, asset=None, workers=1):
    """Render a synthetic dataset into ``out_dir``; identical arguments give identical bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    asset = asset if asset is not None else make_toy_asset()
    save_asset(out / "asset.pwma", asset)
    jobs = [(seed, i, frames_per_identity, resolution, asset) for i in range(n_identities)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_generate_identity, jobs))
    else:
        results = [_generate_identity(j) for j in jobs]

    all_params, all_lm, textures, betas = [], [], [], []
    for identity, beta, texture, images, params, landmarks in results:
        d = out / f"id_{identity:03d}"
        d.mkdir(exist_ok=True)
        for f, img in enumerate(images):
            Image.fromarray(img, mode="RGB").save(d / f"frame_{f:03d}.png", optimize=False)
        all_params.append(params)
        all_lm.append(landmarks)
        textures.append(texture)
        betas.append(beta)
    archive.save(out / "params.pwma", {
        "params": np.array(all_params),
        "landmarks": np.array(all_lm),
        "texture": np.array(textures),
        "beta": np.array(betas),
    }, {"format": DATASET_FORMAT})
    meta = {
        "format": DATASET_FORMAT,
        "seed": seed,
        "n_identities": n_identities,
        "frames_per_identity": frames_per_identity,
        "resolution": resolution,
        "n_shape": asset.n_shape,
        "n_joints": asset.n_joints,
        "n_expression": asset.n_expression,
        "param_layout": ["beta", "theta", "psi", "camera"],
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


@dataclass
class Batch:
    source: torch.Tensor
    target: torch.Tensor
    geoms_s: list
    geoms_d: list
    params_s: list
    params_d: list
    keys: list       # (identity, source frame, target frame)


class SyntheticDataset:
    """A generated dataset loaded into memory with per-frame rasterization caches."""

    def __init__(self, root, holdout_identities=4):
        self.root = Path(root)
        meta_path = self.root / "meta.json"
        if not meta_path.exists():
            raise DatasetError(f"{root} does not contain a dataset (meta.json missing)")
        self.meta = json.loads(meta_path.read_text())
        self.asset = load_asset(self.root / "asset.pwma")
        arrays, _ = archive.load(self.root / "params.pwma")
        self.param_vectors = arrays["params"].astype(np.float64)
        self.landmarks = arrays["landmarks"].astype(np.float64)
        self.textures = arrays["texture"].astype(np.float64)
        self.resolution = self.meta["resolution"]
        self.n_identities = self.meta["n_identities"]
        self.n_frames = self.meta["frames_per_identity"]
        if not 0 <= holdout_identities < self.n_identities:
            raise DatasetError("holdout_identities must leave at least one training identity")
        self.train_ids = list(range(self.n_identities - holdout_identities))
        self.heldout_ids = list(range(self.n_identities - holdout_identities, self.n_identities))
        self.images = np.stack([
            np.stack([np.asarray(Image.open(self.root / f"id_{i:03d}" / f"frame_{f:03d}.png").convert("RGB"))
                      for f in range(self.n_frames)])
            for i in range(self.n_identities)])
        self._geoms = {}

    def params(self, identity, frame):
        a = self.asset
        return FaceParams.from_vector(self.param_vectors[identity, frame], a.n_shape, a.n_joints, a.n_expression)

    def image(self, identity, frame):
        """Frame as a 3 x H x W float32 tensor in [-1, 1]."""
        img = self.images[identity, frame].astype(np.float32) / 127.5 - 1.0
        return torch.from_numpy(img.transpose(2, 0, 1).copy())

    def geometry(self, identity, frame):
        key = (identity, frame)
        if key not in self._geoms:
            p = self.params(identity, frame)
            self._geoms[key] = FrameGeometry.build(lbs(self.asset, p), p.camera, self.resolution, self.resolution)
        return self._geoms[key]

    def make_batch(self, keys):
        """Batch of (identity, source frame, target frame) triples."""
        return Batch(
            source=torch.stack([self.image(i, s) for i, s, _ in keys]),
            target=torch.stack([self.image(i, t) for i, _, t in keys]),
            geoms_s=[self.geometry(i, s) for i, s, _ in keys],
            geoms_d=[self.geometry(i, t) for i, _, t in keys],
            params_s=[self.params(i, s) for i, s, _ in keys],
            params_d=[self.params(i, t) for i, _, t in keys],
            keys=list(keys),
        )

    def sample_batch(self, rng, batch_size, identities=None):
        ids = self.train_ids if identities is None else identities
        keys = []
        for _ in range(batch_size):
            i = int(ids[rng.integers(len(ids))])
            s, t = rng.choice(self.n_frames, size=2, replace=False)
            keys.append((i, int(s), int(t)))
        return self.make_batch(keys)
