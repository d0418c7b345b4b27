"""FLAME-style parametric head: blendshapes, linear blend skinning and weak-perspective projection.

All geometry is computed in float64 numpy; nothing here needs gradients.

Joint order is fixed: 0 = global (root), 1 = neck, 2 = jaw, 3 = left eye,
4 = right eye.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import archive

JOINT_NAMES = ("global", "neck", "jaw", "left_eye", "right_eye")
N_LANDMARKS = 68
ASSET_FORMAT = "pwmface-head"
ASSET_VERSION = 1
ASSET_ARRAYS = (
    "template_vertices",
    "faces",
    "shape_basis",
    "expression_basis",
    "pose_corrective_basis",
    "joint_regressor",
    "skinning_weights",
    "joint_parents",
    "landmark_indices",
    "normalized_template",
)
_INT_ARRAYS = {"faces", "joint_parents", "landmark_indices"}


class AssetError(ValueError):
    """Head asset data violates a structural invariant."""


class ConfigurationError(ValueError):
    """Parameters do not match the asset they are applied to."""


@dataclass(frozen=True, eq=False)
class HeadAsset:
    template_vertices: np.ndarray      # N x 3
    faces: np.ndarray                  # F x 3, counter-clockwise seen from outside
    shape_basis: np.ndarray            # N x 3 x n_shape
    expression_basis: np.ndarray       # N x 3 x n_expr
    pose_corrective_basis: np.ndarray  # N x 3 x 9(K-1)
    joint_regressor: np.ndarray        # K x N
    skinning_weights: np.ndarray       # N x K
    joint_parents: np.ndarray          # K, parent index, -1 for the root
    landmark_indices: np.ndarray       # 68
    normalized_template: np.ndarray    # N x 3 in [0, 1]

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_joints(self):
        return self.joint_regressor.shape[0]

    @property
    def n_shape(self):
        return self.shape_basis.shape[2]

    @property
    def n_expression(self):
        return self.expression_basis.shape[2]

    def validate(self):
        n = self.n_vertices
        k = self.n_joints
        if self.template_vertices.shape != (n, 3):
            raise AssetError("template_vertices must be N x 3")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise AssetError("faces must be F x 3")
        if self.faces.min() < 0 or self.faces.max() >= n:
            raise AssetError("face index out of range")
        for name in ("shape_basis", "expression_basis", "pose_corrective_basis"):
            arr = getattr(self, name)
            if arr.ndim != 3 or arr.shape[:2] != (n, 3):
                raise AssetError(f"{name} must be N x 3 x D")
        if self.pose_corrective_basis.shape[2] != 9 * (k - 1):
            raise AssetError("pose_corrective_basis must have 9(K-1) columns")
        if self.joint_regressor.shape != (k, n):
            raise AssetError("joint_regressor must be K x N")
        w = self.skinning_weights
        if w.shape != (n, k):
            raise AssetError("skinning_weights must be N x K")
        if (w < 0).any() or np.abs(w.sum(axis=1) - 1).max() > 1e-6:
            raise AssetError("skinning weight rows must be non-negative and sum to 1")
        parents = self.joint_parents
        if parents.shape != (k,) or parents[0] != -1:
            raise AssetError("joint_parents must be a K-vector rooted at joint 0")
        if any(not 0 <= parents[j] < j for j in range(1, k)):
            raise AssetError("joint_parents must list each parent before its child")
        lm = self.landmark_indices
        if lm.shape != (N_LANDMARKS,) or lm.min() < 0 or lm.max() >= n:
            raise AssetError("landmark_indices must be 68 valid vertex indices")
        nt = self.normalized_template
        if nt.shape != (n, 3) or nt.min() < 0 or nt.max() > 1:
            raise AssetError("normalized_template must be N x 3 within [0, 1]")
        return self


@dataclass
class FaceParams:
    beta: np.ndarray
    theta: np.ndarray     # K x 3 axis-angle
    psi: np.ndarray
    camera: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))  # (s, tx, ty)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1, 3)
        self.psi = np.asarray(self.psi, dtype=np.float64).reshape(-1)
        self.camera = np.asarray(self.camera, dtype=np.float64).reshape(3)
        if not (np.isfinite(self.theta).all() and np.isfinite(self.beta).all()
                and np.isfinite(self.psi).all() and np.isfinite(self.camera).all()):
            raise ValueError("face parameters must be finite")
        if self.camera[0] <= 0:
            raise ValueError("camera scale must be positive")

    @classmethod
    def neutral(cls, asset, camera=(1.0, 0.0, 0.0)):
        return cls(np.zeros(asset.n_shape), np.zeros((asset.n_joints, 3)),
                   np.zeros(asset.n_expression), np.array(camera, dtype=np.float64))

    def to_vector(self):
        return np.concatenate([self.beta, self.theta.reshape(-1), self.psi, self.camera])

    @classmethod
    def from_vector(cls, vec, n_shape, n_joints, n_expression):
        vec = np.asarray(vec, dtype=np.float64)
        a = n_shape
        b = a + 3 * n_joints
        c = b + n_expression
        if vec.shape != (c + 3,):
            raise ValueError(f"parameter vector must have length {c + 3}, got {vec.shape}")
        return cls(vec[:a], vec[a:b].reshape(n_joints, 3), vec[b:c], vec[c:])

    def replace(self, **changes):
        return replace(self, **{k: np.array(v, dtype=np.float64) for k, v in changes.items()})

    def copy(self):
        return FaceParams(self.beta.copy(), self.theta.copy(), self.psi.copy(), self.camera.copy())


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray


def rodrigues(axis_angle):
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    r = np.asarray(axis_angle, dtype=np.float64)
    out = np.broadcast_to(np.eye(3), r.shape[:-1] + (3, 3)).copy()
    theta = np.linalg.norm(r, axis=-1)
    nz = theta > 0
    if nz.any():
        k = r[nz] / theta[nz, None]
        kx, ky, kz = k[:, 0], k[:, 1], k[:, 2]
        zero = np.zeros_like(kx)
        K = np.stack([zero, -kz, ky, kz, zero, -kx, -ky, kx, zero], axis=-1).reshape(-1, 3, 3)
        s = np.sin(theta[nz])[:, None, None]
        c = np.cos(theta[nz])[:, None, None]
        out[nz] = np.eye(3) + s * K + (1 - c) * (K @ K)
    return out


def _check_params(asset, params):
    if params.beta.shape != (asset.n_shape,):
        raise ConfigurationError(f"beta has {params.beta.size} entries, asset expects {asset.n_shape}")
    if params.psi.shape != (asset.n_expression,):
        raise ConfigurationError(f"psi has {params.psi.size} entries, asset expects {asset.n_expression}")
    if params.theta.shape != (asset.n_joints, 3):
        raise ConfigurationError(f"theta must be {asset.n_joints} x 3")


def joint_locations(asset, beta):
    v_shaped = asset.template_vertices + asset.shape_basis @ beta
    return asset.joint_regressor @ v_shaped


def lbs(asset, params):
    """Pose the head: blendshapes, pose correctives, then linear blend skinning."""
    _check_params(asset, params)
    v_shaped = asset.template_vertices + asset.shape_basis @ params.beta
    joints = asset.joint_regressor @ v_shaped
    rot = rodrigues(params.theta)
    eye = np.eye(3)
    pose_feature = (rot[1:] - eye).reshape(-1)
    v_posed = v_shaped + asset.expression_basis @ params.psi + asset.pose_corrective_basis @ pose_feature

    # Global rotation R_k and offset t_k per joint such that x -> R_k x + t_k is
    # the joint's rest-to-posed rigid transform; t_k = t_parent + (R_parent - R_k) J_k
    # keeps the rest pose exactly stationary.
    k = asset.n_joints
    rg = np.empty((k, 3, 3))
    tg = np.empty((k, 3))
    rg[0] = rot[0]
    tg[0] = (eye - rot[0]) @ joints[0]
    for j in range(1, k):
        p = asset.joint_parents[j]
        rg[j] = rg[p] @ rot[j]
        tg[j] = tg[p] + (rg[p] - rg[j]) @ joints[j]

    w = asset.skinning_weights
    blend_r = np.einsum("nk,kij->nij", w, rg - eye)
    blend_t = w @ tg
    verts = v_posed + np.einsum("nij,nj->ni", blend_r, v_posed) + blend_t
    return Mesh(verts, asset.faces)


def project(mesh, camera, width, height):
    """Weak-perspective projection into pixel coordinates.

    ``(x, y) = s * ((v_x, v_y) + (t_x, t_y))`` in normalized device units,
    then mapped to pixels with y pointing down.  Returned depth is ``-v_z``
    so that smaller values are nearer the viewer (the model faces +z).
    """
    s, tx, ty = np.asarray(camera, dtype=np.float64)
    if s <= 0:
        raise ValueError("camera scale must be positive")
    v = mesh.vertices if isinstance(mesh, Mesh) else np.asarray(mesh, dtype=np.float64)
    x = s * (v[:, 0] + tx)
    y = s * (v[:, 1] + ty)
    px = (x + 1.0) * (width / 2.0)
    py = (1.0 - y) * (height / 2.0)
    return np.stack([px, py], axis=1), -v[:, 2:3].copy()


def landmarks2d(asset, params, width, height):
    mesh = lbs(asset, params)
    pos, _ = project(mesh.vertices[asset.landmark_indices], params.camera, width, height)
    return pos


def vertex_normals(vertices, faces):
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    vn = np.zeros_like(vertices)
    for c in range(3):
        np.add.at(vn, faces[:, c], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.maximum(norm, 1e-12)


# ---------------------------------------------------------------------------
# asset file format
# ---------------------------------------------------------------------------

def save_asset(path, asset):
    asset.validate()
    meta = {
        "format": ASSET_FORMAT,
        "version": ASSET_VERSION,
        "N": int(asset.n_vertices),
        "F": int(asset.faces.shape[0]),
        "K": int(asset.n_joints),
        "n_shape": int(asset.n_shape),
        "n_expression": int(asset.n_expression),
        "joint_names": list(JOINT_NAMES[:asset.n_joints]),
    }
    archive.save(path, {name: getattr(asset, name) for name in ASSET_ARRAYS}, meta)


def load_asset(path):
    arrays, meta = archive.load(path)
    if meta.get("format") != ASSET_FORMAT:
        raise AssetError(f"{path} is not a head asset")
    if meta.get("version") != ASSET_VERSION:
        raise AssetError(f"unsupported head asset version {meta.get('version')}")
    missing = [n for n in ASSET_ARRAYS if n not in arrays]
    if missing:
        raise AssetError(f"asset is missing arrays: {missing}")
    fields = {n: (arrays[n].astype(np.int64) if n in _INT_ARRAYS else arrays[n].astype(np.float64))
              for n in ASSET_ARRAYS}
    asset = HeadAsset(**fields).validate()
    if (asset.n_vertices, asset.faces.shape[0], asset.n_joints) != (meta["N"], meta["F"], meta["K"]):
        raise AssetError("asset header does not match array sizes")
    return asset


# ---------------------------------------------------------------------------
# procedural toy head
# ---------------------------------------------------------------------------

HEAD_RADII = np.array([0.72, 0.95, 0.80])
EYE_CENTERS = np.array([[-0.27, 0.17, 0.66], [0.27, 0.17, 0.66]])
EYE_RADIUS = 0.13


def _uv_sphere(n_lat, n_lon):
    """Unit sphere with ``n_lat`` latitude rings plus two poles."""
    verts = [[0.0, -1.0, 0.0]]
    lats = -np.pi / 2 + np.pi * (np.arange(n_lat) + 1) / (n_lat + 1)
    lons = 2 * np.pi * np.arange(n_lon) / n_lon
    for lat in lats:
        for lon in lons:
            verts.append([np.cos(lat) * np.sin(lon), np.sin(lat), np.cos(lat) * np.cos(lon)])
    verts.append([0.0, 1.0, 0.0])
    verts = np.array(verts)
    faces = []
    ring = lambda i, j: 1 + i * n_lon + (j % n_lon)  # noqa: E731
    top = len(verts) - 1
    for j in range(n_lon):
        faces.append([0, ring(0, j), ring(0, j + 1)])
        faces.append([top, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)])
    for i in range(n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append([a, c, b])
            faces.append([b, c, d])
    return verts, np.array(faces)


def _orient_outward(verts, faces, center):
    tri = verts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", n, tri.mean(axis=1) - center) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def _bump(points, center, radius):
    d2 = ((points - center) ** 2).sum(axis=1)
    return np.exp(-d2 / (2 * radius ** 2))


def _smoothstep(e0, e1, x):
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3 - 2 * t)


def make_toy_asset(seed=0, n_lat=18, n_lon=28, eye_lat=4, eye_lon=8):
    """Build the procedural low-poly head used throughout the tests (~570 vertices)."""
    rng = np.random.default_rng(seed)
    unit, head_faces = _uv_sphere(n_lat, n_lon)
    head = unit * HEAD_RADII
    # nose and chin give the silhouette some facial structure
    front = np.clip(unit[:, 2], 0, None)
    head[:, 2] += 0.22 * _bump(head, np.array([0.0, -0.05, 0.8]), 0.14) * front
    head[:, 2] += 0.06 * _bump(head, np.array([0.0, -0.75, 0.55]), 0.2) * front
    n_head = head.shape[0]

    eye_unit, eye_faces = _uv_sphere(eye_lat, eye_lon)
    verts = [head]
    faces = [_orient_outward(head, head_faces, np.zeros(3))]
    eye_ranges = []
    for center in EYE_CENTERS:
        start = sum(v.shape[0] for v in verts)
        ev = eye_unit * EYE_RADIUS + center
        verts.append(ev)
        faces.append(_orient_outward(ev, eye_faces, center) + start)
        eye_ranges.append(np.arange(start, start + ev.shape[0]))
    verts = np.concatenate(verts)
    faces = np.concatenate(faces)
    n = verts.shape[0]
    is_head = np.arange(n) < n_head

    # joints: root at the skull base, neck above it, jaw hinge, two eye centers
    k = len(JOINT_NAMES)
    parents = np.array([-1, 0, 1, 1, 1])
    regressor = np.zeros((k, n))
    def ring_weights(i):
        w = np.zeros(n)
        idx = 1 + i * n_lon + np.arange(n_lon)
        w[idx] = 1.0 / n_lon
        return w

    regressor[0] = ring_weights(1)
    regressor[1] = ring_weights(n_lat // 4)
    regressor[2] = ring_weights(n_lat // 2 - 2)
    for j, rng_idx in zip((3, 4), eye_ranges):
        regressor[j, rng_idx] = 1.0 / rng_idx.size

    # skinning weights
    w = np.zeros((n, k))
    y, z = verts[:, 1], verts[:, 2]
    neck_share = _smoothstep(-0.9, -0.55, y)
    jaw = _smoothstep(-0.25, -0.5, y) * _smoothstep(-0.05, 0.35, z)
    w[:, 0] = (1 - neck_share) * (1 - jaw)
    w[:, 1] = neck_share * (1 - jaw)
    w[:, 2] = jaw
    w[~is_head] = 0.0
    for j, rng_idx in zip((3, 4), eye_ranges):
        w[rng_idx, j] = 1.0

    # shape basis: head width, face length, nose size, chin width
    shape = np.zeros((n, 3, 4))
    shape[:, 0, 0] = 0.08 * verts[:, 0]
    shape[:, 1, 1] = 0.07 * verts[:, 1]
    shape[:, 2, 2] = 0.08 * _bump(verts, np.array([0.0, -0.05, 0.95]), 0.15)
    chin = _bump(verts, np.array([0.0, -0.75, 0.6]), 0.25)
    shape[:, 0, 3] = 0.12 * chin * verts[:, 0]
    shape[:, 2, 3] = 0.03 * chin

    # expression basis: smile, brow raise, cheek puff, lip pucker
    expr = np.zeros((n, 3, 4))
    for sx in (-1, 1):
        corner = _bump(verts, np.array([0.25 * sx, -0.45, 0.65]), 0.12)
        expr[:, 0, 0] += 0.04 * sx * corner
        expr[:, 1, 0] += 0.05 * corner
        brow = _bump(verts, np.array([0.27 * sx, 0.42, 0.62]), 0.13)
        expr[:, 1, 1] += 0.06 * brow
        cheek = _bump(verts, np.array([0.42 * sx, -0.2, 0.55]), 0.16)
        expr[:, 0, 2] += 0.05 * sx * cheek
        expr[:, 2, 2] += 0.04 * cheek
    mouth = _bump(verts, np.array([0.0, -0.45, 0.72]), 0.13)
    expr[:, 2, 3] = 0.06 * mouth
    expr[:, 0, 3] = -0.08 * mouth * verts[:, 0]
    expr[~is_head] = 0.0

    # pose correctives: smooth random fields supported where the joint has weight
    pose = np.zeros((n, 3, 9 * (k - 1)))
    for j in range(1, k):
        for e in range(9):
            freq = rng.normal(size=(3, 3)) * 2.0
            phase = rng.uniform(0, 2 * np.pi, size=3)
            field_ = np.sin(verts @ freq + phase) * 0.01
            pose[:, :, 9 * (j - 1) + e] = field_ * w[:, j:j + 1]

    # landmarks: nearest unused head vertex to a 68-point facial layout
    targets = _landmark_layout()
    head_front = np.where(is_head & (verts[:, 2] > 0.0))[0]
    used = set()
    landmarks = []
    for t in targets:
        d = ((verts[head_front, :2] - t) ** 2).sum(axis=1)
        for idx in head_front[np.argsort(d, kind="stable")]:
            if idx not in used:
                used.add(idx)
                landmarks.append(idx)
                break
    landmarks = np.array(landmarks)

    lo, hi = verts.min(axis=0), verts.max(axis=0)
    normalized = (verts - lo) / (hi - lo)

    def f32(a):
        return np.asarray(a, dtype=np.float32).astype(np.float64)

    weights = f32(w)
    weights /= weights.sum(axis=1, keepdims=True)
    return HeadAsset(
        template_vertices=f32(verts),
        faces=faces.astype(np.int64),
        shape_basis=f32(shape),
        expression_basis=f32(expr),
        pose_corrective_basis=f32(pose),
        joint_regressor=f32(regressor),
        skinning_weights=weights,
        joint_parents=parents,
        landmark_indices=landmarks.astype(np.int64),
        normalized_template=np.clip(f32(normalized), 0.0, 1.0),
    ).validate()


def _landmark_layout():
    """68 (x, y) targets in model units following the usual landmark ordering."""
    pts = []
    for a in np.linspace(-1.3, 1.3, 17):
        pts.append([0.62 * np.sin(a), 0.15 - 0.98 * np.cos(a)])
    for sx in (-1, 1):
        xs = np.linspace(0.12, 0.45, 5)[::sx] * sx
        pts += [[x, 0.36 + 0.04 * np.cos((abs(x) - 0.28) * 9)] for x in xs]
    pts += [[0.0, 0.10 - 0.07 * i] for i in range(4)]
    pts += [[x, -0.22] for x in np.linspace(-0.14, 0.14, 5)]
    for cx in (-0.27, 0.27):
        a = np.linspace(0, 2 * np.pi, 7)[:-1]
        pts += [[cx + 0.13 * np.cos(np.pi - ai), 0.17 + 0.05 * np.sin(ai)] for ai in a]
    a = np.linspace(0, 2 * np.pi, 13)[:-1]
    pts += [[0.24 * np.cos(np.pi - ai), -0.45 + 0.09 * np.sin(ai)] for ai in a]
    a = np.linspace(0, 2 * np.pi, 9)[:-1]
    pts += [[0.14 * np.cos(np.pi - ai), -0.45 + 0.035 * np.sin(ai)] for ai in a]
    assert len(pts) == N_LANDMARKS
    return np.array(pts)
