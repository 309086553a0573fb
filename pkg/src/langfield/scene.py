"""Scene parameterization: Gaussian parameter arrays, cameras, synthesis.

Conventions, fixed once for the whole package:
  * quaternions are (w, x, y, z), kept unit-norm,
  * camera space is right-handed with +z forward,
  * scale and opacity are stored as log_scale and opacity_logit,
  * covariance is R(q) S S^T R(q)^T with S = diag(exp(log_scale)).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import InvalidParameterError, FormatError, ShapeError

PARAM_NAMES = ("position", "rotation", "log_scale", "opacity_logit", "color", "f_lang", "f_ins")

_PARAM_WIDTH = {
    "position": 3,
    "rotation": 4,
    "log_scale": 3,
    "opacity_logit": 1,
    "color": 3,
    "f_lang": 3,
    "f_ins": 3,
}


def as_f32_grid(arr: np.ndarray) -> np.ndarray:
    """Round float64 values onto the float32 grid (stay float64 in memory).

    Scene state is persisted as float32, so anything meant to round-trip
    through disk bit-identically must live on this grid.
    """
    return np.asarray(arr, dtype=np.float64).astype(np.float32).astype(np.float64)


@dataclass
class GaussianScene:
    position: NDArray[np.float64]  # (N, 3)
    rotation: NDArray[np.float64]  # (N, 4) unit quaternions, (w, x, y, z)
    log_scale: NDArray[np.float64]  # (N, 3)
    opacity_logit: NDArray[np.float64]  # (N,)
    color: NDArray[np.float64]  # (N, 3) in [0, 1]
    f_lang: NDArray[np.float64]  # (N, 3)
    f_ins: NDArray[np.float64]  # (N, 3)

    @property
    def count(self) -> int:
        return self.position.shape[0]

    @classmethod
    def empty(cls, n: int = 0) -> "GaussianScene":
        rot = np.zeros((n, 4), dtype=np.float64)
        rot[:, 0] = 1.0
        return cls(
            position=np.zeros((n, 3)),
            rotation=rot,
            log_scale=np.zeros((n, 3)),
            opacity_logit=np.zeros(n),
            color=np.zeros((n, 3)),
            f_lang=np.zeros((n, 3)),
            f_ins=np.zeros((n, 3)),
        )

    def validate(self, check_quat_norm: bool = True) -> None:
        # check_quat_norm=False: the renderer normalizes internally and its
        # backward chains through that, so it accepts slightly off-norm quats
        n = self.count
        for name in PARAM_NAMES:
            arr = getattr(self, name)
            width = _PARAM_WIDTH[name]
            want = (n,) if width == 1 else (n, width)
            if arr.shape != want:
                raise ShapeError(f"{name}: expected shape {want}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"{name} contains non-finite values")
        if n and check_quat_norm:
            norms = np.linalg.norm(self.rotation, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise InvalidParameterError("rotation quaternions must be unit-norm within 1e-6")

    def copy(self) -> "GaussianScene":
        return GaussianScene(**{name: getattr(self, name).copy() for name in PARAM_NAMES})

    def select(self, index) -> "GaussianScene":
        """Subset by boolean mask or integer indices."""
        return GaussianScene(**{name: getattr(self, name)[index].copy() for name in PARAM_NAMES})

    @staticmethod
    def concatenate(a: "GaussianScene", b: "GaussianScene") -> "GaussianScene":
        return GaussianScene(
            **{
                name: np.concatenate([getattr(a, name), getattr(b, name)], axis=0)
                for name in PARAM_NAMES
            }
        )


# ---------------------------------------------------------------------------
# quaternion and covariance helpers

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise InvalidParameterError("cannot normalize near-zero quaternion")
    return q / norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions; normalizes internally."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Single 3x3 rotation matrix to a unit (w, x, y, z) quaternion, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b, batched over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def covariance(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """World covariance R S S^T R^T for (..., 4) quats and (..., 3) log scales."""
    log_scale = np.asarray(log_scale, dtype=np.float64)
    if not np.all(np.isfinite(log_scale)):
        raise InvalidParameterError("log_scale contains non-finite values")
    R = quat_to_rotmat(rotation)
    s = np.exp(log_scale)
    B = R * s[..., None, :]  # columns scaled
    return B @ np.swapaxes(B, -1, -2)


def surface_normal(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Rotation column at the argmin log-scale axis (ties: lowest index)."""
    R = quat_to_rotmat(rotation)
    log_scale = np.asarray(log_scale, dtype=np.float64)
    axis = np.argmin(log_scale, axis=-1)
    return np.take_along_axis(R, axis[..., None, None], axis=-1)[..., 0]


# ---------------------------------------------------------------------------
# cameras

@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: NDArray[np.float64]  # (4, 4), row-major, +z forward

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidParameterError("principal point must lie inside the image")
        w2c = np.asarray(self.world_to_camera, dtype=np.float64)
        if w2c.shape != (4, 4):
            raise ShapeError(f"world_to_camera must be (4, 4), got {w2c.shape}")
        R = w2c[:3, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise InvalidParameterError("world_to_camera rotation is not orthonormal within 1e-6")
        if not np.allclose(w2c[3], [0, 0, 0, 1], atol=1e-9):
            raise InvalidParameterError("world_to_camera last row must be [0, 0, 0, 1]")

    @property
    def rotation(self) -> np.ndarray:
        return np.asarray(self.world_to_camera, dtype=np.float64)[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return np.asarray(self.world_to_camera, dtype=np.float64)[:3, 3]

    @classmethod
    def look_at(
        cls,
        eye,
        target,
        up=(0.0, 1.0, 0.0),
        width: int = 64,
        height: int = 64,
        fx: float = 64.0,
        fy: float | None = None,
        cx: float | None = None,
        cy: float | None = None,
    ) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        fwd = target - eye
        n = np.linalg.norm(fwd)
        if n < 1e-9:
            raise InvalidParameterError("look_at eye and target coincide")
        fwd = fwd / n
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        rn = np.linalg.norm(right)
        if rn < 1e-9:
            raise InvalidParameterError("look_at up vector is parallel to view direction")
        right /= rn
        # camera y points down the image, so the second row is fwd x right
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=0)
        w2c = np.eye(4)
        w2c[:3, :3] = R
        w2c[:3, 3] = -R @ eye
        cam = cls(
            width=width,
            height=height,
            fx=fx,
            fy=fx if fy is None else fy,
            cx=(width - 1) / 2.0 if cx is None else cx,
            cy=(height - 1) / 2.0 if cy is None else cy,
            world_to_camera=w2c,
        )
        cam.validate()
        return cam


def save_cameras(path: str | Path, cameras: list[Camera]) -> None:
    entries = []
    for cam in cameras:
        entries.append(
            {
                "width": cam.width,
                "height": cam.height,
                "fx": cam.fx,
                "fy": cam.fy,
                "cx": cam.cx,
                "cy": cam.cy,
                "world_to_camera": [float(v) for v in np.asarray(cam.world_to_camera).reshape(16)],
            }
        )
    Path(path).write_text(json.dumps(entries, indent=1), encoding="utf-8")


def load_cameras(path: str | Path) -> list[Camera]:
    try:
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(entries, list):
        raise FormatError(f"{path}: expected a JSON array of cameras")
    cameras = []
    for i, e in enumerate(entries):
        try:
            mat = np.asarray(e["world_to_camera"], dtype=np.float64)
            if mat.shape != (16,):
                raise FormatError(f"{path}: camera {i}: world_to_camera needs 16 floats")
            cam = Camera(
                width=int(e["width"]),
                height=int(e["height"]),
                fx=float(e["fx"]),
                fy=float(e["fy"]),
                cx=float(e["cx"]),
                cy=float(e["cy"]),
                world_to_camera=mat.reshape(4, 4),
            )
        except KeyError as exc:
            raise FormatError(f"{path}: camera {i}: missing key {exc}") from None
        cam.validate()
        cameras.append(cam)
    return cameras


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass
class Primitive:
    """One synthetic object: a plane, box, or sphere with a label id.

    size meaning: sphere radius = size[0]; plane full extents (sx, sy) in its
    local xy; box half-extents (hx, hy, hz). Pose is center + quaternion.
    category defaults to the label (used for the coarse mask hierarchy).
    """

    kind: str
    label: int
    color: tuple[float, float, float]
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    size: tuple[float, ...] = (1.0,)
    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    category: int | None = None
    n_gaussians: int = 300
    n_points: int = 400

    def __post_init__(self):
        if self.kind not in ("plane", "box", "sphere"):
            raise InvalidParameterError(f"unknown primitive kind {self.kind!r}")
        if self.label <= 0:
            raise InvalidParameterError("primitive labels must be positive (0 is background)")
        if self.category is None:
            self.category = self.label


def _tangent_frame(normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # pick the axis least aligned with each normal, build orthonormal tangents
    ref = np.zeros_like(normals)
    ref[np.arange(len(normals)), np.argmin(np.abs(normals), axis=1)] = 1.0
    t1 = np.cross(normals, ref)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(normals, t1)
    return t1, t2


def _quats_from_normals(normals: np.ndarray) -> np.ndarray:
    t1, t2 = _tangent_frame(normals)
    # columns (t1, t2, n): det = +1 because t1 x t2 = n
    quats = np.empty((len(normals), 4))
    for i in range(len(normals)):
        R = np.stack([t1[i], t2[i], normals[i]], axis=1)
        quats[i] = rotmat_to_quat(R)
    return quats


def _sample_surface(prim: Primitive, n: int, rng: np.random.Generator):
    """n surface points + outward normals in the primitive's local frame."""
    if prim.kind == "sphere":
        r = prim.size[0]
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return dirs * r, dirs
    if prim.kind == "plane":
        sx, sy = prim.size[0], prim.size[1]
        pts = np.zeros((n, 3))
        pts[:, 0] = rng.uniform(-sx / 2, sx / 2, n)
        pts[:, 1] = rng.uniform(-sy / 2, sy / 2, n)
        normals = np.tile([0.0, 0.0, 1.0], (n, 1))
        return pts, normals
    # box: pick faces by area
    hx, hy, hz = prim.size[0], prim.size[1], prim.size[2]
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy], dtype=np.float64)
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, n)
    v = rng.uniform(-1, 1, n)
    pts = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    half = np.array([hx, hy, hz])
    for f in range(6):
        sel = faces == f
        axis, sign = divmod(f, 2)
        sign = 1.0 if sign == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[sel, axis] = sign * half[axis]
        pts[sel, others[0]] = u[sel] * half[others[0]]
        pts[sel, others[1]] = v[sel] * half[others[1]]
        normals[sel, axis] = sign
    return pts, normals


def make_synthetic_scene(
    primitives: list[Primitive],
    seed: int = 0,
    tangent_scale: float = 0.06,
    flatten_ratio: float = 0.1,
    opacity: float = 0.9,
):
    """Build a ground-truth scene of surface-aligned flat Gaussians.

    Returns (scene, labels, points, point_labels): per-Gaussian int32 labels,
    plus a labeled point cloud sampled on the same surfaces for geometry
    metrics. All scene arrays land on the float32 grid.
    """
    if not primitives:
        raise InvalidParameterError("need at least one primitive")
    rng = np.random.default_rng(seed)
    parts = []
    labels = []
    pts_all = []
    pts_labels = []
    for prim in primitives:
        local, local_n = _sample_surface(prim, prim.n_gaussians, rng)
        Rp = quat_to_rotmat(np.asarray(prim.rotation, dtype=np.float64))
        world = local @ Rp.T + np.asarray(prim.center)
        normals = local_n @ Rp.T
        quats = _quats_from_normals(normals)
        n = prim.n_gaussians
        ls = np.empty((n, 3))
        ls[:, 0] = math.log(tangent_scale)
        ls[:, 1] = math.log(tangent_scale)
        ls[:, 2] = math.log(tangent_scale * flatten_ratio)
        part = GaussianScene(
            position=world,
            rotation=quats,
            log_scale=ls,
            opacity_logit=np.full(n, math.log(opacity / (1 - opacity))),
            color=np.tile(np.asarray(prim.color, dtype=np.float64), (n, 1)),
            f_lang=np.zeros((n, 3)),
            f_ins=np.zeros((n, 3)),
        )
        parts.append(part)
        labels.append(np.full(n, prim.label, dtype=np.int32))
        plocal, _ = _sample_surface(prim, prim.n_points, rng)
        pts_all.append(plocal @ Rp.T + np.asarray(prim.center))
        pts_labels.append(np.full(prim.n_points, prim.label, dtype=np.int32))
    scene = parts[0]
    for part in parts[1:]:
        scene = GaussianScene.concatenate(scene, part)
    # snap onto the float32 grid; rounded unit quats stay unit within 1e-6
    for name in PARAM_NAMES:
        setattr(scene, name, as_f32_grid(getattr(scene, name)))
    scene.validate()
    return (
        scene,
        np.concatenate(labels),
        np.concatenate(pts_all),
        np.concatenate(pts_labels),
    )
