"""Gaussian primitives, cameras, and spherical-harmonic color evaluation.

All arrays are float64; parameters live in unconstrained space (log scales,
opacity logits, raw quaternions normalized at use) so plain gradient steps
never violate the type invariants.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateInputError

# Real SH basis constants, graphics convention, degrees 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(y):
    return np.log(y / (1.0 - y))


class Role(Enum):
    FRG = "frg"
    BKG = "bkg"


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion, normalized internally.

    Accepts a single (4,) quaternion or a batch (N, 4); returns (3, 3) or
    (N, 3, 3). Raises DegenerateInputError on a zero-norm quaternion.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    norm = np.linalg.norm(q, axis=-1)
    if np.any(norm < 1e-12):
        raise DegenerateInputError("zero-norm quaternion cannot be normalized")
    q = q / norm[:, None]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def quaternion_rotation_backward(q_raw: np.ndarray, dL_dR: np.ndarray) -> np.ndarray:
    """Gradient of quaternion_to_rotation w.r.t. the raw (unnormalized) quaternion.

    q_raw: (N, 4), dL_dR: (N, 3, 3). Returns (N, 4).
    """
    q_raw = np.atleast_2d(np.asarray(q_raw, dtype=np.float64))
    norm = np.linalg.norm(q_raw, axis=-1)
    qh = q_raw / norm[:, None]
    w, x, y, z = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    zeros = np.zeros_like(w)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dR_dw = 2 * mat([[zeros, -z, y], [z, zeros, -x], [-y, x, zeros]])
    dR_dx = 2 * mat([[zeros, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dR_dy = 2 * mat([[-2 * y, x, w], [x, zeros, z], [-w, z, -2 * y]])
    dR_dz = 2 * mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zeros]])

    g_hat = np.stack(
        [np.sum(dL_dR * d, axis=(-2, -1)) for d in (dR_dw, dR_dx, dR_dy, dR_dz)],
        axis=-1,
    )
    # Chain through q_hat = q / |q|.
    dot = np.sum(g_hat * qh, axis=-1, keepdims=True)
    return (g_hat - qh * dot) / norm[:, None]


def build_covariance(g: "Gaussian") -> np.ndarray:
    """3D covariance R S S^T R^T with S = diag(exp(log_scale))."""
    R = quaternion_to_rotation(g.rotation)
    d = np.exp(2.0 * np.asarray(g.log_scale, dtype=np.float64))
    return R @ np.diag(d) @ R.T


def covariance_from_arrays(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Batched covariance: (N,4) quats + (N,3) log scales -> (N,3,3)."""
    R = quaternion_to_rotation(rotations)
    d = np.exp(2.0 * log_scales)
    RD = R * d[:, None, :]
    return np.einsum("nij,nkj->nik", RD, R)


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the real SH basis at unit directions. dirs (N,3) -> (N,K)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = dirs.shape[0]
    k = sh_coeff_count(degree)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    b = np.empty((n, k), dtype=np.float64)
    b[:, 0] = SH_C0
    if degree >= 1:
        b[:, 1] = -SH_C1 * y
        b[:, 2] = SH_C1 * z
        b[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        b[:, 4] = SH_C2[0] * x * y
        b[:, 5] = SH_C2[1] * y * z
        b[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        b[:, 7] = SH_C2[3] * x * z
        b[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        b[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        b[:, 10] = SH_C3[1] * x * y * z
        b[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        b[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        b[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        b[:, 14] = SH_C3[5] * z * (xx - yy)
        b[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return b


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis_k)/d(dir) at unit directions. dirs (N,3) -> (N,K,3)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = dirs.shape[0]
    k = sh_coeff_count(degree)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    g = np.zeros((n, k, 3), dtype=np.float64)
    if degree >= 1:
        g[:, 1, 1] = -SH_C1
        g[:, 2, 2] = SH_C1
        g[:, 3, 0] = -SH_C1
    if degree >= 2:
        g[:, 4, 0] = SH_C2[0] * y
        g[:, 4, 1] = SH_C2[0] * x
        g[:, 5, 1] = SH_C2[1] * z
        g[:, 5, 2] = SH_C2[1] * y
        g[:, 6, 0] = SH_C2[2] * (-2 * x)
        g[:, 6, 1] = SH_C2[2] * (-2 * y)
        g[:, 6, 2] = SH_C2[2] * (4 * z)
        g[:, 7, 0] = SH_C2[3] * z
        g[:, 7, 2] = SH_C2[3] * x
        g[:, 8, 0] = SH_C2[4] * (2 * x)
        g[:, 8, 1] = SH_C2[4] * (-2 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9, 0] = SH_C3[0] * 6 * x * y
        g[:, 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
        g[:, 10, 0] = SH_C3[1] * y * z
        g[:, 10, 1] = SH_C3[1] * x * z
        g[:, 10, 2] = SH_C3[1] * x * y
        g[:, 11, 0] = SH_C3[2] * (-2 * x * y)
        g[:, 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
        g[:, 11, 2] = SH_C3[2] * (8 * y * z)
        g[:, 12, 0] = SH_C3[3] * (-6 * x * z)
        g[:, 12, 1] = SH_C3[3] * (-6 * y * z)
        g[:, 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        g[:, 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
        g[:, 13, 1] = SH_C3[4] * (-2 * x * y)
        g[:, 13, 2] = SH_C3[4] * (8 * x * z)
        g[:, 14, 0] = SH_C3[5] * (2 * x * z)
        g[:, 14, 1] = SH_C3[5] * (-2 * y * z)
        g[:, 14, 2] = SH_C3[5] * (xx - yy)
        g[:, 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
        g[:, 15, 1] = SH_C3[6] * (-6 * x * y)
    return g


def eval_sh(sh: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """RGB in [0, 1] from SH coefficients and a unit view direction.

    sh has shape (K, 3) with K = (deg+1)^2; the result is
    clamp(sum_k basis_k * sh_k + 0.5, 0, 1) per channel.
    """
    sh = np.asarray(sh, dtype=np.float64)
    k = sh.shape[0]
    degree = int(round(np.sqrt(k))) - 1
    if sh_coeff_count(degree) != k:
        raise ValueError(f"sh length {k} is not a valid (deg+1)^2 count")
    basis = sh_basis(np.asarray(view_dir, dtype=np.float64), degree)[0]
    return np.clip(basis @ sh + 0.5, 0.0, 1.0)


@dataclass
class Gaussian:
    """A single anisotropic 3D Gaussian primitive."""

    center: np.ndarray       # (3,) world units
    rotation: np.ndarray     # (4,) quaternion (w, x, y, z)
    log_scale: np.ndarray    # (3,) log world units
    opacity_logit: float
    sh: np.ndarray           # (K, 3) coefficients per channel

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(-1, 3)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[0]))) - 1

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    def validate(self):
        norm = np.linalg.norm(self.rotation)
        if norm < 1e-12:
            raise DegenerateInputError("gaussian has zero-norm rotation quaternion")
        k = self.sh.shape[0]
        deg = int(round(np.sqrt(k))) - 1
        if deg not in (0, 1, 2, 3) or sh_coeff_count(deg) != k:
            raise ValueError(f"sh coefficient count {k} not (deg+1)^2 for deg in 0..3")
        if not (0.0 < self.opacity < 1.0):
            raise ValueError("opacity must lie strictly inside (0, 1)")


@dataclass
class GaussianSet:
    """A collection of Gaussians with one role, stored as parameter arrays."""

    centers: np.ndarray        # (N, 3)
    rotations: np.ndarray      # (N, 4) raw quaternions
    log_scales: np.ndarray     # (N, 3)
    opacity_logits: np.ndarray # (N,)
    sh: np.ndarray             # (N, K, 3)
    role: Role = Role.FRG
    clip_id: int = 0

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if len(self) == 0:
            raise DegenerateInputError("gaussian set may not be empty")

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            center=self.centers[i].copy(),
            rotation=self.rotations[i].copy(),
            log_scale=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh=self.sh[i].copy(),
        )

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            centers=self.centers.copy(),
            rotations=self.rotations.copy(),
            log_scales=self.log_scales.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh=self.sh.copy(),
            role=self.role,
            clip_id=self.clip_id,
        )

    @classmethod
    def from_gaussians(cls, gaussians, role=Role.FRG, clip_id=0) -> "GaussianSet":
        if not gaussians:
            raise DegenerateInputError("gaussian set may not be empty")
        k = gaussians[0].sh.shape[0]
        if any(g.sh.shape[0] != k for g in gaussians):
            raise ValueError("all gaussians in a set must share one SH degree")
        return cls(
            centers=np.stack([g.center for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            log_scales=np.stack([g.log_scale for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            sh=np.stack([g.sh for g in gaussians]),
            role=role,
            clip_id=clip_id,
        )

    @classmethod
    def from_points(
        cls,
        points: np.ndarray,
        colors: np.ndarray,
        role=Role.FRG,
        clip_id: int = 0,
        sh_degree: int = 1,
        initial_opacity: float = 0.1,
    ) -> "GaussianSet":
        """Initialize isotropic Gaussians on a point cloud.

        Colors are RGB in [0, 1] and seed the DC coefficient; scales start at
        the mean distance to the three nearest neighbors.
        """
        points = np.asarray(points, dtype=np.float64)
        colors = np.asarray(colors, dtype=np.float64)
        n = points.shape[0]
        if n < 1:
            raise DegenerateInputError("need at least one point")
        k = sh_coeff_count(sh_degree)
        sh = np.zeros((n, k, 3), dtype=np.float64)
        sh[:, 0, :] = (colors - 0.5) / SH_C0
        if n == 1:
            dist = np.full(n, 0.1)
        else:
            d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
            np.fill_diagonal(d2, np.inf)
            m = min(3, n - 1)
            nearest = np.sort(np.sqrt(d2), axis=1)[:, :m]
            dist = np.maximum(np.mean(nearest, axis=1), 1e-7)
        log_scales = np.tile(np.log(dist)[:, None], (1, 3))
        rotations = np.zeros((n, 4))
        rotations[:, 0] = 1.0
        return cls(
            centers=points.copy(),
            rotations=rotations,
            log_scales=log_scales,
            opacity_logits=np.full(n, inverse_sigmoid(initial_opacity)),
            sh=sh,
            role=role,
            clip_id=clip_id,
        )

    def validate(self):
        n = len(self)
        if self.rotations.shape != (n, 4) or self.log_scales.shape != (n, 3):
            raise ValueError("inconsistent parameter array shapes")
        deg = self.sh_degree
        if deg not in (0, 1, 2, 3) or self.sh.shape[1] != sh_coeff_count(deg):
            raise ValueError("sh array does not match a supported degree")


@dataclass
class Camera:
    """Pinhole camera with a rigid world-to-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray  # (3, 4): [R | t], camera looks down +z
    frame_index: int = 0

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(3, 4)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:, 3]

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def validate(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.rotation
        if np.max(np.abs(R @ R.T - np.eye(3))) >= 1e-6:
            raise ValueError("world_to_cam rotation block is not orthonormal")

    @classmethod
    def look_at(
        cls,
        eye,
        target,
        up=(0.0, 1.0, 0.0),
        fx=100.0,
        fy=100.0,
        cx=None,
        cy=None,
        width=64,
        height=64,
        frame_index=0,
    ) -> "Camera":
        """Camera at `eye` looking toward `target` (+z forward, y down image)."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        upv = np.asarray(up, dtype=np.float64)
        right = np.cross(upv, fwd)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        t = -R @ eye
        return cls(
            fx=fx,
            fy=fy,
            cx=width / 2.0 if cx is None else cx,
            cy=height / 2.0 if cy is None else cy,
            width=width,
            height=height,
            world_to_cam=np.hstack([R, t[:, None]]),
            frame_index=frame_index,
        )
