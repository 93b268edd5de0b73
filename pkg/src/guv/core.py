"""Domain types and the Gaussian-primitive algebra.

A scene is an H x W UV grid of anisotropic 3D Gaussians. Each texel carries a
pose (center, intrinsic-XYZ Euler rotation, three axis radii acting as
standard deviations) plus a local tri-plane feature payload sampled inside the
Gaussian's +-3-sigma cube. Everything here is pure float64 numpy; all types
are immutable value objects (arrays are defensively copied and frozen).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError


def _frozen(a: np.ndarray, shape: tuple, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.shape != shape:
        raise InvalidArgumentError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name}: contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GaussianPose:
    """One Gaussian: center mu, Euler angles (radians), axis radii (std-devs)."""

    center: np.ndarray
    rotation: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center, (3,), "center"))
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3,), "rotation"))
        object.__setattr__(self, "radii", _frozen(self.radii, (3,), "radii"))
        if np.any(self.radii <= 0):
            raise InvalidArgumentError(f"radii must be positive, got {self.radii}")


@dataclass(frozen=True)
class TriPlanePayload:
    """Three square S x S x C feature planes queried bilinearly in the local cube."""

    planes: np.ndarray

    def __post_init__(self):
        arr = np.array(self.planes, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[0] != 3 or arr.shape[1] != arr.shape[2]:
            raise InvalidArgumentError(
                f"planes: expected shape (3, S, S, C), got {arr.shape}"
            )
        object.__setattr__(self, "planes", _frozen(arr, arr.shape, "planes"))

    @property
    def size(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[3]


@dataclass(frozen=True)
class UVAvatar:
    """The trainable identity: H x W grids of poses, payloads, and rest anchors.

    anchors hold the initial mesh vertex positions the Gaussians were attached
    to; anchor_normals/anchor_scales the per-vertex normals and size scales.
    They define the rest state referenced by the mesh loss and by expression
    offsets.
    """

    centers: np.ndarray        # (H, W, 3)
    rotations: np.ndarray      # (H, W, 3)
    radii: np.ndarray          # (H, W, 3)
    payloads: np.ndarray       # (H, W, 3, S, S, C)
    anchors: np.ndarray        # (H, W, 3)
    anchor_normals: np.ndarray  # (H, W, 3) unit vectors
    anchor_scales: np.ndarray  # (H, W) positive

    def __post_init__(self):
        if np.asarray(self.centers).ndim != 3:
            raise InvalidArgumentError("centers must be (H, W, 3)")
        h, w = np.asarray(self.centers).shape[:2]
        p = np.asarray(self.payloads)
        if p.ndim != 6 or p.shape[:3] != (h, w, 3) or p.shape[3] != p.shape[4]:
            raise InvalidArgumentError(
                f"payloads: expected (H, W, 3, S, S, C), got {p.shape}"
            )
        s, c = p.shape[3], p.shape[5]
        for name, shape in (
            ("centers", (h, w, 3)),
            ("rotations", (h, w, 3)),
            ("radii", (h, w, 3)),
            ("payloads", (h, w, 3, s, s, c)),
            ("anchors", (h, w, 3)),
            ("anchor_normals", (h, w, 3)),
            ("anchor_scales", (h, w)),
        ):
            object.__setattr__(self, name, _frozen(getattr(self, name), shape, name))
        if np.any(self.radii <= 0):
            raise InvalidArgumentError("radii must be positive everywhere")
        if np.any(self.anchor_scales <= 0):
            raise InvalidArgumentError("anchor_scales must be positive")
        norms = np.linalg.norm(self.anchor_normals, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            bad = tuple(int(v) for v in np.argwhere(np.abs(norms - 1.0) > 1e-6)[0])
            raise InvalidArgumentError(
                f"anchor_normals must be unit length; texel {bad} has norm "
                f"{norms[bad]:.9f}"
            )

    @property
    def height(self) -> int:
        return self.centers.shape[0]

    @property
    def width(self) -> int:
        return self.centers.shape[1]

    @property
    def plane_size(self) -> int:
        return self.payloads.shape[3]

    @property
    def channels(self) -> int:
        return self.payloads.shape[5]

    @property
    def count(self) -> int:
        return self.height * self.width

    def pose_at(self, h: int, w: int) -> GaussianPose:
        return GaussianPose(self.centers[h, w], self.rotations[h, w], self.radii[h, w])

    def payload_at(self, h: int, w: int) -> TriPlanePayload:
        return TriPlanePayload(self.payloads[h, w])

    def replace(self, **arrays) -> "UVAvatar":
        return dataclasses.replace(self, **arrays)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels, cam_to_world rigid transform.

    Camera frame: x right, y down, z forward (rays leave through +z).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float
    cam_to_world: np.ndarray  # (4, 4)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError("fx and fy must be positive")
        if not (0 < self.near < self.far):
            raise InvalidArgumentError("require 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError("image size must be at least 1x1")
        m = _frozen(self.cam_to_world, (4, 4), "cam_to_world")
        r = m[:3, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9:
            raise InvalidArgumentError("cam_to_world rotation block not orthonormal")
        if np.max(np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 1e-12:
            raise InvalidArgumentError("cam_to_world last row must be (0, 0, 0, 1)")
        object.__setattr__(self, "cam_to_world", m)

    @property
    def origin(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    def _world_dir(self, x, y):
        """Shared per-pixel direction arithmetic (x, y scalar or arrays).

        Written as explicit products and sums so single-ray and full-frame
        paths produce bit-identical directions.
        """
        inv = 1.0 / np.sqrt(x * x + y * y + 1.0)
        dx, dy, dz = x * inv, y * inv, inv
        r = self.cam_to_world
        return np.stack(
            [
                r[0, 0] * dx + r[0, 1] * dy + r[0, 2] * dz,
                r[1, 0] * dx + r[1, 1] * dy + r[1, 2] * dz,
                r[2, 0] * dx + r[2, 1] * dy + r[2, 2] * dz,
            ],
            axis=-1,
        )

    def ray_directions(self) -> np.ndarray:
        """Unit world-space directions for all pixel centers, shape (H, W, 3)."""
        i = np.arange(self.height, dtype=np.float64)
        j = np.arange(self.width, dtype=np.float64)
        x = np.broadcast_to(((j + 0.5 - self.cx) / self.fx)[None, :],
                            (self.height, self.width))
        y = np.broadcast_to(((i + 0.5 - self.cy) / self.fy)[:, None],
                            (self.height, self.width))
        return self._world_dir(x, y)

    def ray(self, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
        """(origin, unit direction) of the ray through pixel center (row i, col j)."""
        x = (j + 0.5 - self.cx) / self.fx
        y = (i + 0.5 - self.cy) / self.fy
        return self.origin.copy(), self._world_dir(np.float64(x), np.float64(y))


@dataclass(frozen=True)
class RenderConfig:
    """Ray-march / blending knobs.

    tau is a fixed temperature (no schedule); epsilon is the smooth-decay term
    in the blend-weight normalizer.
    """

    samples_per_ray: int = 32
    knn_k: int = 3
    eta: float = 5.0
    tau: float = 1.0
    epsilon: float = 1e-6
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.samples_per_ray < 1:
            raise InvalidArgumentError("samples_per_ray must be >= 1")
        if self.knn_k < 1:
            raise InvalidArgumentError("knn_k must be >= 1")
        if not (self.eta > 0 and self.tau > 0 and self.epsilon > 0):
            raise InvalidArgumentError("eta, tau, epsilon must be positive")
        bg = tuple(float(v) for v in self.background)
        if len(bg) != 3 or any(not (0.0 <= v <= 1.0) for v in bg):
            raise InvalidArgumentError("background must be an RGB triple in [0, 1]")
        object.__setattr__(self, "background", bg)


def _rotation_entries(ca, sa, cb, sb, cc, sc) -> list:
    """The 9 entries of Rx(a) @ Ry(b) @ Rz(c), row-major.

    Written as plain arithmetic on the cos/sin inputs so the same formula runs
    on ndarrays and on autodiff variables.
    """
    return [
        cb * cc, -(cb * sc), sb,
        ca * sc + sa * sb * cc, ca * cc - sa * sb * sc, -(sa * cb),
        sa * sc - ca * sb * cc, sa * cc + ca * sb * sc, ca * cb,
    ]


def rotation_matrices(angles: np.ndarray) -> np.ndarray:
    """Batched rotation matrices for (..., 3) Euler angles, intrinsic XYZ."""
    angles = np.asarray(angles, dtype=np.float64)
    if not np.all(np.isfinite(angles)):
        raise InvalidArgumentError("rotation angles must be finite")
    a, b, c = angles[..., 0], angles[..., 1], angles[..., 2]
    e = _rotation_entries(np.cos(a), np.sin(a), np.cos(b), np.sin(b),
                          np.cos(c), np.sin(c))
    return np.stack(e, axis=-1).reshape(angles.shape[:-1] + (3, 3))


def rotation_matrix(angles) -> np.ndarray:
    """3x3 orthonormal matrix for Euler angles (a, b, c), intrinsic XYZ order."""
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape != (3,):
        raise InvalidArgumentError(f"angles must be a 3-vector, got {angles.shape}")
    return rotation_matrices(angles)


def euler_from_matrix(r: np.ndarray) -> np.ndarray:
    """Invert rotation_matrix: angles (a, b, c) with b in [-pi/2, pi/2].

    At gimbal lock (|R[0,2]| = 1) only a+-c is determined; c is set to 0.
    """
    r = np.asarray(r, dtype=np.float64)
    sb = np.clip(r[..., 0, 2], -1.0, 1.0)
    b = np.arcsin(sb)
    locked = np.abs(sb) > 1.0 - 1e-12
    a = np.where(
        locked,
        np.arctan2(r[..., 2, 1], r[..., 1, 1]),
        np.arctan2(-r[..., 1, 2], r[..., 2, 2]),
    )
    c = np.where(locked, 0.0, np.arctan2(-r[..., 0, 1], r[..., 0, 0]))
    return np.stack([a, b, c], axis=-1)


def align_z_to_normals(normals: np.ndarray) -> np.ndarray:
    """Shortest-arc rotations taking +z to each unit normal, shape (..., 3, 3).

    Roll about the normal is unobservable and left at zero; anti-parallel
    normals rotate 180 degrees about x.
    """
    n = np.asarray(normals, dtype=np.float64)
    cos = n[..., 2]
    # axis = e_z x n = (-n_y, n_x, 0), |axis| = sin(angle)
    kx, ky = -n[..., 1], n[..., 0]
    s2 = kx * kx + ky * ky
    # Rodrigues with unnormalized axis: R = I + K + K^2 (1-cos)/s^2
    f = np.where(s2 > 1e-24, (1.0 - cos) / np.where(s2 > 1e-24, s2, 1.0), 0.0)
    out = np.zeros(n.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1.0 + f * (-ky * ky)
    out[..., 0, 1] = f * kx * ky
    out[..., 0, 2] = ky
    out[..., 1, 0] = f * kx * ky
    out[..., 1, 1] = 1.0 + f * (-kx * kx)
    out[..., 1, 2] = -kx
    out[..., 2, 0] = -ky
    out[..., 2, 1] = kx
    out[..., 2, 2] = 1.0 + f * (-kx * kx - ky * ky)
    # s ~ 0: aligned (identity, already correct) or anti-parallel (flip about x)
    anti = (s2 <= 1e-24) & (cos < 0)
    out[anti] = np.diag([1.0, -1.0, -1.0])
    return out


def precision_matrix(pose: GaussianPose) -> np.ndarray:
    """Sigma^-1 = R diag(radii^-2) R^T, the SPD matrix in the influence exponent."""
    r = rotation_matrix(pose.rotation)
    return (r * pose.radii[None, :] ** -2) @ r.T


def rbf_influence(pose: GaussianPose, x, eta: float = 5.0, tau: float = 1.0) -> float:
    """Scaled anisotropic Gaussian influence of a primitive at world point x.

    g = eta * exp(-(1/(2 tau)) (x-mu)^T Sigma^-1 (x-mu)); eta bounds g at the
    center, tau controls falloff hardness.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x - pose.center
    m = d @ precision_matrix(pose) @ d
    return float(eta * math.exp(-m / (2.0 * tau)))


def world_to_local(pose: GaussianPose, x) -> np.ndarray:
    """Map a world point into the Gaussian's [-1, 1]^3 cube (+-3 radii extent)."""
    x = np.asarray(x, dtype=np.float64)
    r = rotation_matrix(pose.rotation)
    u = (r.T @ (x - pose.center)) / (3.0 * pose.radii)
    return np.clip(u, -1.0, 1.0)


def init_from_anchors(
    anchors: np.ndarray,
    normals: np.ndarray,
    scales: np.ndarray,
    plane_size: int = 8,
    channels: int = 8,
) -> UVAvatar:
    """Attach one Gaussian per texel to the given rest mesh.

    Centers start at the anchors, rotations align local +z to the normals,
    radii are (s, s, s/2), flatter along the normal, and payloads start at
    zero (renders mid-gray through the sigmoid head, symmetric gradients).
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    if anchors.ndim != 3 or anchors.shape[2] != 3:
        raise InvalidArgumentError("anchors must be (H, W, 3)")
    h, w = anchors.shape[:2]
    if normals.shape != (h, w, 3) or scales.shape != (h, w):
        raise InvalidArgumentError("anchors, normals, scales must share H x W")
    norms = np.linalg.norm(normals, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise InvalidArgumentError("normals must be unit length within 1e-6")
    rotations = euler_from_matrix(align_z_to_normals(normals))
    radii = np.stack([scales, scales, scales / 2.0], axis=-1)
    payloads = np.zeros((h, w, 3, plane_size, plane_size, channels))
    return UVAvatar(
        centers=anchors,
        rotations=rotations,
        radii=radii,
        payloads=payloads,
        anchors=anchors,
        anchor_normals=normals,
        anchor_scales=scales,
    )
