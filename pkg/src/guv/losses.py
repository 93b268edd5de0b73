"""Supervision and regularization terms for multi-view fitting.

Every term runs on tape variables or plain ndarrays (all math goes through
the grad facade). Weighting convention: l1_loss and depth_loss return raw
values (total_loss applies the depth weight); each regularizer returns its
weighted value, mirroring how the terms are quoted individually.

Perceptual and identity terms are out of scope (they need pretrained
networks); l1_loss accepts an optional per-pixel weight image as the plug-in
point for a precomputed perceptual map.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

from . import grad as g
from .core import RenderConfig
from .errors import InvalidArgumentError
from .render import point_influences

import numpy as np


@dataclass(frozen=True)
class LossWeights:
    """Default weights of the full objective; identity defaults to 0 because
    the pretrained recognition network it needs is out of scope."""

    depth: float = 0.1
    identity: float = 0.0
    coverage: float = 0.001
    silhouette: float = 1.0
    volume: float = 1.0
    tv: float = 0.1
    mesh: float = 0.01
    code: float = 1e-4

    def __post_init__(self):
        for name in ("depth", "identity", "coverage", "silhouette", "volume",
                     "tv", "mesh", "code"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"loss weight {name} must be >= 0")


def _check_shapes(a, b, what: str):
    va, vb = g.value(a), g.value(b)
    if va.shape != vb.shape:
        raise InvalidArgumentError(f"{what}: shape mismatch {va.shape} vs {vb.shape}")


def l1_loss(image, target, pixel_weight=None):
    """Mean absolute pixel difference; optionally weighted per pixel
    (weights renormalized by their sum)."""
    _check_shapes(image, target, "l1_loss")
    diff = g.absolute(g.sub(image, target))
    if pixel_weight is None:
        return g.mean(diff)
    w = np.asarray(pixel_weight, dtype=np.float64)
    if w.shape != g.value(image).shape[:2]:
        raise InvalidArgumentError("pixel_weight must be (H, W)")
    if np.any(w < 0) or not np.sum(w) > 0:
        raise InvalidArgumentError("pixel_weight must be nonnegative, not all zero")
    per_pixel = g.mean(diff, axis=-1)
    return g.div(g.sum(g.mul(per_pixel, w)), float(np.sum(w)))


def depth_loss(depth, target_depth, alpha_mask):
    """Mean squared depth error over pixels whose target opacity exceeds 0.5
    (depth is undefined in empty space). Empty mask: 0 with a warning."""
    _check_shapes(depth, target_depth, "depth_loss")
    mask = g.value(alpha_mask) > 0.5
    count = int(np.sum(mask))
    if count == 0:
        warnings.warn("depth_loss: no pixels with target alpha > 0.5; term is 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    diff = g.sub(depth, target_depth)
    return g.div(g.sum(g.mul(g.mul(diff, diff), mask.astype(np.float64))),
                 float(count))


def silhouette_loss(alpha, target_mask, weight: float = 1.0):
    """weight * mean squared error between rendered and target opacity maps."""
    _check_shapes(alpha, target_mask, "silhouette_loss")
    diff = g.sub(alpha, target_mask)
    return g.mul(g.mean(g.mul(diff, diff)), weight)


def coverage_loss(arrays_or_avatar, sample_points, cfg: RenderConfig,
                  weight: float = 0.001):
    """weight * mean over points of the average K-nearest influence.

    Penalizing raw influence at sample locations keeps Gaussians compact.
    Accepts a UVAvatar or a kernel-layout arrays dict (tape variables during
    fitting, where the same quantity is usually reused from the ray march).
    """
    from .render import avatar_arrays
    from .core import UVAvatar
    arrays = (avatar_arrays(arrays_or_avatar)
              if isinstance(arrays_or_avatar, UVAvatar) else arrays_or_avatar)
    influ = point_influences(arrays, sample_points, cfg)
    return g.mul(g.mean(g.sum(influ, axis=-1)), weight / cfg.knn_k)


def volume_loss(radii, weight: float = 1.0):
    """weight * mean ellipsoid volume (4 pi / 3) r1 r2 r3 over texels."""
    r = radii
    vol = g.mul(g.mul(g.mul(r[..., 0], r[..., 1]), r[..., 2]), 4.0 * math.pi / 3.0)
    return g.mul(g.mean(vol), weight)


def tv_loss(centers, rotations, radii, weight: float = 0.1):
    """weight * (1/N) * sum of absolute forward differences of the 9 pose
    channels over the UV grid (no wraparound at edges)."""
    pose = g.concatenate([centers, rotations, radii], axis=-1)
    n = float(g.value(centers).shape[0] * g.value(centers).shape[1])
    dv = g.sum(g.absolute(g.sub(pose[1:, :, :], pose[:-1, :, :])))
    dh = g.sum(g.absolute(g.sub(pose[:, 1:, :], pose[:, :-1, :])))
    return g.mul(g.add(dv, dh), weight / n)


def mesh_loss(centers, anchors, weight: float = 0.01):
    """weight * (1/N) * sum of squared center-to-anchor distances."""
    d = g.sub(centers, anchors)
    n = float(g.value(centers).shape[0] * g.value(centers).shape[1])
    return g.mul(g.sum(g.mul(d, d)), weight / n)


def code_loss(z, weight: float = 1e-4, sigma: float = 1.0):
    """weight * ||z||^2 / sigma^2, a spherical Gaussian prior on the latent."""
    return g.mul(g.sum(g.mul(z, z)), weight / (sigma * sigma))


def total_loss(
    outputs: dict,
    targets: dict,
    scene: dict,
    z=None,
    weights: LossWeights = LossWeights(),
    mean_influence=None,
    coverage_points=None,
    coverage_cfg: RenderConfig | None = None,
    pixel_weight=None,
):
    """Full objective: reconstruction + regularizers + latent prior.

    outputs: color/depth/alpha (rendered); targets: color, optional depth and
    mask; scene: centers/rotations/radii/anchors as (H, W, ...) grids.
    Coverage comes from mean_influence (reused ray-sample influences) or from
    coverage_points + coverage_cfg; omitted if neither is given.
    Returns (total, breakdown); total is the sum of breakdown entries in
    fixed key order.
    """
    breakdown = {}
    breakdown["l1"] = l1_loss(outputs["color"], targets["color"], pixel_weight)
    if targets.get("depth") is not None:
        if targets.get("mask") is None:
            raise InvalidArgumentError("depth supervision requires a target mask")
        breakdown["depth"] = g.mul(
            depth_loss(outputs["depth"], targets["depth"], targets["mask"]),
            weights.depth,
        )
    if targets.get("mask") is not None:
        breakdown["silhouette"] = silhouette_loss(
            outputs["alpha"], targets["mask"], weights.silhouette
        )
    if mean_influence is not None:
        breakdown["coverage"] = g.mul(mean_influence, weights.coverage)
    elif coverage_points is not None:
        if coverage_cfg is None:
            raise InvalidArgumentError("coverage_points requires coverage_cfg")
        breakdown["coverage"] = coverage_loss(scene_arrays(scene),
                                              coverage_points, coverage_cfg,
                                              weights.coverage)
    breakdown["volume"] = volume_loss(scene["radii"], weights.volume)
    breakdown["tv"] = tv_loss(scene["centers"], scene["rotations"],
                              scene["radii"], weights.tv)
    breakdown["mesh"] = mesh_loss(scene["centers"], scene["anchors"], weights.mesh)
    if z is not None:
        breakdown["code"] = code_loss(z, weights.code)
    total = None
    for key in ("l1", "depth", "silhouette", "coverage", "volume", "tv",
                "mesh", "code"):
        if key in breakdown:
            total = breakdown[key] if total is None else g.add(total, breakdown[key])
    return total, breakdown


def scene_arrays(scene: dict) -> dict:
    """Kernel-layout views of a scene dict's grids (for coverage_loss)."""
    c = scene["centers"]
    h, w = g.value(c).shape[:2]
    out = {
        "centers": g.reshape(c, (h * w, 3)),
        "rotations": g.reshape(scene["rotations"], (h * w, 3)),
        "radii": g.reshape(scene["radii"], (h * w, 3)),
    }
    if "payload_flat" in scene:
        out["payload_flat"] = scene["payload_flat"]
    return out
