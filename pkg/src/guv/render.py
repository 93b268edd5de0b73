"""Differentiable forward rendering.

Per ray: J stratified samples; per sample: the K nearest Gaussians are found
by center distance, each contributes an RGBA from its tri-plane payload
through the shared tiny MLP, colors blend with normalized influence weights,
opacities with raw (window-function) influences, and samples composite
front-to-back over the configured background.

The kernel runs identically on plain ndarrays (display rendering) and on tape
variables (fitting): all math goes through the grad facade. Two bit-level
contracts shape the implementation:

- march_ray and render_image share one vectorized kernel whose contractions
  run through fixed-loop einsum (optimize=False, never BLAS) or explicit
  multiply + sum over fixed-length trailing axes (8, 32, K, J), so per-pixel
  results are independent of batch shape.
- World positions are only ever used as (center - origin) and t * direction,
  never origin + t * direction - center, so jointly translating scene and
  camera by a float-exact vector leaves every intermediate bit-identical.

KNN selection is treated as piecewise-constant: neighbor indices come from
parameter *values* and gradients do not flow through the choice.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import grad as g
from .core import (Camera, RenderConfig, TriPlanePayload, UVAvatar, _frozen,
                   _rotation_entries)
from .errors import InvalidArgumentError
from .spatial import UniformGridIndex, knn_query, nearest_k_batch

_ALPHA_CAP = 1.0 - 1e-4  # keeps transmittance positive and log1p finite


@dataclass(frozen=True)
class RenderMLP:
    """Shared 2-layer shading network, 8 -> 32 (ReLU) -> 4 (sigmoid)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w1", _frozen(self.w1, (8, 32), "w1"))
        object.__setattr__(self, "b1", _frozen(self.b1, (32,), "b1"))
        object.__setattr__(self, "w2", _frozen(self.w2, (32, 4), "w2"))
        object.__setattr__(self, "b2", _frozen(self.b2, (4,), "b2"))


def random_mlp(rng: np.random.Generator, alpha_bias: float = 0.0) -> RenderMLP:
    """He-initialized MLP; alpha_bias shifts the opacity logit.

    b1 is drawn (not zeroed): zero payloads put every hidden unit exactly at
    the ReLU kink, whose subgradient is 0, freezing the whole payload path.
    """
    w1 = rng.normal(0.0, math.sqrt(2.0 / 8.0), size=(8, 32))
    b1 = rng.normal(0.0, 0.1, size=32)
    w2 = rng.normal(0.0, math.sqrt(2.0 / 32.0), size=(32, 4))
    b2 = np.zeros(4)
    b2[3] = alpha_bias
    return RenderMLP(w1=w1, b1=b1, w2=w2, b2=b2)


@dataclass(frozen=True)
class RenderOutput:
    """Per-pixel color in [0,1], expected ray depth, accumulated opacity."""

    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.color, dtype=np.float64)
        if c.ndim != 3 or c.shape[2] != 3:
            raise InvalidArgumentError("color must be (H, W, 3)")
        h, w = c.shape[:2]
        object.__setattr__(self, "color", _frozen(c, (h, w, 3), "color"))
        object.__setattr__(self, "depth", _frozen(self.depth, (h, w), "depth"))
        object.__setattr__(self, "alpha", _frozen(self.alpha, (h, w), "alpha"))
        if np.any(self.alpha < 0) or np.any(self.alpha > 1):
            raise InvalidArgumentError("alpha must lie in [0, 1]")


def sample_triplane(payload: TriPlanePayload, u) -> np.ndarray:
    """Sum of the three bilinear plane samples at local point u in [-1,1]^3.

    Planes are sampled align-corners style: u=-1 maps to node 0, u=+1 to node
    S-1, so node positions reproduce stored features exactly. Plane/coordinate
    pairing: plane 0 reads (u_x, u_y), plane 1 (u_x, u_z), plane 2 (u_y, u_z).
    """
    u = np.asarray(u, dtype=np.float64)
    planes = payload.planes
    s = payload.size
    out = np.zeros(payload.channels)
    for p, (a, b) in enumerate(((0, 1), (0, 2), (1, 2))):
        if s == 1:
            out = out + planes[p, 0, 0]
            continue
        pa = (u[a] + 1.0) / 2.0 * (s - 1)
        pb = (u[b] + 1.0) / 2.0 * (s - 1)
        ia = min(int(np.floor(pa)), s - 2)
        ib = min(int(np.floor(pb)), s - 2)
        fa, fb = pa - ia, pb - ib
        out = out + (
            (1 - fa) * (1 - fb) * planes[p, ia, ib]
            + (1 - fa) * fb * planes[p, ia, ib + 1]
            + fa * (1 - fb) * planes[p, ia + 1, ib]
            + fa * fb * planes[p, ia + 1, ib + 1]
        )
    return out


def mlp_forward(mlp_or_arrays, feature):
    """(color in (0,1)^3, opacity in (0,1)) for (..., 8) features.

    Accepts a RenderMLP or a dict with w1/b1/w2/b2 entries (tape variables
    during fitting). Matrix products go through the fixed-loop batched
    matmul so results are independent of batch shape.
    """
    if isinstance(mlp_or_arrays, RenderMLP):
        w1, b1, w2, b2 = (mlp_or_arrays.w1, mlp_or_arrays.b1,
                          mlp_or_arrays.w2, mlp_or_arrays.b2)
    else:
        w1, b1, w2, b2 = (mlp_or_arrays[k] for k in ("w1", "b1", "w2", "b2"))
    f = feature if isinstance(feature, g.Var) else np.asarray(feature, dtype=np.float64)
    h = g.relu(g.matmul_last(f, w1) + b1)
    out = g.matmul_last(h, w2) + b2
    sig = g.sigmoid(out)
    return sig[..., 0:3], sig[..., 3]


def _triplane_features(payload_flat, n_planes_stride: int, s: int, channels: int,
                       idx: np.ndarray, u0, u1, u2):
    """Bilinear tri-plane samples for gathered neighbors.

    payload_flat: (N*3*S*S, C) rows (tape variable or ndarray), row order
    ((n*3 + plane)*S + i)*S + j. idx: (..., ) int neighbor ids. u0,u1,u2:
    local coordinates, same leading shape. Returns (..., C).
    """
    feat = None
    for p, (ua, ub) in enumerate(((u0, u1), (u0, u2), (u1, u2))):
        if s == 1:
            rows = idx * 3 + p
            contrib = g.take(payload_flat, rows)
        else:
            pa = g.mul(g.mul(g.add(ua, 1.0), 0.5), float(s - 1))
            pb = g.mul(g.mul(g.add(ub, 1.0), 0.5), float(s - 1))
            ia = np.clip(np.floor(g.value(pa)), 0, s - 2).astype(np.int64)
            ib = np.clip(np.floor(g.value(pb)), 0, s - 2).astype(np.int64)
            fa = g.sub(pa, ia.astype(np.float64))
            fb = g.sub(pb, ib.astype(np.float64))
            base = (idx * 3 + p) * s
            r00 = (base + ia) * s + ib
            r01 = (base + ia) * s + ib + 1
            r10 = (base + ia + 1) * s + ib
            r11 = (base + ia + 1) * s + ib + 1
            corners = g.take(payload_flat, np.stack([r00, r01, r10, r11], axis=-1))
            one_fa = g.sub(1.0, fa)
            one_fb = g.sub(1.0, fb)
            weights = g.stack(
                [g.mul(one_fa, one_fb), g.mul(one_fa, fb),
                 g.mul(fa, one_fb), g.mul(fa, fb)],
                axis=-1,
            )
            contrib = g.mixdown(weights, corners)
        feat = contrib if feat is None else g.add(feat, contrib)
    return feat


def _local_frames(arrays: dict, xdiff, idx: np.ndarray):
    """Rotate gathered offsets into each neighbor's local frame.

    Returns (y0, y1, y2, r0, r1, r2): frame coordinates and radii, all with
    the leading shape of idx.
    """
    rot = g.take(arrays["rotations"], idx)
    rad = g.take(arrays["radii"], idx)
    a, b, c = rot[..., 0], rot[..., 1], rot[..., 2]
    e = _rotation_entries(g.cos(a), g.sin(a), g.cos(b), g.sin(b), g.cos(c), g.sin(c))
    dx, dy, dz = xdiff[..., 0], xdiff[..., 1], xdiff[..., 2]
    # y = R^T (x - mu): column i of R dotted with the offset
    y0 = e[0] * dx + e[3] * dy + e[6] * dz
    y1 = e[1] * dx + e[4] * dy + e[7] * dz
    y2 = e[2] * dx + e[5] * dy + e[8] * dz
    return y0, y1, y2, rad[..., 0], rad[..., 1], rad[..., 2]


def _influence_from_frames(y0, y1, y2, r0, r1, r2, cfg: RenderConfig):
    z0, z1, z2 = y0 / r0, y1 / r1, y2 / r2
    maha = z0 * z0 + z1 * z1 + z2 * z2
    return g.mul(g.exp(g.mul(maha, -1.0 / (2.0 * cfg.tau))), cfg.eta)


def point_influences(arrays: dict, points: np.ndarray, cfg: RenderConfig,
                     idx: np.ndarray | None = None):
    """Influences g_k of the K nearest Gaussians at each point, (..., K)."""
    points = np.asarray(points, dtype=np.float64)
    if idx is None:
        flat = points.reshape(-1, 3)
        idx = nearest_k_batch(g.value(arrays["centers"]), flat, cfg.knn_k)
        idx = idx.reshape(points.shape[:-1] + (cfg.knn_k,))
    xdiff = g.sub(points[..., None, :], g.take(arrays["centers"], idx))
    y0, y1, y2, r0, r1, r2 = _local_frames(arrays, xdiff, idx)
    return _influence_from_frames(y0, y1, y2, r0, r1, r2, cfg)


def _shade(arrays: dict, mlp_arrays: dict, xdiff, idx: np.ndarray,
           cfg: RenderConfig, s: int, channels: int):
    """Blend the K gathered Gaussians at each query point.

    arrays: centers/rotations/radii/payload_flat (tape variables or ndarrays).
    xdiff: (..., K, 3) point-minus-center offsets. idx: (..., K) neighbor ids.
    Returns (color (..., 3), alpha (...,), influence_sum (...,)).
    """
    y0, y1, y2, r0, r1, r2 = _local_frames(arrays, xdiff, idx)
    influence = _influence_from_frames(y0, y1, y2, r0, r1, r2, cfg)
    u0 = g.clip(y0 / (3.0 * r0), -1.0, 1.0)
    u1 = g.clip(y1 / (3.0 * r1), -1.0, 1.0)
    u2 = g.clip(y2 / (3.0 * r2), -1.0, 1.0)
    feat = _triplane_features(arrays["payload_flat"], 3, s, channels, idx, u0, u1, u2)
    color_k, opacity_k = mlp_forward(mlp_arrays, feat)
    gsum = g.sum(influence, axis=-1)
    ghat = g.div(influence, g.reshape(g.add(gsum, cfg.epsilon),
                                      g.value(gsum).shape + (1,)))
    color = g.mixdown(ghat, color_k)
    alpha = g.clip(g.sum(g.mul(influence, opacity_k), axis=-1), 0.0, _ALPHA_CAP)
    return color, alpha, gsum


def _knn_for_samples(centers_val: np.ndarray, origin: np.ndarray,
                     dirs: np.ndarray, t: np.ndarray, k: int) -> np.ndarray:
    """Neighbor ids (R, J, K) for sample points origin + t * dir.

    Distances are expanded around (center - origin) so the selection is
    bit-stable under joint scene/camera translation; ties break by ascending
    texel index via stable argsort, matching the spatial module's rule.
    """
    delta0 = centers_val - origin                      # (N, 3)
    s0 = np.sum(delta0 * delta0, axis=-1)              # (N,)
    proj = np.sum(dirs[:, None, :] * delta0[None, :, :], axis=-1)  # (R, N)
    d2 = s0[None, None, :] - 2.0 * t[:, :, None] * proj[:, None, :] \
        + (t * t)[:, :, None]                          # (R, J, N)
    r, j, n = d2.shape
    idx = np.argsort(d2.reshape(r * j, n), axis=1, kind="stable")[:, :k]
    return idx.reshape(r, j, k)


def march_rays_core(arrays: dict, mlp_arrays: dict, origin: np.ndarray,
                    dirs: np.ndarray, t: np.ndarray, cfg: RenderConfig,
                    s: int, channels: int, idx: np.ndarray | None = None):
    """Render a batch of rays; the shared kernel behind march_ray,
    render_image, and the fitting loss.

    arrays holds centers (N,3), rotations (N,3), radii (N,3), payload_flat
    (N*3*S*S, C), tape variables or ndarrays. t: (R, J) sample distances.
    Returns (color (R,3), depth (R,), alpha (R,), mean_influence scalar).
    """
    r_count, j_count = t.shape
    centers_val = g.value(arrays["centers"])
    if idx is None:
        idx = _knn_for_samples(centers_val, origin, dirs, t, cfg.knn_k)
    delta0 = g.sub(arrays["centers"], origin)          # (N, 3)
    delta0_k = g.take(delta0, idx)                     # (R, J, K, 3)
    tdir = t[:, :, None] * dirs[:, None, :]            # (R, J, 3) constant
    xdiff = g.sub(tdir[:, :, None, :], delta0_k)       # x - mu, grouped form
    color_j, alpha_j, gsum = _shade(arrays, mlp_arrays, xdiff, idx, cfg, s, channels)
    log_t = g.cumsum(g.log1p(g.neg(alpha_j)), axis=-1)  # (R, J)
    shifted = g.concatenate(
        [np.zeros((r_count, 1)), log_t[:, : j_count - 1]], axis=-1
    )
    trans = g.exp(shifted)                             # T_j
    w = g.mul(trans, alpha_j)
    color = g.mixdown(w, color_j)
    depth = g.sum(g.mul(w, t), axis=-1)
    # exact sum telescopes to 1 - prod(1 - alpha_j) <= 1; clamp float
    # overshoot so the background weight stays non-negative
    alpha = g.clip(g.sum(w, axis=-1), 0.0, 1.0)
    bg = np.asarray(cfg.background)
    one_minus = g.reshape(g.sub(1.0, alpha), (r_count, 1))
    color = g.add(color, g.mul(one_minus, bg))
    mean_influence = g.div(g.mean(gsum), float(cfg.knn_k))
    return color, depth, alpha, mean_influence


def avatar_arrays(avatar: UVAvatar) -> dict:
    """Flat ndarray views of an avatar in the layout the kernel consumes."""
    n = avatar.count
    s, c = avatar.plane_size, avatar.channels
    return {
        "centers": avatar.centers.reshape(n, 3),
        "rotations": avatar.rotations.reshape(n, 3),
        "radii": avatar.radii.reshape(n, 3),
        "payload_flat": avatar.payloads.reshape(n * 3 * s * s, c),
    }


def mlp_arrays(mlp: RenderMLP) -> dict:
    return {"w1": mlp.w1, "b1": mlp.b1, "w2": mlp.w2, "b2": mlp.b2}


def stratified_jitter(height: int, width: int, samples: int,
                      seed: int = 0) -> np.ndarray:
    """Per-pixel stratification offsets in [0, 1), shape (H, W, J)."""
    return np.random.default_rng(seed).uniform(size=(height, width, samples))


def sample_distances(near: float, far: float, jitter: np.ndarray) -> np.ndarray:
    """Stratified distances t = near + (far-near) (i + u_i) / J along each ray."""
    j = jitter.shape[-1]
    return near + (far - near) * (np.arange(j) + jitter) / j


def blend_point(avatar: UVAvatar, mlp: RenderMLP, x, cfg: RenderConfig,
                index: UniformGridIndex) -> tuple[np.ndarray, float]:
    """(blended color, blended opacity) of a single world point.

    The scalar reference for the kernel: direct x - mu arithmetic, neighbors
    from the grid index.
    """
    x = np.asarray(x, dtype=np.float64)
    idx = knn_query(index, x, cfg.knn_k)
    arrays = avatar_arrays(avatar)
    xdiff = x[None, :] - arrays["centers"][idx]
    color, alpha, _ = _shade(arrays, mlp_arrays(mlp), xdiff, idx, cfg,
                             avatar.plane_size, avatar.channels)
    return color, float(alpha)


def march_ray(avatar: UVAvatar, mlp: RenderMLP, origin, direction,
              cfg: RenderConfig, index: UniformGridIndex, near: float,
              far: float, jitter: np.ndarray | None = None
              ) -> tuple[np.ndarray, float, float]:
    """(color, depth, alpha) of one ray; bit-equal to the matching
    render_image pixel when given that pixel's jitter row.

    jitter=None uses midpoint sampling (u = 0.5 for every stratum).
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise InvalidArgumentError("ray direction must be unit length")
    if jitter is None:
        jitter = np.full(cfg.samples_per_ray, 0.5)
    jitter = np.asarray(jitter, dtype=np.float64)
    if jitter.shape != (cfg.samples_per_ray,):
        raise InvalidArgumentError("jitter must have one entry per ray sample")
    if cfg.knn_k > avatar.count:
        raise InvalidArgumentError("knn_k exceeds Gaussian count")
    t = sample_distances(near, far, jitter[None, :])
    color, depth, alpha, _ = march_rays_core(
        avatar_arrays(avatar), mlp_arrays(mlp), origin, direction[None, :],
        t, cfg, avatar.plane_size, avatar.channels,
    )
    return color[0], float(depth[0]), float(alpha[0])


def render_image(avatar: UVAvatar, mlp: RenderMLP, camera: Camera,
                 cfg: RenderConfig, seed: int = 0,
                 chunk: int = 256) -> RenderOutput:
    """Full-frame render; pixel (i, j) bit-equals march_ray of that pixel's
    ray with jitter stratified_jitter(H, W, J, seed)[i, j]."""
    if cfg.knn_k > avatar.count:
        raise InvalidArgumentError("knn_k exceeds Gaussian count")
    h, w = camera.height, camera.width
    dirs = camera.ray_directions().reshape(-1, 3)
    jit = stratified_jitter(h, w, cfg.samples_per_ray, seed).reshape(-1, cfg.samples_per_ray)
    arrays = avatar_arrays(avatar)
    marrays = mlp_arrays(mlp)
    origin = camera.origin
    color = np.empty((h * w, 3))
    depth = np.empty(h * w)
    alpha = np.empty(h * w)
    for start in range(0, h * w, chunk):
        sl = slice(start, start + chunk)
        t = sample_distances(camera.near, camera.far, jit[sl])
        c, d, a, _ = march_rays_core(arrays, marrays, origin, dirs[sl], t, cfg,
                                     avatar.plane_size, avatar.channels)
        color[sl], depth[sl], alpha[sl] = c, d, a
    return RenderOutput(
        color=color.reshape(h, w, 3),
        depth=depth.reshape(h, w),
        alpha=alpha.reshape(h, w),
    )


def composite_ray(colors: np.ndarray, alphas: np.ndarray, ts: np.ndarray,
                  background) -> tuple[np.ndarray, float, float]:
    """Front-to-back compositing of per-sample (color, alpha, depth) lists.

    The closed-form view of the kernel's composite stage (cumulative product
    transmittance); used directly in tests of the compositing arithmetic.
    """
    colors = np.asarray(colors, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64)
    trans = np.concatenate([[1.0], np.cumprod(1.0 - alphas)[:-1]])
    w = trans * alphas
    acc = float(np.clip(np.sum(w), 0.0, 1.0))
    color = w @ colors + (1.0 - acc) * np.asarray(background, dtype=np.float64)
    depth = float(np.sum(w * ts))
    return color, depth, acc


def psnr(image, reference) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; +inf for identical inputs."""
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
