"""Multi-view scene fitting: patch-based optimization of the UV Gaussian grid
(and optionally a shared latent code + decoder) against posed target images.

Two modes. "direct" treats every payload entry as a free parameter; "latent"
generates all payloads from one 512-d code through a small per-texel
coordinate-conditioned network, so the payload grid is tied to a shared
representation. Pose parameters and the shading head are optimized in both.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import grad as g
from .core import RenderConfig, UVAvatar, init_from_anchors
from .errors import InvalidArgumentError, NumericFailureError
from .grad import ParamSet, adamw_state, adamw_step, gradients
from .losses import LossWeights, total_loss
from .render import RenderMLP, march_rays_core, random_mlp, sample_distances

Z_DIM = 512
DECODER_HIDDEN = 128


@dataclass(frozen=True)
class PosedView:
    """One training view: camera plus image, with optional depth and mask."""

    camera: "object"
    image: np.ndarray
    depth: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise InvalidArgumentError("image must be (H, W, 3)")
        if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
            raise InvalidArgumentError("image values must lie in [0, 1]")
        if (self.camera.height, self.camera.width) != img.shape[:2]:
            raise InvalidArgumentError("camera dims do not match image")
        object.__setattr__(self, "image", img)
        for name in ("depth", "mask"):
            a = getattr(self, name)
            if a is None:
                continue
            a = np.asarray(a, dtype=np.float64)
            if a.shape != img.shape[:2]:
                raise InvalidArgumentError(f"{name} must be (H, W)")
            if not np.all(np.isfinite(a)):
                raise InvalidArgumentError(f"{name} must be finite")
            object.__setattr__(self, name, a)


@dataclass(frozen=True)
class FitConfig:
    """Optimization knobs; the per-group rates follow the training recipe
    (z 0.05, decoder 0.0025, gaussians 1e-5, shading head 5e-2), with a decay
    of all rates by a fixed factor after decay_step iterations.

    lr_payload is the free-payload rate for direct mode, which the recipe
    does not name (it has no free payloads)."""

    iterations: int = 400
    patch_size: int = 36
    lr_z: float = 0.05
    lr_decoder: float = 0.0025
    lr_gaussians: float = 1e-5
    lr_mlp: float = 5e-2
    lr_payload: float = 2e-2
    decay_step: int | None = 100_000
    decay_factor: float = 0.5
    background: str = "white"
    mlp_alpha_bias: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise InvalidArgumentError("iterations must be >= 0")
        if self.patch_size < 1:
            raise InvalidArgumentError("patch_size must be >= 1")
        for name in ("lr_z", "lr_decoder", "lr_gaussians", "lr_mlp", "lr_payload"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be >= 0")
        if self.decay_step is not None and self.decay_step < 1:
            raise InvalidArgumentError("decay_step must be >= 1 or None")
        if not (0.0 < self.decay_factor <= 1.0):
            raise InvalidArgumentError("decay_factor must lie in (0, 1]")
        if self.background not in ("white", "random-white-biased"):
            raise InvalidArgumentError(
                "background must be 'white' or 'random-white-biased'"
            )


@dataclass(frozen=True)
class LatentDecoder:
    """Shared-code payload generator.

    Each texel's payload vector (length 3*S*S*C) is produced independently
    from (z, h/H, w/W) by a two-hidden-layer ReLU network, so every texel
    draws on the same 512-d code through shared weights.
    """

    z: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    grid_height: int
    grid_width: int
    plane_size: int
    channels: int

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64).reshape(-1)
        out_dim = 3 * self.plane_size * self.plane_size * self.channels
        shapes = {
            "w1": (z.size + 2, self.b1.shape[0]),
            "w2": (self.b1.shape[0], self.b2.shape[0]),
            "w3": (self.b2.shape[0], out_dim),
            "b3": (out_dim,),
        }
        object.__setattr__(self, "z", z)
        for name, want in shapes.items():
            got = np.asarray(getattr(self, name), dtype=np.float64)
            if got.shape != want:
                raise InvalidArgumentError(
                    f"decoder {name} must have shape {want}, got {got.shape}"
                )
            object.__setattr__(self, name, got)


def random_decoder(rng: np.random.Generator, grid_height: int, grid_width: int,
                   plane_size: int = 8, channels: int = 8) -> LatentDecoder:
    """He-initialized decoder with a small-variance output layer (initial
    payloads near zero, matching direct mode's zero start) and z ~ 0.01 N(0,I)."""
    out_dim = 3 * plane_size * plane_size * channels
    d_in = Z_DIM + 2
    return LatentDecoder(
        z=0.01 * rng.standard_normal(Z_DIM),
        w1=rng.standard_normal((d_in, DECODER_HIDDEN)) * np.sqrt(2.0 / d_in),
        b1=np.zeros(DECODER_HIDDEN),
        w2=rng.standard_normal((DECODER_HIDDEN, DECODER_HIDDEN))
        * np.sqrt(2.0 / DECODER_HIDDEN),
        b2=np.zeros(DECODER_HIDDEN),
        w3=0.01 * rng.standard_normal((DECODER_HIDDEN, out_dim)),
        b3=np.zeros(out_dim),
        grid_height=grid_height,
        grid_width=grid_width,
        plane_size=plane_size,
        channels=channels,
    )


def _uv_coords(height: int, width: int) -> np.ndarray:
    hh, ww = np.meshgrid(
        np.arange(height) / height, np.arange(width) / width, indexing="ij"
    )
    return np.stack([hh, ww], axis=-1).reshape(-1, 2)


def _decode_rows(z, weights: dict, uv: np.ndarray, plane_size: int,
                 channels: int):
    """Per-texel decoder forward in kernel row layout (N*3*S*S, C); works on
    tape variables and plain arrays alike."""
    n = uv.shape[0]
    zb = g.broadcast_to(g.reshape(z, (1, g.value(z).size)), (n, g.value(z).size))
    x = g.concatenate([zb, uv], axis=-1)
    h1 = g.relu(g.add(g.matmul(x, weights["dec_w1"]), weights["dec_b1"]))
    h2 = g.relu(g.add(g.matmul(h1, weights["dec_w2"]), weights["dec_b2"]))
    out = g.add(g.matmul(h2, weights["dec_w3"]), weights["dec_b3"])
    return g.reshape(out, (n * 3 * plane_size * plane_size, channels))


def decode_payloads(decoder: LatentDecoder) -> np.ndarray:
    """Payload grid (H, W, 3, S, S, C) generated from the decoder's code.

    Deterministic; texel (h, w) depends only on (z, h, w).
    """
    uv = _uv_coords(decoder.grid_height, decoder.grid_width)
    weights = {"dec_w1": decoder.w1, "dec_b1": decoder.b1,
               "dec_w2": decoder.w2, "dec_b2": decoder.b2,
               "dec_w3": decoder.w3, "dec_b3": decoder.b3}
    rows = _decode_rows(decoder.z, weights, uv, decoder.plane_size,
                        decoder.channels)
    s, c = decoder.plane_size, decoder.channels
    return np.asarray(rows).reshape(
        decoder.grid_height, decoder.grid_width, 3, s, s, c
    )


def sample_patch(views, patch_size: int, rng: np.random.Generator
                 ) -> tuple[int, int, int]:
    """Uniform (view index, top, left) of a patch window
    [top:top+patch, left:left+patch]; reproducible from the generator state."""
    first = views[0]
    img = first.image if isinstance(first, PosedView) else np.asarray(first)
    h, w = img.shape[:2]
    if patch_size > min(h, w):
        raise InvalidArgumentError(
            f"patch {patch_size} exceeds image size {(h, w)}"
        )
    view = int(rng.integers(len(views)))
    top = int(rng.integers(h - patch_size + 1))
    left = int(rng.integers(w - patch_size + 1))
    return view, top, left


def composite_background(image: np.ndarray, alpha_mask: np.ndarray,
                         color) -> np.ndarray:
    """image * mask + color * (1 - mask); mask may be soft in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    alpha_mask = np.asarray(alpha_mask, dtype=np.float64)
    if alpha_mask.shape != image.shape[:2]:
        raise InvalidArgumentError(
            f"mask {alpha_mask.shape} does not match image {image.shape[:2]}"
        )
    m = alpha_mask[..., None]
    return image * m + np.asarray(color, dtype=np.float64) * (1.0 - m)


@dataclass
class FitResult:
    avatar: UVAvatar
    mlp: RenderMLP
    decoder: LatentDecoder | None
    loss_history: np.ndarray
    final_breakdown: dict | None = None


def _mlp_from_groups(groups: dict) -> RenderMLP:
    return RenderMLP(w1=groups["w1"], b1=groups["b1"],
                     w2=groups["w2"], b2=groups["b2"])


def fit_scene(
    views,
    anchors: np.ndarray,
    anchor_normals: np.ndarray,
    anchor_scales: np.ndarray,
    config: FitConfig = FitConfig(),
    mode: str = "direct",
    render_cfg: RenderConfig | None = None,
    weights: LossWeights | None = None,
    plane_size: int = 8,
    channels: int = 8,
    callback=None,
) -> FitResult:
    """Jointly optimize pose grids, payloads (free or decoded), and the
    shading head against the posed views.

    Each iteration renders one random patch of one random view and takes an
    AdamW step on the full objective. render_cfg overrides sampling/blending
    (in particular the neighbor count K for ablations); plane_size=1 is the
    feature-vector ablation. Divergence raises with the iteration index.
    Fixed config.seed gives a bit-identical loss history.
    """
    if mode not in ("direct", "latent"):
        raise InvalidArgumentError(f"mode must be 'direct' or 'latent', got {mode!r}")
    if len(views) < 1:
        raise InvalidArgumentError("at least one posed view is required")
    shape0 = views[0].image.shape
    for v in views:
        if v.image.shape != shape0:
            raise InvalidArgumentError("all views must share image dims")
    if config.patch_size > min(shape0[0], shape0[1]):
        raise InvalidArgumentError("patch_size exceeds image size")
    if config.background == "random-white-biased":
        if any(v.mask is None for v in views):
            raise InvalidArgumentError(
                "random-white-biased background requires masks on every view"
            )
    cfg = render_cfg if render_cfg is not None else RenderConfig()
    wts = weights if weights is not None else LossWeights()

    rng = np.random.default_rng(config.seed)
    avatar0 = init_from_anchors(anchors, anchor_normals, anchor_scales,
                                plane_size, channels)
    mlp0 = random_mlp(rng, alpha_bias=config.mlp_alpha_bias)
    h, w = avatar0.height, avatar0.width
    n = h * w
    s, c = plane_size, channels

    groups = {
        "centers": avatar0.centers.copy(),
        "rotations": avatar0.rotations.copy(),
        "radii": avatar0.radii.copy(),
        "w1": mlp0.w1.copy(), "b1": mlp0.b1.copy(),
        "w2": mlp0.w2.copy(), "b2": mlp0.b2.copy(),
    }
    lrs = {
        "centers": config.lr_gaussians, "rotations": config.lr_gaussians,
        "radii": config.lr_gaussians,
        "w1": config.lr_mlp, "b1": config.lr_mlp,
        "w2": config.lr_mlp, "b2": config.lr_mlp,
    }
    decoder0 = None
    uv = None
    if mode == "direct":
        groups["payloads"] = avatar0.payloads.copy()
        lrs["payloads"] = config.lr_payload
    else:
        decoder0 = random_decoder(rng, h, w, s, c)
        uv = _uv_coords(h, w)
        groups["z"] = decoder0.z.copy()
        lrs["z"] = config.lr_z
        for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
            groups["dec_" + name] = getattr(decoder0, name).copy()
            lrs["dec_" + name] = config.lr_decoder
    params = ParamSet(groups, lrs)
    state = adamw_state(params)

    dir_grids = [v.camera.ray_directions() for v in views]
    origins = [v.camera.origin for v in views]

    captured: dict = {}

    def payload_rows(leaves: dict):
        if mode == "direct":
            return g.reshape(leaves["payloads"], (n * 3 * s * s, c))
        dec_w = {k: leaves[k] for k in leaves if k.startswith("dec_")}
        return _decode_rows(leaves["z"], dec_w, uv, s, c)

    history: list[float] = []
    for it in range(config.iterations):
        view_i, top, left = sample_patch(views, config.patch_size, rng)
        view = views[view_i]
        window = (slice(top, top + config.patch_size),
                  slice(left, left + config.patch_size))
        dirs = dir_grids[view_i][window].reshape(-1, 3)
        origin = origins[view_i]
        r_count = dirs.shape[0]
        jitter = rng.uniform(size=(r_count, cfg.samples_per_ray))
        t = sample_distances(view.camera.near, view.camera.far, jitter)

        patch_img = view.image[window].reshape(-1, 3)
        tgts = {"color": patch_img}
        if view.depth is not None:
            tgts["depth"] = view.depth[window].reshape(-1)
        if view.mask is not None:
            tgts["mask"] = view.mask[window].reshape(-1)
        cfg_it = cfg
        if view.mask is not None:
            if config.background == "random-white-biased":
                bg = 1.0 - 0.5 * rng.uniform(size=3)
                cfg_it = dataclasses.replace(cfg, background=tuple(bg))
            else:
                bg = np.asarray(cfg.background, dtype=np.float64)
            tgts["color"] = composite_background(
                view.image[window], view.mask[window], bg
            ).reshape(-1, 3)

        def evaluator(leaves: dict):
            scene = {
                "centers": leaves["centers"],
                "rotations": leaves["rotations"],
                "radii": leaves["radii"],
                "anchors": anchors,
            }
            arrays = {
                "centers": g.reshape(leaves["centers"], (n, 3)),
                "rotations": g.reshape(leaves["rotations"], (n, 3)),
                "radii": g.reshape(leaves["radii"], (n, 3)),
                "payload_flat": payload_rows(leaves),
            }
            mlp_vars = {k: leaves[k] for k in ("w1", "b1", "w2", "b2")}
            color, depth, alpha, mean_influ = march_rays_core(
                arrays, mlp_vars, origin, dirs, t, cfg_it, s, c
            )
            outputs = {"color": color, "depth": depth, "alpha": alpha}
            tot, breakdown = total_loss(
                outputs, tgts, scene, z=leaves.get("z"), weights=wts,
                mean_influence=mean_influ,
            )
            captured["loss"] = float(g.value(tot))
            captured["breakdown"] = {k: float(g.value(v))
                                     for k, v in breakdown.items()}
            return tot

        try:
            grads = gradients(evaluator, params)
        except NumericFailureError as e:
            raise NumericFailureError(f"iteration {it}: {e}") from e
        lr_scale = (config.decay_factor
                    if config.decay_step is not None and it >= config.decay_step
                    else 1.0)
        adamw_step(params, grads, state, lr_scale)
        # keep radii strictly positive; the influence kernel divides by them
        np.maximum(params.groups["radii"], 1e-4, out=params.groups["radii"])
        history.append(captured["loss"])
        if callback is not None:
            callback(it, captured["loss"], params.groups)

    final_groups = params.groups
    decoder = None
    if mode == "latent":
        decoder = LatentDecoder(
            z=final_groups["z"],
            w1=final_groups["dec_w1"], b1=final_groups["dec_b1"],
            w2=final_groups["dec_w2"], b2=final_groups["dec_b2"],
            w3=final_groups["dec_w3"], b3=final_groups["dec_b3"],
            grid_height=h, grid_width=w, plane_size=s, channels=c,
        )
        payloads = decode_payloads(decoder)
    else:
        payloads = final_groups["payloads"]
    avatar = UVAvatar(
        centers=final_groups["centers"],
        rotations=final_groups["rotations"],
        radii=final_groups["radii"],
        payloads=payloads,
        anchors=avatar0.anchors,
        anchor_normals=avatar0.anchor_normals,
        anchor_scales=avatar0.anchor_scales,
    )
    return FitResult(
        avatar=avatar,
        mlp=_mlp_from_groups(final_groups),
        decoder=decoder,
        loss_history=np.asarray(history, dtype=np.float64),
        final_breakdown=captured.get("breakdown"),
    )
