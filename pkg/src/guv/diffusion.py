"""Variance-preserving diffusion math on normalized UV tensors.

The avatar's per-texel parameters pack into an (H, W, 9 + 3*S*S*C) tensor,
normalize channel-wise into [-1, 1], and unfold into a wide
(H*S, W*S, 9 + 3C) image the diffusion process operates on (pose channels
replicated across each S x S block, payload channels laid out spatially).
The denoiser is a pluggable pure function (G_t, t) -> G_0_hat; an analytic
Gaussian denoiser serves as the sampling oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import UVAvatar
from .errors import InvalidArgumentError

GEOMETRY_CHANNELS = 9  # center 3 + rotation 3 + radii 3, in pack order


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-timestep signal/noise levels with alpha_t^2 + sigma_t^2 = 1.

    t runs 0..T inclusive; alpha_0 = 1 (no noise), alpha_T ~ 0. sigma_T may
    round to exactly 1.0 in float64 (alpha_bar_T ~ 1e-33 underflows the gap),
    so sigmas are validated in [0, 1] with alphas strictly positive.
    """

    steps: int
    alphas: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        s = np.asarray(self.sigmas, dtype=np.float64)
        if a.shape != (self.steps + 1,) or s.shape != (self.steps + 1,):
            raise InvalidArgumentError("alphas/sigmas must have T+1 entries")
        if np.any(a <= 0) or np.any(a > 1):
            raise InvalidArgumentError("alphas must lie in (0, 1]")
        if np.any(s < 0) or np.any(s > 1):
            raise InvalidArgumentError("sigmas must lie in [0, 1]")
        if np.any(np.diff(a) > 0):
            raise InvalidArgumentError("alphas must be non-increasing")
        if abs(a[0] - 1.0) > 1e-9:
            raise InvalidArgumentError("alpha_0 must be 1")
        vp = a * a + s * s - 1.0
        if np.max(np.abs(vp)) > 1e-12:
            raise InvalidArgumentError("alpha^2 + sigma^2 must equal 1 within 1e-12")
        for name, arr in (("alphas", a), ("sigmas", s)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


def cosine_schedule(steps: int = 1000, offset: float = 0.008) -> DiffusionSchedule:
    """Squared-cosine signal schedule: alpha_bar(t) =
    cos^2(((t/T + s)/(1 + s)) pi/2) normalized so alpha_bar(0) = 1."""
    if steps < 1:
        raise InvalidArgumentError("steps must be >= 1")
    t = np.arange(steps + 1, dtype=np.float64)
    theta = (t / steps + offset) / (1.0 + offset) * (math.pi / 2.0)
    abar = np.cos(theta) ** 2
    abar = abar / abar[0]
    alphas = np.sqrt(abar)
    sigmas = np.sqrt(np.maximum(1.0 - abar, 0.0))
    return DiffusionSchedule(steps=steps, alphas=alphas, sigmas=sigmas)


# ---------------------------------------------------------------------------
# Channel normalization and the UV fold/unfold
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UVTensor:
    """An unfolded, normalized UV image: (H*S, W*S, 9 + 3C), channels in
    [-1, 1]. Channels 0..8 are replicated pose channels, the rest payload."""

    values: np.ndarray
    plane_size: int

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        s = self.plane_size
        if v.ndim != 3:
            raise InvalidArgumentError("values must be (H*S, W*S, channels)")
        if s < 1 or (s & (s - 1)) != 0:
            raise InvalidArgumentError("plane_size must be a power of two")
        if v.shape[0] % s or v.shape[1] % s:
            raise InvalidArgumentError(
                f"spatial dims {v.shape[:2]} not divisible by plane_size {s}"
            )
        if (v.shape[2] - GEOMETRY_CHANNELS) % 3:
            raise InvalidArgumentError("channel count must be 9 + 3C")
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("values must be finite")
        if np.any(np.abs(v) > 1.0):
            raise InvalidArgumentError("normalized channels must lie in [-1, 1]")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def grid_height(self) -> int:
        return self.values.shape[0] // self.plane_size

    @property
    def grid_width(self) -> int:
        return self.values.shape[1] // self.plane_size

    @property
    def feature_channels(self) -> int:
        return (self.values.shape[2] - GEOMETRY_CHANNELS) // 3


def pack_avatar_tensor(avatar: UVAvatar) -> np.ndarray:
    """Raw per-texel parameter tensor (H, W, 9 + 3*S*S*C): center, rotation,
    radii, then the payload planes flattened in (plane, row, col, channel)
    order."""
    h, w = avatar.height, avatar.width
    return np.concatenate(
        [avatar.centers, avatar.rotations, avatar.radii,
         avatar.payloads.reshape(h, w, -1)],
        axis=-1,
    )


def normalize_channels(packed: np.ndarray) -> np.ndarray:
    """Map raw parameter channels into [-1, 1]: centers (x+0.12)*2, rotations
    x/pi, radii (|x|.clip(0, 0.15) - 0.06)*10, payload tanh(x)."""
    packed = np.asarray(packed, dtype=np.float64)
    out = np.empty_like(packed)
    out[..., 0:3] = (packed[..., 0:3] + 0.12) * 2.0
    out[..., 3:6] = packed[..., 3:6] / math.pi
    out[..., 6:9] = (np.clip(np.abs(packed[..., 6:9]), 0.0, 0.15) - 0.06) * 10.0
    out[..., 9:] = np.tanh(packed[..., 9:])
    return out


def denormalize_channels(normalized: np.ndarray) -> np.ndarray:
    """Invert normalize_channels. Radii outside the forward image of
    [0, 0.15] (possible for generated samples) clamp to a tiny positive
    value; payload atanh clamps at +-(1 - 1e-6)."""
    n = np.asarray(normalized, dtype=np.float64)
    out = np.empty_like(n)
    out[..., 0:3] = n[..., 0:3] / 2.0 - 0.12
    out[..., 3:6] = n[..., 3:6] * math.pi
    out[..., 6:9] = np.maximum(n[..., 6:9] / 10.0 + 0.06, 1e-5)
    out[..., 9:] = np.arctanh(np.clip(n[..., 9:], -1.0 + 1e-6, 1.0 - 1e-6))
    return out


def unfold(packed: np.ndarray, plane_size: int) -> np.ndarray:
    """(H, W, 9 + 3*S*S*C) -> (H*S, W*S, 9 + 3C): pose channels replicated
    S x S per texel, each payload plane laid out over its block."""
    packed = np.asarray(packed, dtype=np.float64)
    s = plane_size
    if s < 1 or (s & (s - 1)) != 0:
        raise InvalidArgumentError("plane_size must be a power of two")
    h, w, ch = packed.shape
    if (ch - GEOMETRY_CHANNELS) % (3 * s * s):
        raise InvalidArgumentError(
            f"channel count {ch} does not match plane_size {s}"
        )
    c = (ch - GEOMETRY_CHANNELS) // (3 * s * s)
    pose = packed[..., :GEOMETRY_CHANNELS]
    pose_up = np.broadcast_to(
        pose[:, None, :, None, :], (h, s, w, s, GEOMETRY_CHANNELS)
    ).reshape(h * s, w * s, GEOMETRY_CHANNELS)
    pay = packed[..., GEOMETRY_CHANNELS:].reshape(h, w, 3, s, s, c)
    pay_up = pay.transpose(0, 3, 1, 4, 2, 5).reshape(h * s, w * s, 3 * c)
    return np.concatenate([pose_up, pay_up], axis=-1)


def _pairwise_block_mean(blocks: np.ndarray) -> np.ndarray:
    """Mean over axis 2 (a power-of-two length) by pairwise halving: exact on
    replicated values, a true mean otherwise."""
    m = blocks
    while m.shape[2] > 1:
        m = m[:, :, 0::2] + m[:, :, 1::2]
    return m[:, :, 0] * (1.0 / blocks.shape[2])


def fold(tensor: np.ndarray, plane_size: int) -> np.ndarray:
    """Invert unfold. Pose channels need not be exactly replicated (denoiser
    outputs break replication); each S x S block reduces to its mean, the
    projection onto the replicated set; bit-exact when replication holds."""
    tensor = np.asarray(tensor, dtype=np.float64)
    s = plane_size
    if s < 1 or (s & (s - 1)) != 0:
        raise InvalidArgumentError("plane_size must be a power of two")
    hs, ws, ch = tensor.shape
    if hs % s or ws % s:
        raise InvalidArgumentError("spatial dims not divisible by plane_size")
    if (ch - GEOMETRY_CHANNELS) % 3:
        raise InvalidArgumentError("channel count must be 9 + 3C")
    h, w = hs // s, ws // s
    c = (ch - GEOMETRY_CHANNELS) // 3
    pose = tensor[..., :GEOMETRY_CHANNELS].reshape(h, s, w, s, GEOMETRY_CHANNELS)
    pose = pose.transpose(0, 2, 1, 3, 4).reshape(h, w, s * s, GEOMETRY_CHANNELS)
    pose = _pairwise_block_mean(pose)
    pay = tensor[..., GEOMETRY_CHANNELS:].reshape(h, s, w, s, 3, c)
    pay = pay.transpose(0, 2, 4, 1, 3, 5).reshape(h, w, 3 * s * s * c)
    return np.concatenate([pose, pay], axis=-1)


def normalize_avatar(avatar: UVAvatar, neutral_expression: bool = True) -> UVTensor:
    """Export an avatar as a normalized, unfolded UV tensor.

    neutral_expression is a caller assertion: tensors fed to the diffusion
    prior must come from avatars with no expression offset applied (which is
    not recoverable from the arrays), so passing False raises.
    """
    if not neutral_expression:
        raise InvalidArgumentError(
            "diffusion export requires a neutral-expression avatar"
        )
    packed = pack_avatar_tensor(avatar)
    return UVTensor(values=unfold(normalize_channels(packed), avatar.plane_size),
                    plane_size=avatar.plane_size)


def denormalize_avatar(tensor: UVTensor, anchors: np.ndarray,
                       anchor_normals: np.ndarray,
                       anchor_scales: np.ndarray) -> UVAvatar:
    """Rebuild an avatar from a normalized UV tensor plus the anchor grids
    (which the tensor does not carry)."""
    packed = denormalize_channels(fold(tensor.values, tensor.plane_size))
    h, w = tensor.grid_height, tensor.grid_width
    s, c = tensor.plane_size, tensor.feature_channels
    return UVAvatar(
        centers=packed[..., 0:3],
        rotations=packed[..., 3:6],
        radii=packed[..., 6:9],
        payloads=packed[..., 9:].reshape(h, w, 3, s, s, c),
        anchors=anchors,
        anchor_normals=anchor_normals,
        anchor_scales=anchor_scales,
    )


# ---------------------------------------------------------------------------
# Forward process, posterior, sampling
# ---------------------------------------------------------------------------


def _check_t(schedule: DiffusionSchedule, t: int):
    if not (0 <= t <= schedule.steps):
        raise InvalidArgumentError(f"t={t} outside [0, {schedule.steps}]")


def q_sample(schedule: DiffusionSchedule, g0, t: int, noise):
    """Marginal draw G_t = alpha_t G_0 + sigma_t noise."""
    _check_t(schedule, t)
    g0 = np.asarray(g0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    return schedule.alphas[t] * g0 + schedule.sigmas[t] * noise


def transition_params(schedule: DiffusionSchedule, s: int, t: int
                      ) -> tuple[float, float]:
    """(alpha_ts, sigma_ts) of the Markov forward transition s -> t:
    alpha_ts = alpha_t / alpha_s, sigma_ts^2 = sigma_t^2 - alpha_ts^2 sigma_s^2."""
    _check_t(schedule, s)
    _check_t(schedule, t)
    if t < s:
        raise InvalidArgumentError(f"transition requires t >= s, got s={s}, t={t}")
    a_ts = float(schedule.alphas[t] / schedule.alphas[s])
    var = float(schedule.sigmas[t] ** 2 - a_ts * a_ts * schedule.sigmas[s] ** 2)
    return a_ts, math.sqrt(max(var, 0.0))


def posterior_params(schedule: DiffusionSchedule, s: int, t: int, g_t, g0_hat):
    """Mean and std of q(G_s | G_t, G_0 = g0_hat) for s <= t:
    mean = (alpha_ts sigma_s^2 / sigma_t^2) G_t
         + (alpha_s sigma_ts^2 / sigma_t^2) G_0;
    var = sigma_ts^2 sigma_s^2 / sigma_t^2."""
    _check_t(schedule, s)
    _check_t(schedule, t)
    if t < s:
        raise InvalidArgumentError(f"posterior requires t >= s, got s={s}, t={t}")
    g_t = np.asarray(g_t, dtype=np.float64)
    g0_hat = np.asarray(g0_hat, dtype=np.float64)
    if s == t:
        return g_t.copy(), 0.0
    a_ts, s_ts = transition_params(schedule, s, t)
    var_t = float(schedule.sigmas[t] ** 2)
    coef_t = a_ts * float(schedule.sigmas[s] ** 2) / var_t
    coef_0 = float(schedule.alphas[s]) * s_ts * s_ts / var_t
    mean = coef_t * g_t + coef_0 * g0_hat
    std = math.sqrt(s_ts * s_ts * float(schedule.sigmas[s] ** 2) / var_t)
    return mean, std


def _stable_sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def ddpm_weight(schedule: DiffusionSchedule, t: int) -> float:
    """w_t = sigmoid(SNR(t)), SNR = alpha_t^2 / sigma_t^2; w_0 = 1 (no noise)."""
    _check_t(schedule, t)
    sig2 = float(schedule.sigmas[t] ** 2)
    if sig2 == 0.0:
        return 1.0
    return _stable_sigmoid(float(schedule.alphas[t] ** 2) / sig2)


def denoiser_loss(schedule: DiffusionSchedule, g0, t: int, noise, denoiser) -> float:
    """w_t ||G_0 - f(G_t, t)||^2 (sum of squares), the denoiser objective."""
    g0 = np.asarray(g0, dtype=np.float64)
    g_t = q_sample(schedule, g0, t, noise)
    resid = g0 - np.asarray(denoiser(g_t, t), dtype=np.float64)
    return ddpm_weight(schedule, t) * float(np.sum(resid * resid))


def _timesteps(schedule: DiffusionSchedule, step_count: int | None) -> np.ndarray:
    if step_count is None or step_count >= schedule.steps:
        return np.arange(schedule.steps, -1, -1)
    if step_count < 1:
        raise InvalidArgumentError("step_count must be >= 1")
    ts = np.unique(np.round(np.linspace(0, schedule.steps, step_count + 1)))
    return ts[::-1].astype(np.int64)


def reverse_sample(schedule: DiffusionSchedule, denoiser, shape, rng,
                   step_count: int | None = None) -> np.ndarray:
    """Ancestral sampling t = T -> 0 with G_0_hat = clip(denoiser(G_t, t), -1, 1).

    The posterior noise array is drawn every step (even when the step std is
    0) so rng consumption does not depend on the schedule's endpoints.
    """
    ts = _timesteps(schedule, step_count)
    g_t = rng.standard_normal(shape)
    for hi, lo in zip(ts[:-1], ts[1:]):
        g0_hat = np.clip(denoiser(g_t, int(hi)), -1.0, 1.0)
        mean, std = posterior_params(schedule, int(lo), int(hi), g_t, g0_hat)
        g_t = mean + std * rng.standard_normal(shape)
    return g_t


def analytic_gauss_denoiser(schedule: DiffusionSchedule, data_mean: float,
                            data_std: float):
    """Exact posterior mean E[G_0 | G_t] for scalar-wise N(m, s^2) data:
    (alpha_t s^2 G_t + sigma_t^2 m) / (alpha_t^2 s^2 + sigma_t^2)."""

    def denoiser(g_t, t: int):
        a = float(schedule.alphas[t])
        sig2 = float(schedule.sigmas[t] ** 2)
        s2 = data_std * data_std
        return (a * s2 * np.asarray(g_t, dtype=np.float64) + sig2 * data_mean) / (
            a * a * s2 + sig2
        )

    return denoiser


def channel_mask(grid_mask: np.ndarray, selector: str, plane_size: int,
                 feature_channels: int) -> np.ndarray:
    """Expand an (H, W) texel mask + channel selector to the unfolded tensor:
    geometry = channels 0..8, texture = the 3C payload channels, both = all."""
    grid_mask = np.asarray(grid_mask, dtype=bool)
    if grid_mask.ndim != 2:
        raise InvalidArgumentError("grid mask must be (H, W)")
    if selector not in ("geometry", "texture", "both"):
        raise InvalidArgumentError(f"unknown channel selector: {selector!r}")
    s = plane_size
    h, w = grid_mask.shape
    spatial = np.broadcast_to(grid_mask[:, None, :, None], (h, s, w, s))
    spatial = spatial.reshape(h * s, w * s)
    ch = GEOMETRY_CHANNELS + 3 * feature_channels
    chan = np.zeros(ch, dtype=bool)
    if selector in ("geometry", "both"):
        chan[:GEOMETRY_CHANNELS] = True
    if selector in ("texture", "both"):
        chan[GEOMETRY_CHANNELS:] = True
    return spatial[:, :, None] & chan[None, None, :]


def inpaint_sample(schedule: DiffusionSchedule, denoiser, known: np.ndarray,
                   mask: np.ndarray, rng,
                   step_count: int | None = None) -> np.ndarray:
    """Reverse sampling that keeps the masked (known) region pinned.

    At every reverse step the known region is overwritten with a fresh
    forward draw q_sample(known, s) using a noise stream spawned from rng,
    so with the same rng an empty mask reproduces reverse_sample bit-exactly;
    at t=0 the known region is the input itself, bit-exact.
    """
    known = np.asarray(known, dtype=np.float64)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), known.shape)
    mask_rng = rng.spawn(1)[0]
    ts = _timesteps(schedule, step_count)
    g_t = rng.standard_normal(known.shape)
    g_t = np.where(
        mask, q_sample(schedule, known, int(ts[0]),
                       mask_rng.standard_normal(known.shape)), g_t
    )
    for hi, lo in zip(ts[:-1], ts[1:]):
        g0_hat = np.clip(denoiser(g_t, int(hi)), -1.0, 1.0)
        mean, std = posterior_params(schedule, int(lo), int(hi), g_t, g0_hat)
        g_t = mean + std * rng.standard_normal(known.shape)
        g_t = np.where(
            mask, q_sample(schedule, known, int(lo),
                           mask_rng.standard_normal(known.shape)), g_t
        )
    return np.where(mask, known, g_t)
