"""Small deterministic diffusion sampler wired through geometry-enhanced attention.

Nothing here is a trained model. The denoiser, feature extractor and
cross-modal embedding are seeded random stand-ins that exercise the
conditioning contract:

* image features of the input view are noised to the current step,
* geometry features of each target view stay noise-free and are scaled by
  the cosine view mask,
* a cross-modal embedding enters through cross-attention,
* the geometry branch weight follows the step schedule.

Per-view random streams are derived from ``(seed, azimuth, elevation)`` of the
target pose, so a view's result does not depend on its position in the list.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .attention import AttentionParams, fused_attention, multihead_attention, random_params
from .imagegeo import RgbImage
from .render import CameraPose
from .schedule import ScheduleParams, apply_geo_mask, lambda_geo, mask_scale, view_deviation

PATCH = 8
EMBED_DIM = 64
EMBED_TOKENS = 4
_EMBED_SEED = 0x5EED
_TEXT_KEY = b"proxyview-text"


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------- noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear DDPM schedule; ``betas[t - 1]`` is beta_t and ``alpha_bars[t]`` the product up to t."""

    T: int
    betas: np.ndarray  # (T,)
    alpha_bars: np.ndarray  # (T + 1,), alpha_bars[0] == 1

    def alpha(self, t: int) -> float:
        return 1.0 - float(self.betas[t - 1])


def make_noise_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError("need 0 < beta_start < beta_end < 1")
    if T < 1:
        raise ValueError("T must be positive")
    betas = np.linspace(beta_start, beta_end, T)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(T, betas, alpha_bars)


def add_noise(x0: np.ndarray, t: int, sched: NoiseSchedule, seed: int) -> np.ndarray:
    if not 0 <= t <= sched.T:
        raise ValueError(f"step {t} outside [0, {sched.T}]")
    ab = sched.alpha_bars[t]
    eps = np.random.default_rng(seed).standard_normal(np.shape(x0))
    return math.sqrt(ab) * np.asarray(x0, dtype=np.float64) + math.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------- feature stand-ins


def resize_image(img: RgbImage, size: int) -> RgbImage:
    """Square resize: block mean for integer reductions, bilinear otherwise."""
    h, w = img.height, img.width
    if (h, w) == (size, size):
        return img
    if h % size == 0 and w % size == 0:
        fh, fw = h // size, w // size
        return RgbImage(img.data.reshape(size, fh, size, fw, 3).mean(axis=(1, 3)))
    bands = [
        Image.fromarray(img.data[..., c].astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)
        for c in range(3)
    ]
    return RgbImage(np.stack([np.asarray(b, dtype=np.float64) for b in bands], axis=-1))


def patch_pool(img: RgbImage) -> np.ndarray:
    """Mean of each non-overlapping 8x8 patch, mapped to [-1, 1]; returns (tokens, 3)."""
    h, w = img.height, img.width
    if h % PATCH or w % PATCH:
        raise ValueError(f"image size {w}x{h} is not divisible by the patch size {PATCH}")
    pooled = img.data.reshape(h // PATCH, PATCH, w // PATCH, PATCH, 3).mean(axis=(1, 3))
    return 2.0 * pooled.reshape(-1, 3) - 1.0


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key]))


def _derived_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key]).generate_state(1)[0])


def extract_features(img: RgbImage, seed: int, layers: int = 4, channels: int = 64) -> list[np.ndarray]:
    """Per-layer (1, tokens, channels) features: pooled patches times a seeded 3 x C projection."""
    pooled = patch_pool(img)
    return [(pooled @ _rng(seed, 101, layer).standard_normal((3, channels)))[None] for layer in range(layers)]


def _text_part(text: str) -> np.ndarray:
    words = text.split()
    if not words:
        return np.zeros(EMBED_DIM)
    vecs = []
    for word in words:
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=EMBED_DIM, person=_TEXT_KEY).digest()
        vecs.append((np.frombuffer(digest, dtype=np.uint8).astype(np.float64) - 127.5) / 127.5)
    return np.sum(vecs, axis=0) / math.sqrt(len(vecs))


def _image_stats(img: RgbImage) -> np.ndarray:
    flat = img.data.reshape(-1, 3)
    return np.concatenate([flat.mean(axis=0), flat.std(axis=0)])


def _image_projection() -> tuple[np.ndarray, np.ndarray]:
    rng = _rng(_EMBED_SEED)
    return rng.standard_normal((6, EMBED_DIM)) / math.sqrt(6), 0.1 * rng.standard_normal(EMBED_DIM)


def embed_cross_modal(text: str, img: RgbImage) -> np.ndarray:
    """64-d embedding: 0.5 * hashed bag of words + 0.5 * projected channel mean/std."""
    proj, bias = _image_projection()
    return 0.5 * _text_part(text) + 0.5 * (_image_stats(img) @ proj + bias)


def baseline_embedding() -> np.ndarray:
    """Embedding of empty text with a blank (all-white, 8x8) image."""
    return embed_cross_modal("", RgbImage.filled(PATCH, PATCH))


# ---------------------------------------------------------------- denoiser


@dataclass(frozen=True)
class ConditionBundle:
    cross_modal: np.ndarray  # (EMBED_DIM,)
    image_features: list  # per layer (1, tokens, C), noised to the current step
    geo_features: list  # per layer (1, tokens, C), noise-free and mask-scaled


def _rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6)


@dataclass(frozen=True)
class _Layer:
    attn: AttentionParams
    cross_q: np.ndarray
    cross_k: np.ndarray
    cross_v: np.ndarray
    cross_o: np.ndarray
    mlp_in: np.ndarray
    mlp_bias: np.ndarray
    mlp_out: np.ndarray


@dataclass(frozen=True)
class ToyDenoiser:
    layers: tuple
    w_out: np.ndarray
    channels: int
    heads: int

    @classmethod
    def from_seed(cls, seed: int, n_layers: int = 4, channels: int = 64, heads: int = 4) -> ToyDenoiser:
        rng = _rng(seed, 202)
        s = 1.0 / math.sqrt(channels)
        d_tok = EMBED_DIM // EMBED_TOKENS
        layers = []
        for _ in range(n_layers):
            attn = random_params(channels, heads, rng)
            layers.append(_Layer(
                attn=attn,
                cross_q=rng.standard_normal((channels, channels)) * s,
                cross_k=rng.standard_normal((d_tok, channels)) / math.sqrt(d_tok),
                cross_v=rng.standard_normal((d_tok, channels)) / math.sqrt(d_tok),
                cross_o=rng.standard_normal((channels, channels)) * s * 0.5,
                mlp_in=rng.standard_normal((channels, 2 * channels)) * s,
                mlp_bias=0.1 * rng.standard_normal(2 * channels),
                mlp_out=rng.standard_normal((2 * channels, channels)) * s * 0.5,
            ))
        w_out = rng.standard_normal((channels, channels)) * s * 0.5
        return cls(tuple(layers), w_out, channels, heads)

    def time_embedding(self, t: int) -> np.ndarray:
        half = self.channels // 2
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
        return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])

    def __call__(self, x: np.ndarray, t: int, bundle: ConditionBundle, lam: float) -> np.ndarray:
        """Predict the noise in ``x`` (1, tokens, C)."""
        h = x + 0.1 * self.time_embedding(t)
        emb = bundle.cross_modal.reshape(1, EMBED_TOKENS, -1)
        for layer, f_img, f_geo in zip(self.layers, bundle.image_features, bundle.geo_features):
            hn = _rms_norm(h)
            h = h + fused_attention(hn, _rms_norm(f_img), f_geo, layer.attn, lam).fused
            hn = _rms_norm(h)
            cross = multihead_attention(hn @ layer.cross_q, emb @ layer.cross_k, emb @ layer.cross_v, self.heads)
            h = h + cross @ layer.cross_o
            hn = _rms_norm(h)
            h = h + np.tanh(hn @ layer.mlp_in + layer.mlp_bias) @ layer.mlp_out
        return _rms_norm(h) @ self.w_out


# ---------------------------------------------------------------- latent codec


def _latent_codec(seed: int, channels: int) -> np.ndarray:
    """(3, C) patch embedding with orthogonal rows of squared norm C/3."""
    q, _ = np.linalg.qr(_rng(seed, 303).standard_normal((channels, 3)))
    return q.T * math.sqrt(channels / 3.0)


def encode_latent(img: RgbImage, codec: np.ndarray) -> np.ndarray:
    return (patch_pool(img) @ codec)[None]


def decode_latent(x: np.ndarray, codec: np.ndarray, size: int) -> RgbImage:
    """Transpose of the patch embedding, then each token value is spread over its 8x8 patch."""
    pooled = x[0] @ codec.T / (codec.shape[1] / 3.0)
    n = size // PATCH
    grid = pooled.reshape(n, n, 3)
    img = np.repeat(np.repeat(grid, PATCH, axis=0), PATCH, axis=1)
    return RgbImage((img + 1.0) / 2.0)


# ---------------------------------------------------------------- sampler


@dataclass(frozen=True)
class SamplerConfig:
    T: int = 50
    seed: int = 0
    latent_size: int = 40
    model_seed: int = 0
    layers: int = 4
    channels: int = 64
    heads: int = 4
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lambda_max: float = 0.3
    lambda_min: float = 1e-5
    clamp_negative_cos: bool = True
    lambda_override: float | None = None  # constant geometry weight in place of the schedule
    variance: str = "small"  # posterior variance beta_tilde, or "large" for beta_t

    def __post_init__(self):
        if self.latent_size % PATCH or self.latent_size <= 0:
            raise ValidationError(f"latent_size must be a positive multiple of {PATCH}")
        if self.variance not in ("small", "large"):
            raise ValidationError("variance must be 'small' or 'large'")
        if self.lambda_override is not None and not 0.0 <= self.lambda_override <= 1.0:
            raise ValidationError("lambda_override must lie in [0, 1]")

    @property
    def schedule(self) -> ScheduleParams:
        return ScheduleParams(self.T, self.lambda_max, self.lambda_min, self.clamp_negative_cos)


@dataclass
class ViewTrace:
    azimuth_deg: float
    elevation_deg: float
    delta_theta: float
    mask_scale: float
    steps: list = field(default_factory=list)  # visited t, from T down to 1
    scheduled_lambda: list = field(default_factory=list)
    applied_lambda: list = field(default_factory=list)
    geo_checksums: list = field(default_factory=list)
    image_noise_var: list = field(default_factory=list)  # var(f_t - sqrt(ab_t) f_0) over all layers


@dataclass
class SamplingTrace:
    views: list = field(default_factory=list)


def view_seed(seed: int, pose: CameraPose) -> int:
    """Seed of a view's random streams, keyed by its pose rather than its list position."""
    return _derived_seed(seed, 404, round(pose.azimuth_deg * 1000), round(pose.elevation_deg * 1000))


def _checksum(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def sample_multiview(
    input_img: RgbImage,
    text: str,
    geo_images: list,
    poses: list,
    input_pose: CameraPose,
    cfg: SamplerConfig = SamplerConfig(),
    trace: SamplingTrace | None = None,
) -> list[RgbImage]:
    """Run the reverse diffusion loop once per target view.

    A view whose mask scale is zero carries no geometry signal; its geometry
    branch is switched off (weight 0) rather than diluting the self branch.
    """
    if len(geo_images) != len(poses):
        raise ValidationError(f"{len(geo_images)} geometry images for {len(poses)} poses")
    size = cfg.latent_size
    sched = make_noise_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    sparams = cfg.schedule
    model = ToyDenoiser.from_seed(cfg.model_seed, cfg.layers, cfg.channels, cfg.heads)
    codec = _latent_codec(cfg.model_seed, cfg.channels)
    emb = embed_cross_modal(text, input_img)
    img_clean = extract_features(resize_image(input_img, size), cfg.model_seed, cfg.layers, cfg.channels)

    outputs = []
    for geo_img, pose in zip(geo_images, poses):
        dtheta = view_deviation(pose, input_pose)
        scale = mask_scale(dtheta, sparams)
        geo_raw = extract_features(resize_image(geo_img, size), cfg.model_seed, cfg.layers, cfg.channels)
        geo = [apply_geo_mask(f, dtheta, sparams) for f in geo_raw]
        for f in geo:
            f.setflags(write=False)
        vseed = view_seed(cfg.seed, pose)
        rng = np.random.default_rng(vseed)
        vt = ViewTrace(pose.azimuth_deg, pose.elevation_deg, dtheta, scale) if trace is not None else None

        x = rng.standard_normal((1, (size // PATCH) ** 2, cfg.channels))
        for t in range(cfg.T, 0, -1):
            lam_sched = lambda_geo(t, sparams) if cfg.lambda_override is None else cfg.lambda_override
            lam = lam_sched if scale != 0.0 else 0.0
            img_t = [
                add_noise(f, t, sched, _derived_seed(vseed, t, layer))
                for layer, f in enumerate(img_clean)
            ]
            bundle = ConditionBundle(emb, img_t, geo)
            eps = model(x, t, bundle, lam)

            beta = float(sched.betas[t - 1])
            ab, ab_prev = sched.alpha_bars[t], sched.alpha_bars[t - 1]
            mean = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(1.0 - beta)
            if t > 1:
                var = beta * (1.0 - ab_prev) / (1.0 - ab) if cfg.variance == "small" else beta
                x = mean + math.sqrt(var) * rng.standard_normal(x.shape)
            else:
                x = mean

            if vt is not None:
                vt.steps.append(t)
                vt.scheduled_lambda.append(lam_sched)
                vt.applied_lambda.append(lam)
                vt.geo_checksums.append(_checksum(bundle.geo_features))
                resid = np.concatenate([(ft - math.sqrt(ab) * f0).ravel() for ft, f0 in zip(img_t, img_clean)])
                vt.image_noise_var.append(float(resid.var()))
        if vt is not None:
            trace.views.append(vt)
        outputs.append(decode_latent(x, codec, size))
    return outputs
