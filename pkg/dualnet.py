"""Dual-branch denoiser over patchified latents.

The target branch sees (noisy latent, hole mask, masked image), the cloud
branch (noisy latent, no-geometry mask, projected cloud). Both token streams
share one joint self-attention per block; which cross-branch links exist is
decided by the attention mask. Only the target branch predicts noise.
"""

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ConfigurationError, IngestionError, NumericError, ParameterError, ShapeError, ValidationError

log = logging.getLogger('geocomplete')

ATTENTION_MODES = ('masked', 'symmetric', 'full', 'separate')
SAMPLERS = ('ancestral', 'deterministic')
IMAGE_CHANNELS = 3

CHECKPOINT_MAGIC = b'GCKP'
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    width: int = 64
    height: int = 64
    patch: int = 4
    hidden: int = 128
    blocks: int = 4
    heads: int = 4
    time_dim: int = 128
    mlp_ratio: int = 4
    # masked: target->cloud diagonal only, symmetric: both diagonals,
    # full: no masking between branches, separate: no cross-branch links
    attention: str = 'masked'
    dual_branch: bool = True
    share_weights: bool = True
    zero_head: bool = True
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.patch < 1 or self.width % self.patch or self.height % self.patch:
            raise ConfigurationError("resolution {}x{} is not a multiple of the patch {}".format(self.width, self.height, self.patch))
        if self.hidden % self.heads:
            raise ConfigurationError("hidden size {} is not divisible by {} heads".format(self.hidden, self.heads))
        if self.blocks < 1 or self.time_dim < 2 or self.time_dim % 2:
            raise ConfigurationError("need at least one block and an even timestep embedding size")
        if self.attention not in ATTENTION_MODES:
            raise ConfigurationError("attention must be one of {}, got {}".format(', '.join(ATTENTION_MODES), self.attention))
        if self.timesteps < 1 or not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigurationError("noise schedule needs T >= 1 and 0 < beta_start <= beta_end < 1")

    @property
    def latent_channels(self):
        return IMAGE_CHANNELS * self.patch ** 2

    @property
    def latent_shape(self):
        return (self.height // self.patch, self.width // self.patch)

    @property
    def tokens(self):
        h, w = self.latent_shape
        return h * w

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        values = json.loads(text)
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})


def image_tensor(image, dtype=None):
    """HxWxC numpy image to a CxHxW tensor (batched inputs keep their leading axes)."""
    tensor = torch.from_numpy(np.ascontiguousarray(image)).movedim(-1, -3)
    return tensor if dtype is None else tensor.to(dtype)


def tensor_image(tensor):
    return tensor.detach().movedim(-3, -1).cpu().numpy()


def check_divisible(height, width, patch):
    if height % patch or width % patch:
        raise ShapeError("{}x{} is not divisible by patch {}".format(width, height, patch))


def to_latent(image, patch):
    """Space-to-depth: (..., 3, H, W) -> (..., 3·patch², H/patch, W/patch)."""
    check_divisible(image.shape[-2], image.shape[-1], patch)
    return F.pixel_unshuffle(image, patch)


def from_latent(latent, patch):
    return F.pixel_shuffle(latent, patch)


def downsample_mask(mask, patch):
    """Max-pool (..., H, W) binary masks to latent resolution."""
    if isinstance(mask, np.ndarray):
        mask = torch.from_numpy(mask.astype(np.float32))
    check_divisible(mask.shape[-2], mask.shape[-1], patch)
    lead = mask.shape[:-2]
    pooled = F.max_pool2d(mask.reshape(-1, 1, *mask.shape[-2:]).float(), patch)
    return pooled.reshape(*lead, *pooled.shape[-2:])


def latent_weight(weight, patch):
    """Per-pixel weight map (..., H, W) rearranged like the image latent: (..., 3·patch², H/patch, W/patch)."""
    if isinstance(weight, np.ndarray):
        weight = torch.from_numpy(weight.astype(np.float32))
    weight = weight.float().unsqueeze(-3).expand(*weight.shape[:-2], IMAGE_CHANNELS, *weight.shape[-2:]).contiguous()
    return to_latent(weight, patch)


class NoiseSchedule:

    def __init__(self, betas):
        betas = torch.as_tensor(betas, dtype=torch.float64)
        if betas.ndim != 1 or len(betas) == 0 or not bool(((betas > 0) & (betas < 1)).all()):
            raise ParameterError("betas must be a non-empty vector within (0, 1)")
        self.betas = betas
        self.alphas = 1 - betas
        self.alphas_cumprod = torch.cumprod(self.alphas, dim=0)

    @classmethod
    def linear(cls, timesteps, beta_start=1e-4, beta_end=0.02):
        return cls(torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64))

    @classmethod
    def from_config(cls, cfg):
        return cls.linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)

    @property
    def T(self):
        return len(self.betas)

    def check_timestep(self, t):
        t = torch.as_tensor(t)
        if bool((t < 0).any()) or bool((t >= self.T).any()):
            raise ParameterError("timestep must be within [0, {}), got {}".format(self.T, t.tolist()))
        return t.long()


def broadcast_per_sample(values, like):
    return values.to(like.dtype).reshape(values.shape + (1,) * (like.ndim - values.ndim))


def add_noise(x0, t, eps, sched):
    """x(t) = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) ε."""
    if x0.shape != eps.shape:
        raise ShapeError("latent {} and noise {} differ in shape".format(tuple(x0.shape), tuple(eps.shape)))
    ab = broadcast_per_sample(sched.alphas_cumprod[sched.check_timestep(t)], x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def build_attention_mask(L, mode='masked'):
    """2L x 2L, True = allowed. Target tokens are 0..L-1, cloud tokens L..2L-1."""
    if L < 1:
        raise ParameterError("token count must be >= 1, got {}".format(L))
    if mode not in ATTENTION_MODES:
        raise ParameterError("attention mode must be one of {}, got {}".format(', '.join(ATTENTION_MODES), mode))
    if mode == 'full':
        return torch.ones(2 * L, 2 * L, dtype=torch.bool)
    block = torch.ones(L, L, dtype=torch.bool)
    empty = torch.zeros(L, L, dtype=torch.bool)
    eye = torch.eye(L, dtype=torch.bool)
    target_to_cloud = empty if mode == 'separate' else eye
    cloud_to_target = eye if mode == 'symmetric' else empty
    return torch.cat([
        torch.cat([block, target_to_cloud], dim=1),
        torch.cat([cloud_to_target, block], dim=1)
    ])


class JointAttention(nn.Module):

    def __init__(self, dim, heads, share_weights=True):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.qkv_cloud = None if share_weights else nn.Linear(dim, 3 * dim)
        self.out_cloud = None if share_weights else nn.Linear(dim, dim)

    def split_heads(self, x):
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(1, 2)


def joint_self_attention(h_tar, h_pt, mask, layer):
    """Masked attention over concat(h_tar, h_pt) along tokens; returns the two halves.

    ``h_pt`` may be None for a single-branch model, then ``mask`` is L x L.
    """
    L = h_tar.shape[-2]
    if h_pt is not None and h_pt.shape != h_tar.shape:
        raise ShapeError("target tokens {} and cloud tokens {} differ".format(tuple(h_tar.shape), tuple(h_pt.shape)))
    n = L if h_pt is None else 2 * L
    if tuple(mask.shape) != (n, n):
        raise ShapeError("attention mask is {}, expected {}x{}".format(tuple(mask.shape), n, n))

    qkv = layer.qkv(h_tar)
    if h_pt is not None:
        qkv_cloud = layer.qkv_cloud if layer.qkv_cloud is not None else layer.qkv
        qkv = torch.cat([qkv, qkv_cloud(h_pt)], dim=-2)
    q, k, v = (layer.split_heads(x) for x in qkv.chunk(3, dim=-1))

    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    logits = logits.masked_fill(~mask.to(logits.device), float('-inf'))
    attended = (logits.softmax(dim=-1) @ v).transpose(1, 2).flatten(2)

    out_tar = layer.out(attended[:, :L])
    if h_pt is None:
        return out_tar, None
    out_cloud = layer.out_cloud if layer.out_cloud is not None else layer.out
    return out_tar, out_cloud(attended[:, L:])


def mlp(dim, ratio):
    return nn.Sequential(nn.Linear(dim, ratio * dim), nn.GELU(), nn.Linear(ratio * dim, dim))


class DualBranchBlock(nn.Module):
    """Pre-norm transformer block; the cloud branch reuses the target weights unless unshared."""

    def __init__(self, cfg):
        super().__init__()
        d = cfg.hidden
        self.norm_attn = nn.LayerNorm(d)
        self.norm_mlp = nn.LayerNorm(d)
        self.mlp = mlp(d, cfg.mlp_ratio)
        self.attn = JointAttention(d, cfg.heads, cfg.share_weights)
        self.norm_attn_cloud = None if cfg.share_weights else nn.LayerNorm(d)
        self.norm_mlp_cloud = None if cfg.share_weights else nn.LayerNorm(d)
        self.mlp_cloud = None if cfg.share_weights else mlp(d, cfg.mlp_ratio)

    def cloud_layer(self, name):
        layer = getattr(self, name + "_cloud")
        return layer if layer is not None else getattr(self, name)

    def forward(self, h_tar, h_pt, mask):
        a_tar, a_pt = joint_self_attention(
            self.norm_attn(h_tar),
            None if h_pt is None else self.cloud_layer("norm_attn")(h_pt),
            mask, self.attn
        )
        h_tar = h_tar + a_tar
        h_tar = h_tar + self.mlp(self.norm_mlp(h_tar))
        if h_pt is not None:
            h_pt = h_pt + a_pt
            h_pt = h_pt + self.cloud_layer("mlp")(self.cloud_layer("norm_mlp")(h_pt))
        return h_tar, h_pt


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angles = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([angles.cos(), angles.sin()], dim=-1)


class DualBranchDenoiser(nn.Module):

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        c, d = cfg.latent_channels, cfg.hidden
        branch_in = 2 * c + 1
        self.embed_target = nn.Linear(branch_in, d)
        self.embed_cloud = nn.Linear(branch_in, d) if cfg.dual_branch else None
        self.position = nn.Parameter(torch.randn(cfg.tokens, d) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(DualBranchBlock(cfg) for _ in range(cfg.blocks))
        self.norm_out = nn.LayerNorm(d)
        self.head = nn.Linear(d, c)
        if cfg.zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)
        mode = cfg.attention if cfg.dual_branch else 'separate'
        mask = build_attention_mask(cfg.tokens, mode)
        if not cfg.dual_branch:
            mask = mask[:cfg.tokens, :cfg.tokens]
        self.register_buffer('attention_mask', mask, persistent=False)

    def tokens(self, latent):
        return latent.flatten(2).transpose(1, 2)

    def forward(self, noisy, t, cond_image, image_mask, cond_cloud=None, cloud_mask=None):
        b, c, h, w = noisy.shape
        if (c, h * w) != (self.cfg.latent_channels, self.cfg.tokens):
            raise ShapeError("noisy latent {} does not match the model ({} channels, {} tokens)".format(
                tuple(noisy.shape), self.cfg.latent_channels, self.cfg.tokens))
        t = torch.as_tensor(t, device=noisy.device).reshape(-1).expand(b)
        time = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(noisy.dtype))[:, None]

        target_in = torch.cat([noisy, image_mask.reshape(b, 1, h, w).to(noisy.dtype), cond_image], dim=1)
        h_tar = self.embed_target(self.tokens(target_in)) + self.position + time
        h_pt = None
        if self.cfg.dual_branch:
            if cond_cloud is None or cloud_mask is None:
                raise ShapeError("dual-branch model needs the cloud conditioning")
            cloud_in = torch.cat([noisy, cloud_mask.reshape(b, 1, h, w).to(noisy.dtype), cond_cloud], dim=1)
            h_pt = self.embed_cloud(self.tokens(cloud_in)) + self.position + time

        for block in self.blocks:
            h_tar, h_pt = block(h_tar, h_pt, self.attention_mask)

        eps = self.head(self.norm_out(h_tar)).transpose(1, 2).reshape(b, c, h, w)
        if not torch.isfinite(eps).all():
            raise NumericError("denoiser produced non-finite activations")
        return eps


def denoiser_forward(model, noisy, t, cond_tar, cond_cloud=None):
    """ε_θ(x(t), t, p̂, x̂) with cond_tar = (x̂ latent, mask latent), cond_cloud = (p̂ latent, mask latent)."""
    cond_image, image_mask = cond_tar
    cond_cloud, cloud_mask = cond_cloud if cond_cloud is not None else (None, None)
    return model(noisy, t, cond_image, image_mask, cond_cloud, cloud_mask)


def epsilon_loss(eps, eps_pred, weight):
    """Mean over the batch of the w-weighted squared noise error (per-sample mean over elements).

    ``weight`` is either per latent element (same shape as ``eps``) or one
    value per latent position, broadcast over channels.
    """
    weight = weight.to(eps.dtype)
    if weight.dim() == eps.dim() - 1:
        weight = weight.unsqueeze(1)
    diff = (eps - eps_pred) * weight
    return diff.pow(2).flatten(1).mean(dim=1).mean()


def strided_timesteps(T, steps):
    if not 1 <= steps <= T:
        raise ParameterError("sampler steps must be within [1, {}], got {}".format(T, steps))
    return [int(t) for t in np.unique(np.round(np.linspace(T - 1, 0, steps)).astype(np.int64))[::-1]]


@torch.no_grad()
def sample(model, sched, cond_tar, cond_cloud, steps, sampler='ancestral', generator=None):
    """Denoise from pure Gaussian noise over ``steps`` strided timesteps; returns the x0 latent."""
    if sampler not in SAMPLERS:
        raise ParameterError("sampler must be one of {}, got {}".format(', '.join(SAMPLERS), sampler))
    model.eval()
    cond_image = cond_tar[0]
    x = torch.randn(cond_image.shape, generator=generator, dtype=cond_image.dtype)
    timesteps = strided_timesteps(sched.T, steps)
    ab_all = sched.alphas_cumprod

    for i, t in enumerate(timesteps):
        prev = timesteps[i + 1] if i + 1 < len(timesteps) else -1
        ab_t = ab_all[t].item()
        ab_prev = ab_all[prev].item() if prev >= 0 else 1.0
        eps = denoiser_forward(model, x, torch.full((x.shape[0],), t), cond_tar, cond_cloud)
        x0 = ((x - math.sqrt(1 - ab_t) * eps) / math.sqrt(ab_t)).clamp(-1, 1)

        if sampler == 'deterministic':
            eps = (x - math.sqrt(ab_t) * x0) / math.sqrt(1 - ab_t)
            x = math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * eps
            continue

        beta = 1 - ab_t / ab_prev
        mean = (math.sqrt(ab_prev) * beta / (1 - ab_t)) * x0 + (math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab_t)) * x
        if prev < 0:
            x = mean
        else:
            variance = beta * (1 - ab_prev) / (1 - ab_t)
            x = mean + math.sqrt(variance) * torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return x


def save_checkpoint(path, model):
    state = model.state_dict()
    config = model.cfg.to_json().encode('utf-8')
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC + struct.pack('<II', CHECKPOINT_VERSION, len(config)) + config)
        f.write(struct.pack('<I', len(state)))
        for name, tensor in state.items():
            data = tensor.detach().cpu().numpy().astype('<f4')
            encoded = name.encode('utf-8')
            f.write(struct.pack('<I', len(encoded)) + encoded)
            f.write(struct.pack('<I', data.ndim) + struct.pack('<{}I'.format(data.ndim), *data.shape))
            f.write(data.tobytes())
    log.debug("Checkpoint with %d tensors written to %s", len(state), path)


def read_checkpoint(path):
    """(DenoiserConfig, state dict) from a GCKP file."""
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise IngestionError(path, e.strerror or str(e))
    try:
        if data[:4] != CHECKPOINT_MAGIC:
            raise ValueError("missing GCKP header")
        version, config_len = struct.unpack_from('<II', data, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint version {}".format(version))
        offset = 12
        config = DenoiserConfig.from_json(data[offset:offset + config_len].decode('utf-8'))
        offset += config_len
        count, = struct.unpack_from('<I', data, offset)
        offset += 4
        state = {}
        for _ in range(count):
            name_len, = struct.unpack_from('<I', data, offset)
            name = data[offset + 4:offset + 4 + name_len].decode('utf-8')
            offset += 4 + name_len
            rank, = struct.unpack_from('<I', data, offset)
            dims = struct.unpack_from('<{}I'.format(rank), data, offset + 4)
            offset += 4 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            values = np.frombuffer(data, dtype='<f4', count=size, offset=offset)
            offset += 4 * size
            state[name] = torch.from_numpy(values.astype(np.float32).reshape(dims))
        if offset != len(data):
            raise ValueError("{} trailing bytes".format(len(data) - offset))
    except (ValueError, struct.error, UnicodeDecodeError, TypeError) as e:
        raise IngestionError(path, "corrupt checkpoint ({})".format(e))
    return config, state


def check_compatible(expected, found):
    for f in fields(DenoiserConfig):
        a, b = getattr(expected, f.name), getattr(found, f.name)
        if a != b:
            raise ValidationError("checkpoint field {} is {!r} but the model config has {!r}".format(f.name, b, a))


def load_checkpoint(path, expected=None):
    """Model restored from ``path``; ``expected`` must match the stored config when given."""
    config, state = read_checkpoint(path)
    if expected is not None:
        check_compatible(expected, config)
    model = DualBranchDenoiser(config)
    model.load_state_dict(state)
    return model
