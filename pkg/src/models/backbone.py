"""Desk-scale spiking transformer producing mean-rate feature vectors."""
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from src.errors import ConfigError, DataError, DimensionError
from src.models.dtlif import DTLIFConfig, dtlif_layer
from src.models.tensor import (
    SurrogateKind,
    SurrogateSpec,
    Tensor,
    add,
    batch_norm,
    linear,
    matmul,
    mean,
    reshape,
    scale,
    transpose,
)

logger = logging.getLogger(__name__)


class MixerMode(str, Enum):
    SPIKING_ATTENTION = 'spiking_attention'
    IDENTITY = 'identity'
    RANDOM = 'random'
    FULL = 'full'

    @property
    def uses_attention(self):
        return self in (MixerMode.SPIKING_ATTENTION, MixerMode.FULL)


@dataclass(frozen=True)
class ModelConfig:
    timesteps: int = 4
    embed_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    patch_size: int = 4
    image_size: int = 16
    in_channels: int = 1
    mixer_mode: MixerMode = MixerMode.SPIKING_ATTENTION
    ffn_trainable: bool = True
    random_seed: int = 0
    attn_scale: float = 0.125
    tau: float = 2.0
    phi_init: float = 0.5
    surrogate: str = 'rectangular'
    surrogate_width: float = 0.5
    full_bptt: bool = False
    event_input: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, 'mixer_mode', MixerMode(self.mixer_mode))
        except ValueError:
            raise ConfigError(f'unknown mixer_mode {self.mixer_mode!r}') from None
        for name in ('timesteps', 'embed_dim', 'num_blocks', 'num_heads', 'patch_size', 'image_size', 'in_channels'):
            if getattr(self, name) <= 0:
                raise ConfigError(f'model.{name} must be positive')
        if self.embed_dim % self.num_heads:
            raise ConfigError(f'embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}')
        if self.embed_dim % 4:
            raise ConfigError(f'embed_dim {self.embed_dim} must be divisible by 4 for the gate hidden layer')
        if self.image_size % self.patch_size:
            raise ConfigError(f'image_size {self.image_size} is not divisible by patch_size {self.patch_size}')
        if self.surrogate not in {k.value for k in SurrogateKind} or not self.surrogate_width > 0:
            raise ConfigError(f'invalid surrogate {self.surrogate!r} with width {self.surrogate_width}')
        self.neuron()

    @property
    def num_tokens(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.in_channels * self.patch_size ** 2

    @property
    def hidden_dim(self):
        return 2 * self.embed_dim

    def neuron(self):
        return DTLIFConfig(
            tau=self.tau,
            phi_init=self.phi_init,
            surrogate=SurrogateSpec(self.surrogate, self.surrogate_width),
            full_bptt=self.full_bptt,
        )

    def to_dict(self):
        data = asdict(self)
        data['mixer_mode'] = self.mixer_mode.value
        return data


def dtlif_layout(cfg):
    """Ordered DTLIF layer ids and their channel counts."""
    d = cfg.embed_dim
    layout = OrderedDict(embed=d)
    for i in range(cfg.num_blocks):
        if cfg.mixer_mode is not MixerMode.IDENTITY:
            layout[f'block{i}.in'] = d
        if cfg.mixer_mode.uses_attention:
            for part in ('q', 'k', 'v', 'proj'):
                layout[f'block{i}.attn.{part}'] = d
        layout[f'block{i}.ffn.in'] = d
        layout[f'block{i}.ffn.hidden'] = cfg.hidden_dim
    layout['out'] = d
    return layout


def parameter_count(cfg):
    """Trainable backbone entries, derived from the architecture alone."""
    d, h = cfg.embed_dim, cfg.hidden_dim
    per_block = (d * h + 2 * h) + (h * d + 2 * d)
    if cfg.mixer_mode.uses_attention:
        per_block += 4 * (d * d + 2 * d)
    return cfg.patch_dim * d + 2 * d + cfg.num_blocks * per_block


class BackboneParams:
    """Named backbone tensors: linear weights, norm affines and norm running statistics."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.tensors = OrderedDict()
        d, h = cfg.embed_dim, cfg.hidden_dim
        self._projection('embed', cfg.patch_dim, d, rng)
        for i in range(cfg.num_blocks):
            if cfg.mixer_mode.uses_attention:
                for part in ('q', 'k', 'v', 'proj'):
                    self._projection(f'block{i}.attn.{part}', d, d, rng)
            self._projection(f'block{i}.ffn.fc1', d, h, rng)
            self._projection(f'block{i}.ffn.fc2', h, d, rng)

    def _projection(self, prefix, fan_in, fan_out, rng):
        bound = 1.0 / np.sqrt(fan_in)
        self.tensors[f'{prefix}.weight'] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), name=f'{prefix}.weight')
        self.tensors[f'{prefix}.norm.weight'] = Tensor(np.ones(fan_out), name=f'{prefix}.norm.weight')
        self.tensors[f'{prefix}.norm.bias'] = Tensor(np.zeros(fan_out), name=f'{prefix}.norm.bias')
        self.tensors[f'{prefix}.norm.running_mean'] = Tensor(np.zeros(fan_out), name=f'{prefix}.norm.running_mean')
        self.tensors[f'{prefix}.norm.running_var'] = Tensor(np.ones(fan_out), name=f'{prefix}.norm.running_var')

    def __getitem__(self, name):
        return self.tensors[name]

    def parameters(self, include_ffn=True):
        return [
            t for name, t in self.tensors.items()
            if not name.endswith(('running_mean', 'running_var')) and (include_ffn or '.ffn.' not in name)
        ]

    def project(self, x, prefix, training):
        """linear -> per-channel norm, the current fed to a DTLIF layer."""
        t = self.tensors
        return batch_norm(
            matmul(x, t[f'{prefix}.weight']),
            t[f'{prefix}.norm.weight'],
            t[f'{prefix}.norm.bias'],
            t[f'{prefix}.norm.running_mean'],
            t[f'{prefix}.norm.running_var'],
            training,
        )


def encode_input(x, timesteps):
    """Direct coding: repeat a [0, 1] image (or batch of images) across timesteps."""
    x = np.asarray(x)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise DataError(f'pixel values must lie in [0, 1], got [{x.min()}, {x.max()}]')
    return Tensor(np.broadcast_to(x, (timesteps,) + x.shape))


def patchify(frames, patch_size):
    """[T, B, C, H, W] -> [T, B, N, C*p*p] non-overlapping patches in row-major token order."""
    t, b, c, h, w = frames.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f'{h}x{w} frames are not divisible into {patch_size}x{patch_size} patches')
    p = patch_size
    grid = frames.reshape(t, b, c, h // p, p, w // p, p).transpose(0, 1, 3, 5, 2, 4, 6)
    return np.ascontiguousarray(grid.reshape(t, b, (h // p) * (w // p), c * p * p))


def patch_embed(frames, params, bank, cfg, state, training=False):
    data = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    if data.ndim != 5:
        raise DimensionError(f'patch_embed expects [T, B, C, H, W] frames, got {data.shape}')
    tokens = Tensor(patchify(data, cfg.patch_size))
    return dtlif_layer(params.project(tokens, 'embed', training), bank, 'embed', cfg.neuron(), state)


def attention_core(q, k, v, num_heads, attn_scale):
    """(Q K^T) V * scale per head without softmax; inputs [T, B, N, D]."""
    t, b, n, d = q.shape
    dh = d // num_heads

    def heads(x):
        return transpose(reshape(x, (t, b, n, num_heads, dh)), (0, 1, 3, 2, 4))

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = matmul(qh, transpose(kh, (0, 1, 2, 4, 3)))
    mixed = scale(matmul(scores, vh), attn_scale)
    return reshape(transpose(mixed, (0, 1, 3, 2, 4)), (t, b, n, d))


def spiking_self_attention(spikes, params, bank, cfg, state, block, training=False):
    neuron = cfg.neuron()
    prefix = f'block{block}.attn'
    q, k, v = (
        dtlif_layer(params.project(spikes, f'{prefix}.{part}', training), bank, f'{prefix}.{part}', neuron, state)
        for part in ('q', 'k', 'v')
    )
    mixed = attention_core(q, k, v, cfg.num_heads, cfg.attn_scale)
    return dtlif_layer(params.project(mixed, f'{prefix}.proj', training), bank, f'{prefix}.proj', neuron, state)


def mixer_dispatch(spikes, cfg, params, bank, state, block, training=False, rng=None):
    if cfg.mixer_mode.uses_attention:
        return spiking_self_attention(spikes, params, bank, cfg, state, block, training)
    if cfg.mixer_mode is MixerMode.IDENTITY:
        return spikes
    if rng is None:
        raise ConfigError('random mixer needs the run-seeded generator')
    return Tensor(rng.random(spikes.shape))


def token_mixer(stream, cfg, params, bank, state, block, training=False, rng=None):
    """Residual token-mixing sublayer. Identity mode leaves the stream as it is."""
    if cfg.mixer_mode is MixerMode.IDENTITY:
        return mixer_dispatch(stream, cfg, params, bank, state, block, training, rng)
    s = dtlif_layer(stream, bank, f'block{block}.in', cfg.neuron(), state)
    return add(stream, mixer_dispatch(s, cfg, params, bank, state, block, training, rng))


def feed_forward(x, params, bank, cfg, state, block, training=False):
    neuron = cfg.neuron()
    prefix = f'block{block}.ffn'
    s = dtlif_layer(x, bank, f'{prefix}.in', neuron, state)
    hidden = dtlif_layer(params.project(s, f'{prefix}.fc1', training), bank, f'{prefix}.hidden', neuron, state)
    return params.project(hidden, f'{prefix}.fc2', training)


def backbone_forward(x, cfg, params, bank, state, training=False, rng=None):
    """Features f(x) in [0, 1]^D: mean spike rate of the final DTLIF layer over time and tokens.

    ``x`` is a batch of images [B, C, H, W] in [0, 1], or a batch of
    binary frames [T, B, C, H, W] that skip direct coding when ``cfg.event_input`` is set.
    """
    state.reset()
    frames = Tensor(np.asarray(x)) if cfg.event_input else encode_input(x, cfg.timesteps)
    stream = patch_embed(frames, params, bank, cfg, state, training)
    neuron = cfg.neuron()
    for i in range(cfg.num_blocks):
        # residual stream carries real-valued currents; DTLIF outputs stay binary
        stream = token_mixer(stream, cfg, params, bank, state, i, training, rng)
        stream = add(stream, feed_forward(stream, params, bank, cfg, state, i, training))
    out = dtlif_layer(stream, bank, 'out', neuron, state)
    return mean(out, axis=(0, 2))


def head_forward(f, weight, bias):
    if f.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise DimensionError(f'head: features {f.shape} vs weight {weight.shape} and bias {bias.shape}')
    return linear(f, weight, bias)
