"""A small frozen vision transformer with per-block adapter hooks.

Blocks follow the pre-norm layout::

    x' = Attention(LN(x)) + x
    x  = MLP(LN(x')) + x' [+ Adapt(x)]

Adapters plug in through four duck-typed hooks called per layer index
(see ``noisylab.adapters.BlockAdapter``): ``prepend``/``strip`` for prompt
tokens, ``qkv_delta`` for projection updates and ``residual`` for an
additive term computed from the block input.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensorio import ContainerError, load_tensors, save_tensors

LN_EPS = 1e-6


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 2
    token_dim: int = 32
    head_count: int = 4
    patch_size: int = 4
    input_size: tuple[int, int] = (16, 16)
    channels: int = 3
    mlp_ratio: float = 4.0
    layer_scale: bool = False
    final_norm: bool = True
    pixel_mean: tuple[float, ...] | None = None
    pixel_std: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if self.depth < 1:
            raise BackboneError(f"depth must be >= 1, got {self.depth}")
        if self.token_dim % self.head_count:
            raise BackboneError(f"token_dim {self.token_dim} not divisible by head_count {self.head_count}")
        h, w = self.input_size
        if h % self.patch_size or w % self.patch_size:
            raise BackboneError(f"input_size {self.input_size} not divisible by patch_size {self.patch_size}")
        if self.mlp_ratio <= 0:
            raise BackboneError("mlp_ratio must be positive")

    @property
    def head_dim(self) -> int:
        return self.token_dim // self.head_count

    @property
    def patch_count(self) -> int:
        h, w = self.input_size
        return (h // self.patch_size) * (w // self.patch_size)

    @property
    def patch_pixels(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def hidden_dim(self) -> int:
        return int(round(self.token_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        for key in ("input_size", "pixel_mean", "pixel_std"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


class Block(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        c, hidden = config.token_dim, config.hidden_dim
        self.head_count = config.head_count
        self.ln1 = nn.LayerNorm(c, eps=LN_EPS)
        self.q = nn.Linear(c, c)
        self.k = nn.Linear(c, c)
        self.v = nn.Linear(c, c)
        self.proj = nn.Linear(c, c)
        self.ln2 = nn.LayerNorm(c, eps=LN_EPS)
        self.fc1 = nn.Linear(c, hidden)
        self.fc2 = nn.Linear(hidden, c)
        if config.layer_scale:
            self.ls1 = nn.Parameter(torch.ones(c))
            self.ls2 = nn.Parameter(torch.ones(c))
        else:
            self.ls1 = self.ls2 = None


def _project(block: Block, name: str, h: torch.Tensor, adapter, layer: int) -> torch.Tensor:
    out = getattr(block, name)(h)
    if adapter is not None:
        delta = adapter.qkv_delta(layer, name, h)
        if delta is not None:
            out = out + delta
    return out


def attention_block(
    x_prev: torch.Tensor, block: Block, adapter=None, layer: int = 0, return_attention: bool = False
):
    """Multi-head self-attention with residual: ``softmax(QK^T/sqrt(d_head)) V W_o + x_prev``."""
    b, n, c = x_prev.shape
    heads = block.head_count
    dh = c // heads
    h = block.ln1(x_prev)
    q = _project(block, "q", h, adapter, layer).view(b, n, heads, dh).transpose(1, 2)
    k = _project(block, "k", h, adapter, layer).view(b, n, heads, dh).transpose(1, 2)
    v = _project(block, "v", h, adapter, layer).view(b, n, heads, dh).transpose(1, 2)
    attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
    out = block.proj((attn @ v).transpose(1, 2).reshape(b, n, c))
    if block.ls1 is not None:
        out = out * block.ls1
    x_prime = out + x_prev
    return (x_prime, attn) if return_attention else x_prime


def block_forward(
    x_prime: torch.Tensor, block: Block, x_prev: torch.Tensor | None = None, adapter=None, layer: int = 0
) -> torch.Tensor:
    """``MLP(LN(x')) + x'``, plus the adapter's residual ``Adapt(x_prev)`` when it has one."""
    out = block.fc2(F.gelu(block.fc1(block.ln2(x_prime))))
    if block.ls2 is not None:
        out = out * block.ls2
    x_next = out + x_prime
    if adapter is not None:
        if x_prev is None:
            raise BackboneError("adapter residual needs the block input x_prev")
        residual = adapter.residual(layer, x_prev)
        if residual is not None:
            x_next = x_next + residual
    return x_next


class Backbone(nn.Module):
    """ViT feature extractor; parameters are frozen unless ``unfreeze()`` is called."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        c = config.token_dim
        self.patch_embed_proj = nn.Linear(config.patch_pixels, c)
        self.cls_token = nn.Parameter(torch.zeros(c))
        self.pos_embed = nn.Parameter(torch.zeros(1 + config.patch_count, c))
        self.blocks = nn.ModuleList([Block(config) for _ in range(config.depth)])
        self.norm = nn.LayerNorm(c, eps=LN_EPS) if config.final_norm else None
        mean = config.pixel_mean if config.pixel_mean is not None else (0.0,) * config.channels
        std = config.pixel_std if config.pixel_std is not None else (1.0,) * config.channels
        self.register_buffer("pixel_mean", torch.tensor(mean, dtype=torch.float32), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(std, dtype=torch.float32), persistent=False)
        self.loaded_checksum: str | None = None
        self.freeze()

    # -- construction -----------------------------------------------------

    @classmethod
    def synthetic(cls, config: BackboneConfig, seed: int = 0, weight_gain: float = 1.0) -> "Backbone":
        """Seeded random weights standing in for a pre-trained model.

        Linear weights are N(0, gain^2 / fan_in); biases and embeddings are
        small Gaussians; layer norms start at identity.
        """
        model = cls(config)
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in model.named_parameters():
                if name.endswith("weight") and p.ndim == 2:
                    p.copy_(torch.randn(p.shape, generator=gen) * (weight_gain / math.sqrt(p.shape[1])))
                elif name.endswith("bias") and ".ln" not in name and not name.startswith("norm"):
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
                elif name in ("cls_token", "pos_embed"):
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
        model.loaded_checksum = model.checksum()
        return model

    def freeze(self) -> "Backbone":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def unfreeze(self) -> "Backbone":
        for p in self.parameters():
            p.requires_grad_(True)
        return self

    # -- forward ------------------------------------------------------------

    def _to_tensor(self, images) -> torch.Tensor:
        if not torch.is_tensor(images):
            images = np.asarray(images)
            if not images.flags.writeable:
                images = images.copy()
            images = torch.from_numpy(np.ascontiguousarray(images))
        return images.to(self.pos_embed.dtype)

    def patch_embed(self, images) -> torch.Tensor:
        """``(B, H, W, C)`` images to ``(B, 1 + patch_count, c)`` tokens, class token first."""
        cfg = self.config
        x = self._to_tensor(images)
        if x.ndim != 4 or tuple(x.shape[1:]) != (*cfg.input_size, cfg.channels):
            raise BackboneError(
                f"image shape {tuple(x.shape[1:])} does not match input size {(*cfg.input_size, cfg.channels)}"
            )
        b = x.shape[0]
        p = cfg.patch_size
        gh, gw = cfg.input_size[0] // p, cfg.input_size[1] // p
        x = (x - self.pixel_mean) / self.pixel_std
        patches = x.reshape(b, gh, p, gw, p, cfg.channels).permute(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, -1)
        tokens = self.patch_embed_proj(patches)
        cls = self.cls_token.expand(b, 1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed

    def forward_tokens(self, images, adapter=None) -> torch.Tensor:
        x = self.patch_embed(images)
        for layer, block in enumerate(self.blocks):
            if adapter is not None:
                x = adapter.prepend(layer, x)
            x_prime = attention_block(x, block, adapter, layer)
            x = block_forward(x_prime, block, x, adapter, layer)
            if adapter is not None:
                x = adapter.strip(layer, x)
        if self.norm is not None:
            x = self.norm(x)
        return x

    def forward_features(self, images, adapter=None) -> torch.Tensor:
        """Final class token, shape ``(B, c)``."""
        return self.forward_tokens(images, adapter)[:, 0]

    forward = forward_features

    # -- bookkeeping ----------------------------------------------------------

    def tensors(self) -> dict[str, torch.Tensor]:
        return dict(self.state_dict())

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def checksum(self) -> str:
        return tensor_checksum(self.state_dict())

    def save(self, path) -> Path:
        return save_tensors(path, self.state_dict())


def tensor_checksum(tensors) -> str:
    digest = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
        digest.update(name.encode())
        digest.update(str(arr.shape).encode())
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def load_pretrained(weights_path, config: BackboneConfig) -> Backbone:
    """Load a ``VITW1`` checkpoint into a frozen backbone."""
    try:
        tensors = load_tensors(weights_path)
    except FileNotFoundError:
        raise
    except ContainerError as exc:
        raise BackboneError(str(exc)) from exc
    model = Backbone(config)
    expected = model.state_dict()
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise BackboneError(f"missing tensor {missing[0]!r} in {weights_path}")
    unexpected = [n for n in tensors if n not in expected]
    if unexpected:
        raise BackboneError(f"unexpected tensor {unexpected[0]!r} in {weights_path}")
    for name, ref in expected.items():
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise BackboneError(
                f"shape mismatch for tensor {name!r}: checkpoint {tuple(tensors[name].shape)}, "
                f"config expects {tuple(ref.shape)}"
            )
    model.load_state_dict({n: torch.from_numpy(a) for n, a in tensors.items()})
    model.freeze()
    model.loaded_checksum = model.checksum()
    return model


def convert_timm_vit(state_dict, config: BackboneConfig) -> dict[str, np.ndarray]:
    """Map a timm/DINOv2-style ViT state dict onto this backbone's tensor names.

    Handles fused ``attn.qkv`` weights, conv patch embeddings, layer scale
    (``ls1.gamma``) and bicubic interpolation of positional embeddings to the
    configured patch grid.
    """

    def arr(name):
        t = state_dict[name]
        return t.detach().float().cpu().numpy() if torch.is_tensor(t) else np.asarray(t, np.float32)

    c = config.token_dim
    out: dict[str, np.ndarray] = {}
    conv = arr("patch_embed.proj.weight")  # (c, C, p, p)
    if conv.shape[2] != config.patch_size:
        raise BackboneError(f"checkpoint patch size {conv.shape[2]} != config {config.patch_size}")
    out["patch_embed_proj.weight"] = conv.transpose(0, 2, 3, 1).reshape(c, -1)
    out["patch_embed_proj.bias"] = arr("patch_embed.proj.bias")
    out["cls_token"] = arr("cls_token").reshape(c)

    pos = arr("pos_embed").reshape(-1, c)
    cls_pos, grid_pos = pos[:1], pos[1:]
    side = int(round(math.sqrt(len(grid_pos))))
    gh = config.input_size[0] // config.patch_size
    gw = config.input_size[1] // config.patch_size
    if (side, side) != (gh, gw):
        g = torch.from_numpy(grid_pos).reshape(1, side, side, c).permute(0, 3, 1, 2)
        g = F.interpolate(g, size=(gh, gw), mode="bicubic", align_corners=False)
        grid_pos = g.permute(0, 2, 3, 1).reshape(gh * gw, c).numpy()
    out["pos_embed"] = np.concatenate([cls_pos, grid_pos])

    for i in range(config.depth):
        src, dst = f"blocks.{i}.", f"blocks.{i}."
        qkv_w, qkv_b = arr(src + "attn.qkv.weight"), arr(src + "attn.qkv.bias")
        for j, name in enumerate("qkv"):
            out[dst + f"{name}.weight"] = qkv_w[j * c : (j + 1) * c]
            out[dst + f"{name}.bias"] = qkv_b[j * c : (j + 1) * c]
        pairs = {
            "ln1": "norm1", "ln2": "norm2", "proj": "attn.proj", "fc1": "mlp.fc1", "fc2": "mlp.fc2",
        }
        for ours, theirs in pairs.items():
            out[dst + f"{ours}.weight"] = arr(src + f"{theirs}.weight")
            out[dst + f"{ours}.bias"] = arr(src + f"{theirs}.bias")
        if config.layer_scale:
            out[dst + "ls1"] = arr(src + "ls1.gamma")
            out[dst + "ls2"] = arr(src + "ls2.gamma")
    if config.final_norm:
        out["norm.weight"] = arr("norm.weight")
        out["norm.bias"] = arr("norm.bias")
    return out


VIT_SMALL_DINOV2 = dict(
    depth=12,
    token_dim=384,
    head_count=6,
    patch_size=14,
    input_size=(224, 224),
    channels=3,
    mlp_ratio=4.0,
    layer_scale=True,
    final_norm=True,
    pixel_mean=(0.485, 0.456, 0.406),
    pixel_std=(0.229, 0.224, 0.225),
)
