"""Parameter-efficient adapters for the frozen backbone.

Every stack implements the ``BlockAdapter`` hooks; a variant only overrides
the ones its insertion scheme needs:

- LoRA adds a low-rank update to selected attention projections.
- AdaptFormer adds a bottleneck MLP residual computed from the block input.
- VPT prepends learnable prompt tokens (after the class token) to every
  block's input sequence and strips them from its output.
- ReinLite adds a residual in which each token attends over a small set of
  low-rank learnable tokens.

Residual-style stacks initialise their output factor to zero, so a fresh
stack leaves the backbone's output unchanged.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig
from .tensorio import load_tensors, save_tensors


class AdapterError(ValueError):
    pass


@dataclass(frozen=True)
class LoRA:
    rank: int = 4
    targets: tuple[str, ...] = ("q", "v")
    alpha: float | None = None  # defaults to 2 * rank

    kind = "lora"

    @property
    def scaling(self) -> float:
        return (self.alpha if self.alpha is not None else 2.0 * self.rank) / self.rank


@dataclass(frozen=True)
class AdaptFormer:
    bottleneck: int = 8
    scale: float = 0.1

    kind = "adaptformer"


@dataclass(frozen=True)
class VPT:
    prompt_count: int = 4
    init_std: float = 0.02

    kind = "vpt"


@dataclass(frozen=True)
class ReinLite:
    token_count: int = 8
    rank: int = 4

    kind = "rein_lite"


VARIANTS = {cls.kind: cls for cls in (LoRA, AdaptFormer, VPT, ReinLite)}


def variant_to_dict(variant) -> dict:
    return {"kind": variant.kind, **asdict(variant)}


def variant_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in VARIANTS:
        raise AdapterError(f"unknown adapter kind {kind!r}; expected one of {sorted(VARIANTS)}")
    if "targets" in d:
        d["targets"] = tuple(d["targets"])
    try:
        return VARIANTS[kind](**d)
    except TypeError as exc:
        raise AdapterError(f"bad {kind} adapter fields: {exc}") from None


class BlockAdapter(nn.Module):
    """No-op hooks; subclasses override what they use."""

    variant = None

    def prepend(self, layer: int, x: torch.Tensor) -> torch.Tensor:
        return x

    def strip(self, layer: int, x: torch.Tensor) -> torch.Tensor:
        return x

    def qkv_delta(self, layer: int, name: str, h: torch.Tensor):
        return None

    def residual(self, layer: int, x_prev: torch.Tensor):
        return None


class LoRAStack(BlockAdapter):
    def __init__(self, variant: LoRA, config: BackboneConfig, gen: torch.Generator):
        super().__init__()
        self.variant = variant
        c, r = config.token_dim, variant.rank
        self.layers = nn.ModuleList()
        for _ in range(config.depth):
            layer = nn.ParameterDict()
            for t in variant.targets:
                layer[f"{t}_A"] = nn.Parameter(torch.randn(r, c, generator=gen) / math.sqrt(c))
                layer[f"{t}_B"] = nn.Parameter(torch.zeros(c, r))
            self.layers.append(layer)

    def lora_update(self, layer: int, name: str, h: torch.Tensor) -> torch.Tensor:
        p = self.layers[layer]
        return (h @ p[f"{name}_A"].T) @ p[f"{name}_B"].T * self.variant.scaling

    def qkv_delta(self, layer, name, h):
        if name not in self.variant.targets:
            return None
        return self.lora_update(layer, name, h)


class AdaptFormerStack(BlockAdapter):
    def __init__(self, variant: AdaptFormer, config: BackboneConfig, gen: torch.Generator):
        super().__init__()
        self.variant = variant
        c, b = config.token_dim, variant.bottleneck
        self.down = nn.ModuleList()
        self.up = nn.ModuleList()
        for _ in range(config.depth):
            down = nn.Linear(c, b)
            up = nn.Linear(b, c)
            with torch.no_grad():
                bound = 1.0 / math.sqrt(c)
                down.weight.copy_((torch.rand(b, c, generator=gen) * 2 - 1) * bound)
                down.bias.zero_()
                up.weight.zero_()
                up.bias.zero_()
            self.down.append(down)
            self.up.append(up)

    def residual(self, layer, x_prev):
        return self.variant.scale * self.up[layer](F.relu(self.down[layer](x_prev)))


class VPTStack(BlockAdapter):
    def __init__(self, variant: VPT, config: BackboneConfig, gen: torch.Generator):
        super().__init__()
        self.variant = variant
        shape = (config.depth, variant.prompt_count, config.token_dim)
        self.prompts = nn.Parameter(torch.randn(shape, generator=gen) * variant.init_std)

    def prepend(self, layer, x):
        prompts = self.prompts[layer].to(x.dtype).expand(x.shape[0], -1, -1)
        return torch.cat([x[:, :1], prompts, x[:, 1:]], dim=1)

    def strip(self, layer, x):
        m = self.variant.prompt_count
        return torch.cat([x[:, :1], x[:, 1 + m :]], dim=1)


class ReinLiteStack(BlockAdapter):
    """Tokens ``T = A B`` (t x c, rank r); residual ``softmax(norm(x) T^T / sqrt(c)) A W``.

    ``W`` (r x c) starts at zero.
    """

    def __init__(self, variant: ReinLite, config: BackboneConfig, gen: torch.Generator):
        super().__init__()
        self.variant = variant
        c, t, r = config.token_dim, variant.token_count, variant.rank
        self.token_factor = nn.Parameter(torch.randn(config.depth, t, r, generator=gen))
        self.token_basis = nn.Parameter(torch.randn(config.depth, r, c, generator=gen) / math.sqrt(r))
        self.out_factor = nn.Parameter(torch.zeros(config.depth, r, c))
        self.token_dim = c

    def tokens(self, layer: int) -> torch.Tensor:
        return self.token_factor[layer] @ self.token_basis[layer]

    def residual(self, layer, x_prev):
        h = F.layer_norm(x_prev, (self.token_dim,), eps=1e-6)
        sim = torch.softmax(h @ self.tokens(layer).T / math.sqrt(self.token_dim), dim=-1)
        return sim @ (self.token_factor[layer] @ self.out_factor[layer])


STACKS = {LoRA: LoRAStack, AdaptFormer: AdaptFormerStack, VPT: VPTStack, ReinLite: ReinLiteStack}


def _sizes(variant) -> dict[str, int]:
    if isinstance(variant, LoRA):
        return {"rank": variant.rank}
    if isinstance(variant, AdaptFormer):
        return {"bottleneck": variant.bottleneck}
    if isinstance(variant, VPT):
        return {"prompt_count": variant.prompt_count}
    if isinstance(variant, ReinLite):
        return {"token_count": variant.token_count, "rank": variant.rank}
    raise AdapterError(f"unknown adapter variant {variant!r}")


def check_variant(variant, config: BackboneConfig) -> None:
    c = config.token_dim
    for name, value in _sizes(variant).items():
        if not 1 <= value < c:
            raise AdapterError(f"{variant.kind}.{name}={value} must be in [1, token_dim={c})")
    if isinstance(variant, LoRA):
        bad = [t for t in variant.targets if t not in ("q", "k", "v")]
        if bad or not variant.targets:
            raise AdapterError(f"lora targets must be a non-empty subset of q/k/v, got {variant.targets}")


def init_adapter(variant, config: BackboneConfig, seed: int = 0) -> BlockAdapter:
    check_variant(variant, config)
    gen = torch.Generator().manual_seed(int(seed))
    stack = STACKS[type(variant)](variant, config, gen)
    stack.backbone_config = config
    return stack


def trainable_param_count(stack: BlockAdapter) -> int:
    """Analytic parameter count for ``stack``'s variant and backbone config."""
    v, cfg = stack.variant, stack.backbone_config
    c, m = cfg.token_dim, cfg.depth
    if isinstance(v, LoRA):
        return m * len(v.targets) * 2 * v.rank * c
    if isinstance(v, AdaptFormer):
        return m * (2 * c * v.bottleneck + v.bottleneck + c)
    if isinstance(v, VPT):
        return m * v.prompt_count * c
    if isinstance(v, ReinLite):
        return m * (v.token_count * v.rank + 2 * v.rank * c)
    raise AdapterError(f"unknown adapter variant {v!r}")


def save_adapter(stack: BlockAdapter, path) -> Path:
    path = Path(path)
    save_tensors(path, stack.state_dict())
    sidecar = {"variant": variant_to_dict(stack.variant), "backbone": stack.backbone_config.to_dict()}
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_adapter(path) -> BlockAdapter:
    path = Path(path)
    sidecar = json.loads(path.with_name(path.name + ".json").read_text())
    stack = init_adapter(variant_from_dict(sidecar["variant"]), BackboneConfig.from_dict(sidecar["backbone"]))
    tensors = load_tensors(path)
    expected = stack.state_dict()
    for name, ref in expected.items():
        if name not in tensors:
            raise AdapterError(f"missing adapter tensor {name!r} in {path}")
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise AdapterError(f"shape mismatch for adapter tensor {name!r}: {tensors[name].shape} vs {tuple(ref.shape)}")
    stack.load_state_dict({n: torch.from_numpy(tensors[n]) for n in expected})
    return stack
