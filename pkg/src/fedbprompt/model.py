"""Miniature ViT with per-layer body-distribution-aware prompts.

Token layout inside every block is fixed::

    [class | upper prompts | mid prompts | lower prompts | full prompts | patches]

Patches are flattened row-major over the patch grid. Prompt outputs are
dropped after each block and a fresh per-layer prompt set is spliced in
before the next one.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Iterable

import numpy as np

from . import numerics as nx
from .numerics import Tensor

PART_GROUPS = ("upper", "mid", "lower")
PROMPT_GROUPS = PART_GROUPS + ("full",)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 32
    image_w: int = 16
    patch: int = 4
    channels: int = 3
    d: int = 32
    heads: int = 4
    layers: int = 4
    prompts_per_part: int = 5
    prompts_full: int = 35
    mlp_ratio: int = 4

    def __post_init__(self):
        for field in ("image_h", "image_w", "patch", "channels", "d", "heads", "layers", "mlp_ratio"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"{field} must be positive")
        if self.prompts_per_part < 0 or self.prompts_full < 0:
            raise ConfigError("prompt counts must be non-negative")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(f"image {self.image_h}x{self.image_w} is not divisible by patch {self.patch}")
        if self.n_patches % 4:
            raise ConfigError(f"patch count n={self.n_patches} must be divisible by 4")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch, self.image_w // self.patch

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def n_prompts(self) -> int:
        return 3 * self.prompts_per_part + self.prompts_full

    @property
    def seq_len(self) -> int:
        return 1 + self.n_prompts + self.n_patches

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def group_sizes(self) -> dict[str, int]:
        return {
            "upper": self.prompts_per_part,
            "mid": self.prompts_per_part,
            "lower": self.prompts_per_part,
            "full": self.prompts_full,
        }

    def without_prompts(self) -> "ModelConfig":
        return replace(self, prompts_per_part=0, prompts_full=0)

    def to_dict(self) -> dict:
        return asdict(self)


# The ViT-B/16 geometry used for communication-cost arithmetic (256x128 ReID crops).
VIT_B16 = ModelConfig(image_h=256, image_w=128, patch=16, d=768, heads=12, layers=12)


@dataclass(frozen=True)
class RegionIndexSets:
    """Overlapping patch ranges, 0-based: upper = [0, n/2), mid = [n/4, 3n/4), lower = [n/2, n)."""

    n: int
    upper: range
    mid: range
    lower: range

    def of(self, group: str) -> range:
        return getattr(self, group)


def build_region_index_sets(n: int) -> RegionIndexSets:
    if n <= 0 or n % 4:
        raise ConfigError(f"patch count n={n} must be a positive multiple of 4")
    return RegionIndexSets(
        n=n,
        upper=range(0, n // 2),
        mid=range(n // 4, 3 * n // 4),
        lower=range(n // 2, n),
    )


def token_layout(config: ModelConfig) -> dict[str, range]:
    """Sequence positions of every token group."""
    layout = {"class": range(0, 1)}
    start = 1
    for group, size in config.group_sizes().items():
        layout[group] = range(start, start + size)
        start += size
    layout["patches"] = range(start, start + config.n_patches)
    return layout


def build_attention_mask(config: ModelConfig, regions: RegionIndexSets | None = None) -> np.ndarray:
    """Additive (S, S) mask with 0 / -inf entries.

    A (part prompt, patch) pair is blocked in both directions when the patch
    is outside the prompt's region. Everything else is left open.
    """
    regions = regions or build_region_index_sets(config.n_patches)
    if regions.n != config.n_patches:
        raise ConfigError("region sets do not match the config patch count")
    layout = token_layout(config)
    s = config.seq_len
    mask = np.zeros((s, s))
    patch0 = layout["patches"].start
    for group in PART_GROUPS:
        inside = np.zeros(config.n_patches, dtype=bool)
        inside[list(regions.of(group))] = True
        outside = patch0 + np.flatnonzero(~inside)
        rows = np.asarray(layout[group], dtype=np.int64)
        mask[np.ix_(rows, outside)] = -np.inf
        mask[np.ix_(outside, rows)] = -np.inf
    return mask


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k) + mask) v over the last two axes.

    Returns (output, attention weights).
    """
    dk = q.shape[-1]
    if mask is not None and mask.shape[-2:] != (q.shape[-2], k.shape[-2]):
        raise ValueError(f"mask shape {mask.shape} does not match sequence {q.shape[-2]}x{k.shape[-2]}")
    scores = (q @ nx.transpose(k, _swap_last(k.ndim))) * (1.0 / math.sqrt(dk))
    weights = nx.softmax_rows(scores, mask)
    return weights @ v, weights


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _block_shapes(config: ModelConfig, i: int) -> dict[str, tuple[int, ...]]:
    d, hidden = config.d, config.d * config.mlp_ratio
    p = f"blocks.{i}."
    return {
        p + "norm1.gain": (d,),
        p + "norm1.bias": (d,),
        p + "attn.qkv.weight": (d, 3 * d),
        p + "attn.qkv.bias": (3 * d,),
        p + "attn.proj.weight": (d, d),
        p + "attn.proj.bias": (d,),
        p + "norm2.gain": (d,),
        p + "norm2.bias": (d,),
        p + "mlp.fc1.weight": (d, hidden),
        p + "mlp.fc1.bias": (hidden,),
        p + "mlp.fc2.weight": (hidden, d),
        p + "mlp.fc2.bias": (d,),
    }


def backbone_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = config.d
    shapes = {
        "patch_embed.weight": (config.patch * config.patch * config.channels, d),
        "patch_embed.bias": (d,),
        "pos_embed": (config.n_patches, d),
        "cls_token": (d,),
        "norm.gain": (d,),
        "norm.bias": (d,),
    }
    for i in range(config.layers):
        shapes.update(_block_shapes(config, i))
    return shapes


def prompt_name(layer: int, group: str) -> str:
    return f"prompts.{layer}.{group}"


def prompt_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i in range(config.layers):
        for group, size in config.group_sizes().items():
            if size:
                shapes[prompt_name(i, group)] = (size, config.d)
    return shapes


def is_prompt(name: str) -> bool:
    return name.startswith("prompts.")


def init_backbone(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in backbone_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            out[name] = np.ones(shape)
        elif leaf == "bias":
            out[name] = np.zeros(shape)
        elif leaf == "weight":
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            out[name] = rng.uniform(-limit, limit, size=shape)
        else:
            out[name] = rng.normal(0.0, 0.02, size=shape)
    return out


def init_prompts(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    r = math.sqrt(6.0 / (2 * config.d))
    return {name: rng.uniform(-r, r, size=shape) for name, shape in prompt_shapes(config).items()}


class PromptViT:
    """Parameters plus forward pass. ``params`` maps names to leaf tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = {**backbone_shapes(config), **prompt_shapes(config)}
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter roster mismatch (missing={missing[:3]}, extra={extra[:3]})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.config = config
        self.params = params
        mask = build_attention_mask(config)
        self.mask = mask if np.isneginf(mask).any() else None

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "PromptViT":
        arrays = init_backbone(config, np.random.default_rng([seed, 0]))
        arrays.update(init_prompts(config, np.random.default_rng([seed, 1])))
        return cls.from_arrays(config, arrays)

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "PromptViT":
        return cls(config, {k: Tensor(v, name=k) for k, v in arrays.items()})

    def arrays(self, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        names = sorted(self.params) if names is None else names
        return {k: self.params[k].data.copy() for k in names}

    def backbone_names(self) -> list[str]:
        return sorted(k for k in self.params if not is_prompt(k))

    def prompt_names(self) -> list[str]:
        return sorted(k for k in self.params if is_prompt(k))

    def set_trainable(self, names: Iterable[str]) -> None:
        names = set(names)
        for k, t in self.params.items():
            t.requires_grad = k in names

    def layer_prompts(self, i: int) -> Tensor | None:
        parts = [self.params[prompt_name(i, g)] for g in PROMPT_GROUPS if prompt_name(i, g) in self.params]
        if not parts:
            return None
        return parts[0] if len(parts) == 1 else nx.concat(parts, axis=0)

    def block(self, i: int) -> dict[str, Tensor]:
        prefix = f"blocks.{i}."
        return {k[len(prefix):]: t for k, t in self.params.items() if k.startswith(prefix)}

    def embed(self, images: np.ndarray) -> Tensor:
        """(B, C, H, W) images -> (B, n, d) patch embeddings with positions."""
        cfg = self.config
        tokens = patchify(images, cfg)
        x = tokens @ self.params["patch_embed.weight"] + self.params["patch_embed.bias"]
        return x + self.params["pos_embed"]

    def forward(self, images: np.ndarray, record: list | None = None) -> tuple[Tensor, Tensor]:
        """Returns (L2-normalised feature, pre-normalisation class embedding), both (B, d)."""
        patches = self.embed(images)
        b = patches.shape[0]
        cls_tok = nx.broadcast_to(nx.reshape(self.params["cls_token"], (1, 1, self.config.d)), (b, 1, self.config.d))
        for i in range(self.config.layers):
            cls_tok, patches = forward_layer(
                self.block(i), cls_tok, self.layer_prompts(i), patches, self.mask, self.config.heads, record
            )
        pre = nx.layer_norm(nx.reshape(cls_tok, (b, self.config.d)), self.params["norm.gain"], self.params["norm.bias"])
        return nx.l2_normalize(pre), pre


def patchify(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    expected = (config.channels, config.image_h, config.image_w)
    if images.shape[1:] != expected:
        raise ValueError(f"image shape {images.shape[1:]} does not match config {expected}")
    b, c, _, _ = images.shape
    p = config.patch
    gh, gw = config.grid
    x = images.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * p * p)


def transformer_block(x: Tensor, blk: dict[str, Tensor], mask, heads: int, record: list | None = None) -> Tensor:
    """Pre-norm block: x + MHA(LN(x)), then + MLP(LN(.)). x is (B, S, d)."""
    b, s, d = x.shape
    dh = d // heads
    h = nx.layer_norm(x, blk["norm1.gain"], blk["norm1.bias"])
    qkv = h @ blk["attn.qkv.weight"] + blk["attn.qkv.bias"]
    qkv = nx.transpose(nx.reshape(qkv, (b, s, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att, weights = masked_attention(q, k, v, mask)
    if record is not None:
        record.append(weights.data)
    att = nx.reshape(nx.transpose(att, (0, 2, 1, 3)), (b, s, d))
    x = x + (att @ blk["attn.proj.weight"] + blk["attn.proj.bias"])
    h = nx.layer_norm(x, blk["norm2.gain"], blk["norm2.bias"])
    h = nx.gelu(h @ blk["mlp.fc1.weight"] + blk["mlp.fc1.bias"])
    return x + (h @ blk["mlp.fc2.weight"] + blk["mlp.fc2.bias"])


def forward_layer(
    blk: dict[str, Tensor],
    cls_tok: Tensor,
    prompts: Tensor | None,
    patches: Tensor,
    mask: np.ndarray | None,
    heads: int,
    record: list | None = None,
) -> tuple[Tensor, Tensor]:
    """One layer: run the block on [class, prompts, patches], drop the prompt outputs."""
    b, n, d = patches.shape
    if cls_tok.shape != (b, 1, d):
        raise ValueError(f"class token shape {cls_tok.shape} does not match patches {patches.shape}")
    parts = [cls_tok]
    m = 0
    if prompts is not None:
        m = prompts.shape[0]
        parts.append(nx.broadcast_to(nx.reshape(prompts, (1, m, d)), (b, m, d)))
    parts.append(patches)
    out = transformer_block(nx.concat(parts, axis=1), blk, mask, heads, record)
    return out[:, 0:1, :], out[:, 1 + m:, :]


def extract_feature(model: PromptViT, images: np.ndarray) -> np.ndarray:
    """L2-normalised ReID features as a plain (B, d) array."""
    feat, _ = model.forward(images)
    return feat.data


def count_params(source: ModelConfig | PromptViT | dict) -> tuple[int, int]:
    """(backbone + prompts, prompts only) scalar counts. Classifier heads are client-local and excluded."""
    if isinstance(source, ModelConfig):
        shapes = {**backbone_shapes(source), **prompt_shapes(source)}
    else:
        params = source.params if isinstance(source, PromptViT) else source
        shapes = {k: tuple(np.shape(v.data if isinstance(v, Tensor) else v)) for k, v in params.items()}
    full = sum(math.prod(s) for s in shapes.values())
    prompts = sum(math.prod(s) for k, s in shapes.items() if is_prompt(k))
    return full, prompts
