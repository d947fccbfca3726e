"""Hierarchical synthetic ViT search space: sampling, validation, serialization.

A sampled architecture has six nominal stages. The first ``merge_k`` stages
are collapsed into one whose patch embedding has stride ``2**merge_k``; every
later stage downsamples by 2. Stage ``i`` therefore always runs at resolution
``H / 2**i`` no matter how many stages were merged.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError

N_STAGES = 6

SEPCONV = "SepConv"
ATTENTION = "Attention"
BATCHNORM = "BatchNorm"
LAYERNORM = "LayerNorm"
GELU = "GELU"
SILU = "SiLU"

TOKEN_MIXERS = (SEPCONV, ATTENTION)
NORMS = (BATCHNORM, LAYERNORM)
ACTIVATIONS = (GELU, SILU)


@dataclass(frozen=True)
class SearchSpaceSpec:
    """Ranges of the search space, indexed by nominal stage (1..6).

    Integer ranges are inclusive ``(low, high)`` pairs.
    """

    input_sizes: tuple = (224, 256)
    merge_k: tuple = (2, 4)
    embedding_dim: tuple = ((16, 32), (32, 80), (64, 192), (192, 384), (256, 768), (384, 1024))
    mlp_ratio: tuple = ((1, 4), (2, 10), (2, 10), (1, 4), (1, 4), (1, 2))
    kernel_sizes: tuple = (1, 3, 5, 7)
    max_expansion: tuple = (8, 8, 8, 8, 4, 2)
    max_heads: int = 12
    sr_ratio: tuple = ((2, 16), (1, 4), (1, 2), (1, 1), (1, 1), (1, 1))
    token_mixers: tuple = TOKEN_MIXERS
    norms: tuple = NORMS
    activations: tuple = ACTIVATIONS
    num_classes: int = 1000

    @classmethod
    def from_dict(cls, data: dict) -> "SearchSpaceSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown search space keys: {sorted(unknown)}")
        return cls(**{k: _freeze(v) for k, v in data.items()})

    @classmethod
    def from_json(cls, path) -> "SearchSpaceSpec":
        """Load a JSON file; keys present override the defaults."""
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def check(self) -> None:
        """Raise ConfigurationError if any range is empty or inconsistent."""
        problems = []
        if not self.input_sizes:
            problems.append("input_sizes is empty")
        lo, hi = self.merge_k
        if lo > hi or lo < 1 or hi > N_STAGES:
            problems.append(f"merge_k range {self.merge_k} invalid")
        for name in ("embedding_dim", "mlp_ratio", "sr_ratio", "max_expansion"):
            if len(getattr(self, name)) != N_STAGES:
                problems.append(f"{name} needs {N_STAGES} entries")
        if problems:
            raise ConfigurationError("; ".join(problems))
        for i, (lo, hi) in enumerate(self.embedding_dim, 1):
            if lo > hi or lo < 1:
                problems.append(f"embedding_dim[{i}] range ({lo}, {hi}) is empty")
        for i, (lo, hi) in enumerate(self.mlp_ratio, 1):
            if lo > hi or lo < 1:
                problems.append(f"mlp_ratio[{i}] range ({lo}, {hi}) is empty")
        for i, (lo, hi) in enumerate(self.sr_ratio, 1):
            if lo > hi or lo < 1:
                problems.append(f"sr_ratio[{i}] range ({lo}, {hi}) is empty")
        for i, e in enumerate(self.max_expansion, 1):
            if e < 1:
                problems.append(f"max_expansion[{i}] = {e} < 1")
        # monotone dims must be reachable: every range must reach the previous low
        for i in range(1, N_STAGES):
            if self.embedding_dim[i][1] < self.embedding_dim[i - 1][0]:
                problems.append(f"embedding_dim[{i + 1}] cannot be >= embedding_dim[{i}]")
        if self.max_heads < 1:
            problems.append("max_heads < 1")
        for name in ("kernel_sizes", "token_mixers", "norms", "activations"):
            if not getattr(self, name):
                problems.append(f"{name} is empty")
        if self.num_classes < 1:
            problems.append("num_classes < 1")
        if problems:
            raise ConfigurationError("; ".join(problems))


DEFAULT_SPACE = SearchSpaceSpec()


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


@dataclass(frozen=True)
class SepConvParams:
    kernel_size: int
    expansion_ratio: int


@dataclass(frozen=True)
class AttentionParams:
    num_heads: int
    sr_ratio: int = 1


@dataclass(frozen=True)
class BlockConfig:
    original_index: int
    embedding_dim: int
    token_mixer: str
    norm: str
    activation: str
    mlp_ratio: int
    sepconv: Optional[SepConvParams] = None
    attention: Optional[AttentionParams] = None


@dataclass(frozen=True)
class ArchConfig:
    input_height: int
    input_width: int
    merge_k: int
    blocks: tuple
    num_classes: int = 1000
    seed: int = 0

    @property
    def arch_id(self) -> str:
        digest = hashlib.sha256(self.to_json().encode()).hexdigest()
        return "vit-" + digest[:12]

    def first_patch(self) -> int:
        return 2 ** self.merge_k

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        """Canonical, key-sorted JSON document."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ArchConfig":
        blocks = []
        for b in data["blocks"]:
            b = dict(b)
            sc = b.pop("sepconv", None)
            at = b.pop("attention", None)
            blocks.append(
                BlockConfig(
                    **b,
                    sepconv=SepConvParams(**sc) if sc else None,
                    attention=AttentionParams(**at) if at else None,
                )
            )
        rest = {k: v for k, v in data.items() if k != "blocks"}
        return cls(blocks=tuple(blocks), **rest)

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        return cls.from_dict(json.loads(text))


def load_arch(path) -> ArchConfig:
    return ArchConfig.from_json(Path(path).read_text())


def _randint(rng: np.random.Generator, lo: int, hi: int) -> int:
    return int(rng.integers(lo, hi + 1))


def _choice(rng: np.random.Generator, options: Sequence):
    return options[int(rng.integers(len(options)))]


def _largest_divisor_at_most(n: int, cap: int) -> int:
    for h in range(min(cap, n), 0, -1):
        if n % h == 0:
            return h
    return 1


def sample_arch(seed: int, space: SearchSpaceSpec = DEFAULT_SPACE) -> ArchConfig:
    """Draw one architecture; a pure function of ``(seed, space)``.

    Every choice is uniform over its set or integer range. Embedding dims are
    drawn from ``[max(low_i, previous), high_i]`` so they never decrease, and
    the head count is rounded down to a divisor of the embedding dim.
    """
    space.check()
    rng = np.random.default_rng(seed)
    height = int(_choice(rng, space.input_sizes))
    width = height
    merge_k = _randint(rng, *space.merge_k)

    blocks = []
    prev_dim = 0
    for i in range(merge_k, N_STAGES + 1):
        lo, hi = space.embedding_dim[i - 1]
        dim = _randint(rng, max(lo, prev_dim), hi)
        prev_dim = dim
        mixer = _choice(rng, space.token_mixers)
        norm = _choice(rng, space.norms)
        act = _choice(rng, space.activations)
        mlp_ratio = _randint(rng, *space.mlp_ratio[i - 1])
        sepconv = attention = None
        if mixer == SEPCONV:
            kernel = int(_choice(rng, space.kernel_sizes))
            expansion = _randint(rng, 1, space.max_expansion[i - 1])
            sepconv = SepConvParams(kernel_size=kernel, expansion_ratio=expansion)
        else:
            heads = _largest_divisor_at_most(dim, _randint(rng, 1, space.max_heads))
            sr = _randint(rng, *space.sr_ratio[i - 1])
            attention = AttentionParams(num_heads=heads, sr_ratio=sr)
        blocks.append(
            BlockConfig(
                original_index=i,
                embedding_dim=dim,
                token_mixer=mixer,
                norm=norm,
                activation=act,
                mlp_ratio=mlp_ratio,
                sepconv=sepconv,
                attention=attention,
            )
        )
    return ArchConfig(
        input_height=height,
        input_width=width,
        merge_k=merge_k,
        blocks=tuple(blocks),
        num_classes=space.num_classes,
        seed=int(seed),
    )


def _in_range(value, bounds) -> bool:
    return bounds[0] <= value <= bounds[1]


def validate_block(block: BlockConfig, space: SearchSpaceSpec = DEFAULT_SPACE) -> list:
    """Range checks that depend only on the block and its nominal index."""
    out = []
    i = block.original_index
    tag = f"block[{i}]"
    if not 1 <= i <= N_STAGES:
        return [f"{tag}.original_index {i} outside [1, {N_STAGES}]"]
    dim_range = list(space.embedding_dim[i - 1])
    if not _in_range(block.embedding_dim, dim_range):
        out.append(f"{tag}.embedding_dim {block.embedding_dim} outside range {dim_range}")
    mlp_range = list(space.mlp_ratio[i - 1])
    if not _in_range(block.mlp_ratio, mlp_range):
        out.append(f"{tag}.mlp_ratio {block.mlp_ratio} outside range {mlp_range}")
    if block.norm not in space.norms:
        out.append(f"{tag}.norm {block.norm!r} not in {list(space.norms)}")
    if block.activation not in space.activations:
        out.append(f"{tag}.activation {block.activation!r} not in {list(space.activations)}")
    if block.token_mixer not in space.token_mixers:
        out.append(f"{tag}.token_mixer {block.token_mixer!r} not in {list(space.token_mixers)}")

    if block.token_mixer == SEPCONV:
        if block.sepconv is None or block.attention is not None:
            out.append(f"{tag}: SepConv mixer requires sepconv params only")
        if block.sepconv is not None:
            k = block.sepconv.kernel_size
            if k not in space.kernel_sizes:
                out.append(f"{tag}.sepconv.kernel_size {k} not in set {{{', '.join(map(str, space.kernel_sizes))}}}")
            e_range = [1, space.max_expansion[i - 1]]
            if not _in_range(block.sepconv.expansion_ratio, e_range):
                out.append(f"{tag}.sepconv.expansion_ratio {block.sepconv.expansion_ratio} outside range {e_range}")
    elif block.token_mixer == ATTENTION:
        if block.attention is None or block.sepconv is not None:
            out.append(f"{tag}: Attention mixer requires attention params only")
        if block.attention is not None:
            h = block.attention.num_heads
            if not 1 <= h <= space.max_heads:
                out.append(f"{tag}.attention.num_heads {h} outside range [1, {space.max_heads}]")
            elif block.embedding_dim % h:
                out.append(f"{tag}.attention.num_heads {h} does not divide embedding_dim {block.embedding_dim}")
            sr_range = list(space.sr_ratio[i - 1])
            if not _in_range(block.attention.sr_ratio, sr_range):
                out.append(f"{tag}.attention.sr_ratio {block.attention.sr_ratio} outside range {sr_range}")
    return out


def validate_arch(cfg: ArchConfig, space: SearchSpaceSpec = DEFAULT_SPACE) -> list:
    """Return human-readable invariant violations; empty iff the config is valid."""
    out = []
    if cfg.input_height not in space.input_sizes:
        out.append(f"input_height {cfg.input_height} not in set {set(space.input_sizes)}")
    if cfg.input_width not in space.input_sizes:
        out.append(f"input_width {cfg.input_width} not in set {set(space.input_sizes)}")
    if not _in_range(cfg.merge_k, space.merge_k):
        out.append(f"merge_k {cfg.merge_k} outside range {list(space.merge_k)}")
    expected = N_STAGES + 1 - cfg.merge_k
    if len(cfg.blocks) != expected:
        out.append(f"blocks has length {len(cfg.blocks)}, expected {expected} for merge_k={cfg.merge_k}")
    if cfg.num_classes < 1:
        out.append(f"num_classes {cfg.num_classes} < 1")
    prev = None
    for j, block in enumerate(cfg.blocks):
        want = cfg.merge_k + j
        if block.original_index != want:
            out.append(f"blocks[{j}].original_index {block.original_index} != {want}")
        out.extend(validate_block(block, space))
        if prev is not None and block.embedding_dim < prev:
            out.append(f"blocks[{j}].embedding_dim {block.embedding_dim} decreases from {prev}")
        prev = block.embedding_dim
    return out


def with_block(cfg: ArchConfig, j: int, **changes) -> ArchConfig:
    """Copy of ``cfg`` with fields of block ``j`` replaced."""
    blocks = list(cfg.blocks)
    blocks[j] = replace(blocks[j], **changes)
    return replace(cfg, blocks=tuple(blocks))
