"""Video tokenization, scan orderings and the bidirectional Mamba block."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .ssm import SelectiveProjections, dt_rank, selective_scan
from .tensor import Parameter, Tensor

SPATIAL_FIRST = "spatial-first"
TEMPORAL_FIRST = "temporal-first"
ORDERS = (SPATIAL_FIRST, TEMPORAL_FIRST)


# ---------------------------------------------------------------------------
# scan orderings


def order_permutation(grid: tuple[int, int, int], order: str) -> np.ndarray:
    """perm[k] = natural index of the token visited k-th.

    Natural index of frame ``ti`` and in-frame position ``s`` is ``ti*h*w + s``,
    which is also the spatial-first order.
    """
    t, h, w = grid
    hw = h * w
    k = np.arange(t * hw)
    if order == SPATIAL_FIRST:
        return k
    if order == TEMPORAL_FIRST:
        s, ti = np.divmod(k, t)
        return ti * hw + s
    raise ValueError(f"unknown scan order {order!r}")


def visit_order(grid: tuple[int, int, int], order: str) -> list[tuple[int, int]]:
    """(frame, spatial position) pairs in scan order."""
    hw = grid[1] * grid[2]
    return [divmod(int(i), hw) for i in order_permutation(grid, order)]


@dataclass
class TokenSequence:
    tokens: Tensor                 # [..., L+1, C], CLS at index 0
    grid: tuple[int, int, int]
    order: str = SPATIAL_FIRST
    permutation: np.ndarray | None = None

    def __post_init__(self):
        if self.permutation is None:
            self.permutation = order_permutation(self.grid, self.order)

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(len(self.permutation))
        return inv

    @property
    def cls(self) -> Tensor:
        return self.tokens[..., 0, :]

    @property
    def patches(self) -> Tensor:
        return self.tokens[..., 1:, :]

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return replace(self, tokens=tokens)

    def with_cls(self, cls: Tensor) -> "TokenSequence":
        lead = self.tokens.shape[:-2]
        head = T.reshape(cls, lead + (1, cls.shape[-1]))
        return self.with_tokens(T.concat([head, self.patches], axis=-2))

    def natural_patches(self) -> Tensor:
        """Non-CLS tokens in natural (frame, row, col) order."""
        return T.take(self.patches, self.inverse, axis=-2)


def reorder(seq: TokenSequence, target: str) -> TokenSequence:
    perm = order_permutation(seq.grid, target)
    src = seq.inverse[perm]
    index = np.concatenate([[0], 1 + src])
    return TokenSequence(T.take(seq.tokens, index, axis=-2), seq.grid, target, perm)


# ---------------------------------------------------------------------------
# tokenizer


@dataclass
class Tokenizer:
    kernel: Parameter          # [C, 3, pt, ph, pw]
    bias: Parameter            # [C]
    cls: Parameter             # [C]
    pos_spatial: Parameter     # [h*w + 1, C]
    pos_temporal: Parameter    # [t, C]

    @property
    def patch(self) -> tuple[int, int, int]:
        return tuple(self.kernel.shape[2:])

    def parameters(self) -> list[Parameter]:
        return [self.kernel, self.bias, self.cls, self.pos_spatial, self.pos_temporal]

    @classmethod
    def init(cls, dim: int, frames: int, size: tuple[int, int], patch: tuple[int, int, int],
             rng: np.random.Generator, name: str = "") -> "Tokenizer":
        pt, ph, pw = patch
        H, W = size
        if frames % pt or H % ph or W % pw:
            raise ValueError(f"input {frames}x{H}x{W} not divisible by patch {patch}")
        t, hw = frames // pt, (H // ph) * (W // pw)
        fan_in = 3 * pt * ph * pw
        p = f"{name}." if name else ""
        return cls(
            Parameter(rng.normal(0, fan_in ** -0.5, (dim, 3, pt, ph, pw)), p + "patch_embed"),
            Parameter(np.zeros(dim), p + "patch_bias"),
            Parameter(np.zeros(dim), p + "cls_token"),
            Parameter(rng.normal(0, 0.02, (hw + 1, dim)), p + "pos_spatial"),
            Parameter(rng.normal(0, 0.02, (t, dim)), p + "pos_temporal"),
        )


def tokenize(video, tok: Tokenizer) -> TokenSequence:
    """Patchify, prepend CLS, add spatial and per-frame temporal embeddings.

    ``video`` is ``[..., 3, T, H, W]``. The sequence comes out spatial-first.
    """
    video = video if isinstance(video, Tensor) else Tensor(video)
    pt, ph, pw = tok.patch
    _, Tf, H, W = video.shape[-4:]
    if Tf % pt or H % ph or W % pw:
        raise ValueError(f"video {Tf}x{H}x{W} not divisible by patch {tok.patch}")
    grid = (Tf // pt, H // ph, W // pw)
    t, hw = grid[0], grid[1] * grid[2]
    if tok.pos_temporal.shape[0] != t or tok.pos_spatial.shape[0] != hw + 1:
        raise ValueError(f"embedding tables do not fit grid {grid}")
    C = tok.kernel.shape[0]
    x = T.conv(video, tok.kernel, "patchify-3d", tok.bias)          # [..., L, C]
    pos = T.reshape(tok.pos_spatial[1:], (1, hw, C)) + T.reshape(tok.pos_temporal, (t, 1, C))
    x = x + T.reshape(pos, (t * hw, C))
    lead = x.shape[:-2]
    cls = T.Tensor(np.zeros(lead + (1, C))) + (tok.cls + tok.pos_spatial[0])
    return TokenSequence(T.concat([cls, x], axis=-2), grid, SPATIAL_FIRST)


# ---------------------------------------------------------------------------
# bidirectional block


@dataclass
class DirectionParams:
    conv_w: Parameter            # [E*C, K]
    conv_b: Parameter            # [E*C]
    proj: SelectiveProjections

    def parameters(self) -> list[Parameter]:
        return [self.conv_w, self.conv_b] + self.proj.parameters()


@dataclass
class BlockParams:
    norm: Parameter              # [C]
    in_proj: Parameter           # [C, 2*E*C]
    out_proj: Parameter          # [E*C, C]
    fwd: DirectionParams
    bwd: DirectionParams

    @property
    def inner(self) -> int:
        return self.out_proj.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.norm, self.in_proj, self.out_proj] + self.fwd.parameters() + self.bwd.parameters()

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, name: str = "", expand: int = 2,
             d_state: int = 16, d_conv: int = 4, scan_mode: str = "zoh") -> "BlockParams":
        inner = expand * dim
        p = f"{name}." if name else ""

        def direction(tag):
            return DirectionParams(
                Parameter(rng.uniform(-1, 1, (inner, d_conv)) * d_conv ** -0.5, f"{p}{tag}.conv_w"),
                Parameter(np.zeros(inner), f"{p}{tag}.conv_b"),
                SelectiveProjections.init(inner, d_state, rng, f"{p}{tag}", rank=dt_rank(dim), mode=scan_mode),
            )

        return cls(
            Parameter(np.ones(dim), p + "norm"),
            Parameter(rng.normal(0, dim ** -0.5, (dim, 2 * inner)), p + "in_proj"),
            Parameter(rng.normal(0, inner ** -0.5, (inner, dim)), p + "out_proj"),
            direction("fwd"),
            direction("bwd"),
        )


def direction_path(x: Tensor, p: DirectionParams, reverse: bool) -> Tensor:
    """Causal conv -> SiLU -> selective scan, optionally over the reversed order."""
    if reverse:
        x = T.flip(x, -2)
    y = selective_scan(T.silu(T.conv(x, p.conv_w, "depthwise-1d-causal", p.conv_b)), p.proj)
    return T.flip(y, -2) if reverse else y


def block_forward(seq: TokenSequence, p: BlockParams) -> TokenSequence:
    x = seq.tokens
    if x.shape[-1] != p.norm.shape[0]:
        raise ValueError(f"block expects {p.norm.shape[0]} channels, got {x.shape[-1]}")
    u = T.rms_norm(x, p.norm)
    xi, z = T.split(u @ p.in_proj, [p.inner, p.inner], axis=-1)
    gate = T.silu(z)
    y = direction_path(xi, p.fwd, False) * gate + direction_path(xi, p.bwd, True) * gate
    return seq.with_tokens(x + y @ p.out_proj)


def branch_forward(seq: TokenSequence, blocks: Sequence[BlockParams], skips: bool = False):
    """Run a block stack; returns (final sequence, CLS after every block).

    With ``skips`` the output of block l-2 is added to the output of block l.
    """
    outs: list[TokenSequence] = []
    cls_list = []
    for l, p in enumerate(blocks):
        seq = block_forward(seq, p)
        if skips and l >= 2:
            seq = seq.with_tokens(seq.tokens + outs[l - 2].tokens)
        outs.append(seq)
        cls_list.append(seq.cls)
    return seq, cls_list
