"""Dual-branch VideoMamba with gated class-token fusion.

Branch 1 scans spatial-first, branch 2 temporal-first. Both branches advance
one block at a time; after depth ``l`` (for every scheduled ``l``) the lateral
fusion rewrites one branch's CLS token (or, for ``full-hidden-concat``, all of
its tokens) before the next block reads it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import GATED_VARIANTS, ModelConfig
from .encoder import (
    TEMPORAL_FIRST,
    BlockParams,
    TokenSequence,
    Tokenizer,
    block_forward,
    reorder,
    tokenize,
)
from .tensor import Parameter, Tensor

LABELS = ("violent", "non-violent")


def gctf_fuse(cls1: Tensor, cls2: Tensor, gate: Tensor) -> Tensor:
    """sigmoid(gate) * cls2 + (1 - sigmoid(gate)) * cls1."""
    if cls1.shape[-1] != cls2.shape[-1] or cls2.shape[-1] != gate.shape[-1]:
        raise ValueError(f"gate fusion dims differ: {cls1.shape}, {cls2.shape}, {gate.shape}")
    s = T.sigmoid(gate)
    return s * cls2 + (1.0 - s) * cls1


def lateral_schedule(placement: str, layers: int) -> list[int]:
    """Depths after which the branches exchange information.

    The final block never feeds a lateral connection, so every placement lives
    in ``0 .. layers-2``.
    """
    if layers < 1:
        raise ValueError("layers must be >= 1")
    last = layers - 2
    if last < 0:
        return []
    table = {
        "continuous": range(0, last + 1),
        "even": range(0, last + 1, 2),
        "odd": range(1, last + 1, 2),
        "first-only": [0],
        "last-only": [last],
        "middle": [(layers - 1) // 2],
        "begin-and-end": sorted({0, last}),
    }
    if placement not in table:
        raise ValueError(f"unknown lateral placement {placement!r}")
    return list(table[placement])


def cross_attention(query: Tensor, keys_values: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Single-head attention of one query token over a token sequence.

    query ``[..., d]``, keys_values ``[..., S, d]``; returns ``[..., d]``.
    """
    d = query.shape[-1]
    q = T.reshape(query @ wq, query.shape[:-1] + (1, d))
    k = keys_values @ wk
    v = keys_values @ wv
    scores = (q @ T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * (d ** -0.5)
    out = T.softmax(scores, axis=-1) @ v
    return T.reshape(out, query.shape)


@dataclass
class Prediction:
    logits: Tensor
    Z: Tensor
    trace: dict = field(default_factory=dict, repr=False)

    @property
    def classes(self) -> np.ndarray:
        return np.argmax(self.logits.data, axis=-1)

    @property
    def label(self):
        c = self.classes
        return LABELS[int(c)] if np.ndim(c) == 0 else [LABELS[int(i)] for i in c]


class DualBranchModel:
    """Parameters plus forward pass for a :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = cfg = config
        rng = rng if rng is not None else np.random.default_rng(cfg.init_seed)
        kw = dict(expand=cfg.expand, d_state=cfg.d_state, d_conv=cfg.d_conv, scan_mode=cfg.scan_mode)
        self.tokenizers: list[Tokenizer] = []
        self.blocks: list[list[BlockParams]] = []
        self.final_norms: list[Parameter] = []
        for b in range(cfg.branches):
            name = f"branch{b + 1}"
            self.tokenizers.append(Tokenizer.init(cfg.d, cfg.frames[b], cfg.size, cfg.patch, rng, name + ".tokenizer"))
            self.blocks.append([BlockParams.init(cfg.d, rng, f"{name}.block{l}", **kw) for l in range(cfg.layers)])
            self.final_norms.append(Parameter(np.ones(cfg.d), f"{name}.final_norm"))

        self.schedule = lateral_schedule(cfg.lateral_placement, cfg.layers) if cfg.branches == 2 else []
        bank = lateral_schedule("continuous", cfg.layers) if cfg.full_gate_bank else self.schedule
        self.lateral: dict[int, dict[str, Parameter]] = {
            l: _lateral_params(cfg, l, rng) for l in (bank if cfg.branches == 2 else [])
        }
        self.final = _final_params(cfg, rng) if cfg.branches == 2 else {}
        zdim = fused_dim(cfg)
        self.head_w = Parameter(rng.normal(0, zdim ** -0.5, (zdim, cfg.num_classes)), "head.weight")
        self.head_b = Parameter(np.zeros(cfg.num_classes), "head.bias")

    # -- parameter bookkeeping -------------------------------------------
    def parameters(self) -> list[Parameter]:
        ps: list[Parameter] = []
        for b in range(self.config.branches):
            ps += self.tokenizers[b].parameters()
            for blk in self.blocks[b]:
                ps += blk.parameters()
            ps.append(self.final_norms[b])
        for l in sorted(self.lateral):
            ps += list(self.lateral[l].values())
        ps += list(self.final.values())
        ps += [self.head_w, self.head_b]
        return ps

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise RuntimeError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]

    def gates(self) -> list[Parameter]:
        return [ps["gate"] for ps in self.lateral.values() if "gate" in ps]

    # -- forward ---------------------------------------------------------
    def branch_inputs(self, video) -> list[Tensor]:
        """Each branch's uniformly strided frame subset of ``video``."""
        video = video if isinstance(video, Tensor) else Tensor(video)
        Tin = video.shape[-3]
        outs = []
        for b in range(self.config.branches):
            Tb = self.config.frames[b]
            if Tb == Tin:
                outs.append(video)
                continue
            if Tb > Tin:
                raise ValueError(f"branch {b + 1} wants {Tb} frames, video has {Tin}")
            idx = (np.arange(Tb) * Tin) // Tb
            outs.append(T.take(video, idx, axis=-3))
        return outs

    def embed(self, video) -> list[TokenSequence]:
        inputs = self.branch_inputs(video)
        seqs = [tokenize(inputs[0], self.tokenizers[0])]
        if self.config.branches == 2:
            seqs.append(reorder(tokenize(inputs[1], self.tokenizers[1]), TEMPORAL_FIRST))
        return seqs

    def forward(self, video, lateral: bool = True) -> Prediction:
        """``video`` is ``[..., 3, T, H, W]`` in [0, 1]. ``lateral=False`` cuts
        every lateral connection (the branches then run independently)."""
        cfg = self.config
        seqs = self.embed(video)
        history: list[list[TokenSequence]] = [[] for _ in seqs]
        schedule = set(self.schedule) if lateral else set()
        for l in range(cfg.layers):
            for b, seq in enumerate(seqs):
                nxt = block_forward(seq, self.blocks[b][l])
                if cfg.skips and l >= 2:
                    nxt = nxt.with_tokens(nxt.tokens + history[b][l - 2].tokens)
                seqs[b] = nxt
            if l in schedule:
                seqs = fusion_variant_apply(cfg.fusion_variant, seqs[0], seqs[1], self.lateral[l], cfg)
            for b, seq in enumerate(seqs):
                history[b].append(seq)

        cls_fin = [T.rms_norm(s.cls, self.final_norms[b]) for b, s in enumerate(seqs)]
        if cfg.branches == 1:
            Z = cls_fin[0]
        else:
            Z = final_fusion(cfg, cls_fin, seqs, self.final_norms[0], self.final)
        logits = Z @ self.head_w + self.head_b
        trace = {"history": history, "cls_fin": cls_fin}
        return Prediction(logits, Z, trace)

    __call__ = forward


def fused_dim(cfg: ModelConfig) -> int:
    if cfg.branches == 1:
        return cfg.d
    return 2 * cfg.d if cfg.final_fusion == "concatenation" else cfg.d


def _lateral_params(cfg: ModelConfig, l: int, rng: np.random.Generator) -> dict[str, Parameter]:
    d, v, p = cfg.d, cfg.fusion_variant, f"lateral.l{l}"
    if v in GATED_VARIANTS:
        return {"gate": Parameter(np.zeros(d), p + ".gate")}
    if v in ("cls-concat", "full-hidden-concat"):
        # zero-initialised so the residual update starts as the identity
        return {"w": Parameter(np.zeros((2 * d, d)), p + ".proj_w"),
                "b": Parameter(np.zeros(d), p + ".proj_b")}
    if v == "cross-attention":
        return {k: Parameter(rng.normal(0, d ** -0.5, (d, d)), f"{p}.{k}") for k in ("wq", "wk", "wv")}
    return {}


def _final_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Parameter]:
    d, v = cfg.d, cfg.final_fusion
    if v.startswith("gated"):
        return {"gate": Parameter(np.zeros(d), "final.gate")}
    if v == "cross-attention":
        return {k: Parameter(rng.normal(0, d ** -0.5, (d, d)), f"final.{k}") for k in ("wq", "wk", "wv")}
    return {}


def fusion_variant_apply(variant: str, s1: TokenSequence, s2: TokenSequence,
                         params: dict[str, Parameter], cfg: ModelConfig | None = None) -> list[TokenSequence]:
    """One lateral connection. Returns the (possibly updated) pair [s1, s2]."""
    if variant == "gated-b1-to-b2":
        return [s1, s2.with_cls(gctf_fuse(s1.cls, s2.cls, params["gate"]))]
    if variant == "gated-b2-to-b1":
        return [s1.with_cls(gctf_fuse(s2.cls, s1.cls, params["gate"])), s2]
    if variant == "additive":
        return [s1, s2.with_cls(s2.cls + s1.cls)]
    if variant == "cls-concat":
        both = T.concat([s1.cls, s2.cls], axis=-1)
        return [s1, s2.with_cls(s2.cls + both @ params["w"] + params["b"])]
    if variant == "full-hidden-concat":
        if s1.tokens.shape != s2.tokens.shape:
            raise ValueError(f"full-hidden-concat needs equal lengths: {s1.tokens.shape} vs {s2.tokens.shape}")
        both = T.concat([s1.tokens, s2.tokens], axis=-1)
        return [s1, s2.with_tokens(s2.tokens + both @ params["w"] + params["b"])]
    if variant == "cross-attention":
        source = "full" if cfg is None else cfg.cross_attention_source
        kv = s1.tokens if source == "full" else T.reshape(s1.cls, s1.cls.shape[:-1] + (1, s1.cls.shape[-1]))
        attn = cross_attention(s2.cls, kv, params["wq"], params["wk"], params["wv"])
        return [s1, s2.with_cls(s2.cls + attn)]
    raise ValueError(f"unknown fusion variant {variant!r}")


def final_fusion(cfg: ModelConfig, cls_fin: list[Tensor], seqs: list[TokenSequence],
                 norm1: Parameter, params: dict[str, Parameter]) -> Tensor:
    c1, c2 = cls_fin
    v = cfg.final_fusion
    if v == "concatenation":
        return T.concat([c1, c2], axis=-1)
    if v == "addition":
        return c1 + c2
    if v == "gated-b1-to-b2":
        return gctf_fuse(c1, c2, params["gate"])
    if v == "gated-b2-to-b1":
        return gctf_fuse(c2, c1, params["gate"])
    if v == "cross-attention":
        kv = T.rms_norm(seqs[0].tokens, norm1)
        return c2 + cross_attention(c2, kv, params["wq"], params["wk"], params["wv"])
    raise ValueError(f"unknown final fusion {v!r}")


# ---------------------------------------------------------------------------
# class activation maps


def grad_cam(model: DualBranchModel, video, target_class: int, layer: int) -> np.ndarray:
    """Gradient-weighted activation map from the spatial-first branch.

    Returns a ``[t, h, w]`` array in [0, 1] (all zeros when nothing is positive).
    """
    cfg = model.config
    if not 0 <= layer < cfg.layers:
        raise ValueError(f"layer {layer} outside 0..{cfg.layers - 1}")
    video = np.asarray(video.data if isinstance(video, Tensor) else video, dtype=T.get_dtype())
    if video.ndim != 4:
        raise ValueError("grad_cam takes a single [3, T, H, W] video")
    model.zero_grad()
    pred = model.forward(video)
    state = pred.trace["history"][0][layer]
    acts = state.tokens.retain_grad()
    T.backward(pred.logits[target_class])
    grad = acts.grad if acts.grad is not None else np.zeros(acts.shape)
    model.zero_grad()
    inv = state.inverse
    a = acts.data[1:][inv]
    g = grad[1:][inv]
    weights = g.mean(axis=0)
    cam = np.maximum(a @ weights, 0.0).reshape(state.grid)
    peak = cam.max()
    return cam / peak if peak > 0 else np.zeros_like(cam)
