"""Analytic parameter and FLOP counts.

Both walk the same structure :class:`~gctf.model.DualBranchModel` builds, but
from shapes alone, so full-scale configs cost nothing to count.
"""

from __future__ import annotations

from collections import defaultdict

from .config import GATED_VARIANTS, ModelConfig
from .model import fused_dim, lateral_schedule
from .ssm import dt_rank

# published reference figures for 64x224^2 inputs
PAPER_PARAMS = {1: 74.0e6, 2: 154.3e6}
PAPER_FLOPS = {1: 806e9, 2: 1830e9}

CONVENTIONS = ("2mac", "layer-mac")


def _lateral_layers(cfg: ModelConfig) -> list[int]:
    if cfg.branches != 2:
        return []
    return lateral_schedule("continuous" if cfg.full_gate_bank else cfg.lateral_placement, cfg.layers)


def param_breakdown(cfg: ModelConfig) -> dict[str, int]:
    C, E, N, K = cfg.d, cfg.expand, cfg.d_state, cfg.d_conv
    EC, R = E * C, dt_rank(C)
    pt, ph, pw = cfg.patch
    out: dict[str, int] = defaultdict(int)
    for b in range(cfg.branches):
        t, h, w = cfg.grid(b)
        out["tokenizer"] += C * 3 * pt * ph * pw + C + C + (h * w + 1) * C + t * C
        per_dir = EC * K + EC + EC * (R + 2 * N) + R * EC + EC + EC * N
        out["blocks"] += cfg.layers * (C + C * 2 * EC + EC * C + 2 * per_dir)
        out["final_norm"] += C
    per_lateral = {"cls-concat": 2 * C * C + C, "full-hidden-concat": 2 * C * C + C,
                   "cross-attention": 3 * C * C, "additive": 0}
    gate = C if cfg.fusion_variant in GATED_VARIANTS else per_lateral[cfg.fusion_variant]
    out["lateral"] += len(_lateral_layers(cfg)) * gate
    if cfg.branches == 2:
        if cfg.final_fusion.startswith("gated"):
            out["final_fusion"] += C
        elif cfg.final_fusion == "cross-attention":
            out["final_fusion"] += 3 * C * C
    out["head"] += fused_dim(cfg) * cfg.num_classes + cfg.num_classes
    return dict(out)


def count_params(cfg: ModelConfig) -> int:
    return sum(param_breakdown(cfg).values())


def flops_breakdown(cfg: ModelConfig, convention: str = "2mac") -> dict[str, float]:
    """Per-module cost of one forward pass on one clip.

    ``2mac``: every multiply-accumulate counts two FLOPs, including the
    selective scan, the SiLU gate products and the normalisations.
    ``layer-mac``: one per multiply-accumulate, and only for parameterised
    linear and convolution layers; this is what module-hook profilers report
    when the scan runs as a fused kernel they cannot see.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown FLOP convention {convention!r}")
    full = convention == "2mac"
    C, E, N, K = cfg.d, cfg.expand, cfg.d_state, cfg.d_conv
    EC, R = E * C, dt_rank(C)
    pt, ph, pw = cfg.patch
    out: dict[str, float] = defaultdict(float)
    for b in range(cfg.branches):
        L = cfg.tokens(b)
        S = L + 1
        out["patch_embed"] += L * C * 3 * pt * ph * pw
        n = cfg.layers
        out["in_proj"] += n * S * C * 2 * EC
        out["out_proj"] += n * S * EC * C
        out["conv1d"] += n * 2 * S * EC * K
        out["x_proj"] += n * 2 * S * EC * (R + 2 * N)
        out["dt_proj"] += n * 2 * S * R * EC
        if full:
            out["scan"] += n * 2 * S * 3 * EC * N          # h update (2) + C readout (1)
            out["gate"] += n * 2 * S * EC
            out["norm"] += (n * S + 1) * 2 * C
    lat = _lateral_layers(cfg) if cfg.branches == 2 else []
    v = cfg.fusion_variant
    for _ in lat:
        if v in ("cls-concat",):
            out["lateral"] += 2 * C * C
        elif v == "full-hidden-concat":
            out["lateral"] += (cfg.tokens(1) + 1) * 2 * C * C
        elif v == "cross-attention":
            S1 = cfg.tokens(0) + 1
            out["lateral"] += C * C + 2 * S1 * C * C + 2 * S1 * C
        elif full:
            out["lateral"] += 2 * C
    if cfg.branches == 2 and cfg.final_fusion == "cross-attention":
        S1 = cfg.tokens(0) + 1
        out["final_fusion"] += C * C + 2 * S1 * C * C + 2 * S1 * C
    out["head"] += linear_flops(fused_dim(cfg), cfg.num_classes) / 2
    scale = 2.0 if full else 1.0
    return {k: scale * v for k, v in out.items()}


def linear_flops(n_in: int, n_out: int, tokens: int = 1, bias: bool = True) -> float:
    """2 FLOPs per multiply-accumulate; a bias entry counts as one more MAC."""
    return 2.0 * tokens * n_out * (n_in + (1 if bias else 0))


def count_flops(cfg: ModelConfig, convention: str = "2mac") -> float:
    return float(sum(flops_breakdown(cfg, convention).values()))


def count_macs(cfg: ModelConfig) -> float:
    return count_flops(cfg, "2mac") / 2.0


def paper_deltas(cfg: ModelConfig) -> dict[str, float]:
    """Relative deviation of the counts from the published figures."""
    ref_p, ref_f = PAPER_PARAMS[cfg.branches], PAPER_FLOPS[cfg.branches]
    return {
        "params": count_params(cfg) / ref_p - 1.0,
        "flops_2mac": count_flops(cfg, "2mac") / ref_f - 1.0,
        "flops_layer_mac": count_flops(cfg, "layer-mac") / ref_f - 1.0,
    }
