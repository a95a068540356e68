"""Attention-based Dropout Layer and the Hide-and-Seek grid-erase baseline."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import Rng
from .tensor import Graph, Node

DROP = "drop"
IMPORTANCE = "importance"
TRAIN = "train"
EVAL = "eval"


@dataclass(frozen=True)
class AdlConfig:
    """Hyperparameters for one ADL layer.

    ``use_drop`` / ``use_importance`` switch a branch off; a disabled branch
    passes the features through unchanged when selected, which is how the
    component-deactivation ablation is expressed. ``normalize_attention``
    divides the attention map by its per-sample maximum before the sigmoid
    (off by default).
    """

    drop_rate: float = 0.75
    gamma: float = 0.8
    use_drop: bool = True
    use_importance: bool = True
    normalize_attention: bool = False

    def __post_init__(self):
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ValueError(f"drop_rate must be in [0, 1], got {self.drop_rate}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")


@dataclass
class GateTrace:
    """Branch chosen at every training forward, per ADL layer."""

    branches: dict[str, list[str]] = field(default_factory=dict)

    def record(self, layer: str, branch: str) -> None:
        self.branches.setdefault(layer, []).append(branch)

    def drop_frequency(self, layer: str) -> float:
        seq = self.branches.get(layer, [])
        return sum(b == DROP for b in seq) / len(seq) if seq else float("nan")

    def as_lines(self) -> list[str]:
        return [
            f"{layer} " + "".join("D" if b == DROP else "I" for b in seq)
            for layer, seq in self.branches.items()
        ]


def compute_attention_map(g: Graph, features: Node) -> Node:
    """Channelwise mean of (N, H, W, C) features, as a differentiable (N, H, W) node."""
    return g.apply("channel_mean", [features], name="attention")


def compute_drop_mask(att: np.ndarray, gamma: float) -> np.ndarray:
    """Binary mask: 0 where attention exceeds ``gamma`` times the map maximum, else 1.

    Accepts a single (H, W) map or a (N, H, W) batch; the threshold is taken
    per map. A map whose maximum is <= 0 has no discriminative peak and is
    left untouched (all ones).
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    att = np.asarray(att, dtype=np.float64)
    if att.ndim < 2 or att.shape[-1] == 0 or att.shape[-2] == 0:
        raise ValueError(f"attention map must be non-empty (..., H, W), got {att.shape}")
    peak = att.max(axis=(-2, -1), keepdims=True)
    thresh = gamma * peak
    mask = np.where(att > thresh, 0.0, 1.0)
    return np.where(peak > 0.0, mask, 1.0)


def compute_importance_map(g: Graph, att: Node) -> Node:
    """Elementwise sigmoid of the attention map; differentiable."""
    return g.apply("sigmoid", [att], name="importance")


def draw_branch(cfg: AdlConfig, rng: Rng) -> str:
    """One Bernoulli(drop_rate) draw: drop when u < drop_rate."""
    return DROP if rng.random() < cfg.drop_rate else IMPORTANCE


def adl_forward(
    g: Graph,
    features: Node,
    cfg: AdlConfig,
    rng: Rng | None,
    phase: str,
    pin: str | None = None,
) -> tuple[Node, str | None]:
    """Apply ADL to (N, H, W, C) features.

    In eval phase the input node is returned as-is and ``rng`` is untouched.
    In train phase one branch is chosen for the whole batch (from ``rng``
    unless ``pin`` fixes it) and the selected map multiplies the features
    at every channel.
    """
    if phase == EVAL:
        if pin is not None:
            raise ValueError("pin is only meaningful in the train phase")
        return features, None
    if phase != TRAIN:
        raise ValueError(f"phase must be 'train' or 'eval', got {phase!r}")
    if features.value.ndim != 4:
        raise ValueError(f"ADL expects (batch, H, W, C) features, got {features.shape}")
    if pin is not None:
        if pin not in (DROP, IMPORTANCE):
            raise ValueError(f"pin must be 'drop' or 'importance', got {pin!r}")
        branch = pin
    else:
        if rng is None:
            raise ValueError("an rng is required for an unpinned training forward")
        branch = draw_branch(cfg, rng)
        if 0.0 < cfg.drop_rate < 1.0:
            g.mark_stochastic("adl gate")

    if branch == DROP and not cfg.use_drop:
        return features, branch
    if branch == IMPORTANCE and not cfg.use_importance:
        return features, branch

    att = compute_attention_map(g, features)
    if branch == DROP:
        mask = g.constant(compute_drop_mask(att.value, cfg.gamma), name="drop_mask")
        return g.apply("spatial_mul", [mask, features], name="adl_drop"), branch
    if cfg.normalize_attention:
        # mean(s * F) == s * mean(F); the 1/max scale is a gradient-blocked constant
        peak = att.value.max(axis=(1, 2), keepdims=True)
        inv = np.where(peak > 0.0, 1.0 / np.where(peak > 0.0, peak, 1.0), 1.0)
        scale = g.constant(np.broadcast_to(inv, att.shape).copy(), name="att_scale")
        att = g.apply("channel_mean", [g.apply("spatial_mul", [scale, features])], name="attention_normalized")
    imp = compute_importance_map(g, att)
    return g.apply("spatial_mul", [imp, features], name="adl_importance"), branch


def has_patch_mask(shape_hw: tuple[int, int], grid: int, hide_prob: float, rng: Rng) -> np.ndarray:
    """(H, W) keep-mask with each grid x grid patch zeroed independently with prob ``hide_prob``.

    Patches are visited in raster order and each consumes exactly one draw.
    The last row/column of patches may be ragged.
    """
    h, w = shape_hw
    if grid < 1 or grid > h or grid > w:
        raise ValueError(f"grid {grid} does not fit spatial extent {h}x{w}")
    if not 0.0 <= hide_prob <= 1.0:
        raise ValueError(f"hide_prob must be in [0, 1], got {hide_prob}")
    mask = np.ones((h, w))
    for y0 in range(0, h, grid):
        for x0 in range(0, w, grid):
            if rng.random() < hide_prob:
                mask[y0:y0 + grid, x0:x0 + grid] = 0.0
    return mask


def has_patch_drop(
    g: Graph,
    x: Node,
    grid: int,
    hide_prob: float,
    rng: Rng | None,
    phase: str,
) -> Node:
    """Hide-and-Seek: zero random grid patches of an (N, H, W, C) tensor during training.

    Each sample in the batch gets its own patch draws. Identity at eval.
    """
    n, h, w, _ = x.shape
    if grid < 1 or grid > h or grid > w:
        raise ValueError(f"grid {grid} does not fit spatial extent {h}x{w}")
    if not 0.0 <= hide_prob <= 1.0:
        raise ValueError(f"hide_prob must be in [0, 1], got {hide_prob}")
    if phase == EVAL:
        return x
    masks = np.stack([has_patch_mask((h, w), grid, hide_prob, rng) for _ in range(n)])
    if 0.0 < hide_prob < 1.0:
        g.mark_stochastic("has patches")
    return g.apply("spatial_mul", [g.constant(masks, name="has_mask"), x], name="has")
