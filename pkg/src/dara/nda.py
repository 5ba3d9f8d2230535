"""Normalized distribution alignment.

Support features are re-standardized with statistics measured on the query
batch: a batch branch (one mean/variance per channel over every spatial
position of every query item) and an instance branch (per-item per-channel
statistics). A gate mixes the two branches, either with a fixed weight or
with a learned sigmoid of the pooled feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ChannelMismatch, ShapeMismatch

DEFAULT_EPS = 1e-5

# sigmoid(36) is the largest double strictly below 1, so clamping the
# pre-activation keeps the gate inside the open interval (0, 1).
_GATE_CLAMP = 36.0


@dataclass
class TanStats:
    mu_bn: np.ndarray    # (1, C)
    var_bn: np.ndarray   # (1, C), population variance
    mu_in: np.ndarray    # (B, C)
    var_in: np.ndarray   # (B, C)
    eps: float = DEFAULT_EPS


@dataclass
class GateParams:
    mode: str = "learnable"          # "learnable" or "fixed"
    w: np.ndarray = field(default_factory=lambda: np.zeros((1, 1)))
    b: float = 0.0
    alpha: float = 0.5               # used only in fixed mode

    def validate(self) -> "GateParams":
        if self.mode not in ("learnable", "fixed"):
            raise ValueError(f"unknown gate mode {self.mode!r}")
        if self.mode == "fixed" and not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"fixed alpha must be in [0, 1], got {self.alpha}")
        return self


def bn_stats(batch: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/variance over all B*R positions of the batch."""
    stacked = np.vstack(batch)
    mu = stacked.mean(axis=0, keepdims=True)
    var = stacked.var(axis=0, keepdims=True)
    return mu, var


def in_stats(item: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/variance over this item's R positions only."""
    mu = item.mean(axis=0, keepdims=True)
    var = item.var(axis=0, keepdims=True)
    return mu, var


def extract_stats(batch: list[np.ndarray], eps: float = DEFAULT_EPS) -> TanStats:
    mu_bn, var_bn = bn_stats(batch)
    per_item = [in_stats(f) for f in batch]
    return TanStats(
        mu_bn=mu_bn,
        var_bn=var_bn,
        mu_in=np.vstack([m for m, _ in per_item]),
        var_in=np.vstack([v for _, v in per_item]),
        eps=eps,
    )


def stats_for_item(stats: TanStats, item: np.ndarray) -> TanStats:
    """The same batch statistics paired with one outside item's own
    instance statistics (as index 0)."""
    mu, var = in_stats(item)
    return TanStats(stats.mu_bn, stats.var_bn, mu, var, stats.eps)


def tan_branches(
    feature: np.ndarray, stats: TanStats, item_index: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Batch-branch and instance-branch normalizations of one feature map.

    `item_index` selects the per-item instance statistics for a member of
    the batch the stats came from; support maps have no such member, so
    they use the batch-averaged instance statistics instead.
    """
    if feature.shape[1] != stats.mu_bn.shape[1]:
        raise ChannelMismatch(
            f"feature has {feature.shape[1]} channels, stats have {stats.mu_bn.shape[1]}"
        )
    bn = (feature - stats.mu_bn) / np.sqrt(stats.var_bn + stats.eps)
    if item_index is None:
        mu_in = stats.mu_in.mean(axis=0, keepdims=True)
        var_in = stats.var_in.mean(axis=0, keepdims=True)
    else:
        mu_in = stats.mu_in[item_index : item_index + 1]
        var_in = stats.var_in[item_index : item_index + 1]
    inn = (feature - mu_in) / np.sqrt(var_in + stats.eps)
    return bn, inn


def gate(feature: np.ndarray, params: GateParams) -> float:
    """Mixing weight tau in (0,1): sigmoid(w . pool(feature) + b), or alpha."""
    params.validate()
    if params.mode == "fixed":
        return params.alpha
    if params.w.shape[1] != feature.shape[1]:
        raise ChannelMismatch(
            f"gate weights cover {params.w.shape[1]} channels, feature has {feature.shape[1]}"
        )
    pooled = feature.mean(axis=0)
    pre = float(params.w[0] @ pooled) + params.b
    pre = min(max(pre, -_GATE_CLAMP), _GATE_CLAMP)
    return float(1.0 / (1.0 + np.exp(-pre)))


def fuse(bn_branch: np.ndarray, in_branch: np.ndarray, tau: float) -> np.ndarray:
    """(1 - tau) * batch branch + tau * instance branch."""
    if bn_branch.shape != in_branch.shape:
        raise ShapeMismatch(f"fuse {bn_branch.shape} vs {in_branch.shape}")
    if tau == 0.0:
        return bn_branch
    if tau == 1.0:
        return in_branch
    return (1.0 - tau) * bn_branch + tau * in_branch


def align(
    feature: np.ndarray,
    stats: TanStats,
    params: GateParams,
    item_index: int | None = None,
    variant: str = "learnable",
) -> np.ndarray:
    """Full alignment of one feature map under a gating variant.

    Variants: "learnable" (trained gate), "mean" (fixed 0.5/0.5),
    "bn" / "in" (single branch), "sum" (ungated branch sum).
    """
    bn, inn = tan_branches(feature, stats, item_index)
    if variant == "learnable":
        return fuse(bn, inn, gate(feature, params))
    if variant == "mean":
        return fuse(bn, inn, 0.5)
    if variant == "bn":
        return bn
    if variant == "in":
        return inn
    if variant == "sum":
        return bn + inn
    raise ValueError(f"unknown alignment variant {variant!r}")
