"""Trainable per-cell feature extractor: linear -> ReLU -> linear -> ReLU.

Each of the R = W*H spatial cells is mapped independently from C_in input
channels to C feature channels, so a whole batch of items reduces to two
matrix products on a stacked (B*R) x C_in matrix. Cross-cell mixing is a
deliberate non-goal; the alignment math downstream never needs it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch


@dataclass
class BackboneParams:
    w1: np.ndarray  # (C_in, C_hidden)
    b1: np.ndarray  # (1, C_hidden)
    w2: np.ndarray  # (C_hidden, C_feat)
    b2: np.ndarray  # (1, C_feat)

    @property
    def c_in(self) -> int:
        return self.w1.shape[0]

    @property
    def c_feat(self) -> int:
        return self.w2.shape[1]

    def copy(self) -> "BackboneParams":
        return BackboneParams(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy()
        )

    def matrices(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]


def init_backbone(
    c_in: int, c_hidden: int, c_feat: int, rng: np.random.Generator
) -> BackboneParams:
    """Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""

    def glorot(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    return BackboneParams(
        w1=glorot(c_in, c_hidden),
        b1=np.zeros((1, c_hidden)),
        w2=glorot(c_hidden, c_feat),
        b2=np.zeros((1, c_feat)),
    )


def forward_batch(
    tape: ad.Tape,
    params: tuple[ad.Var, ad.Var, ad.Var, ad.Var],
    stacked: ad.Var,
) -> ad.Var:
    """Differentiable forward of a (B*R) x C_in stack of cell vectors."""
    w1, b1, w2, b2 = params
    if stacked.shape[1] != w1.shape[0]:
        raise ShapeMismatch(
            f"input has {stacked.shape[1]} channels, first layer expects {w1.shape[0]}"
        )
    h = ad.relu(ad.add(ad.matmul(stacked, w1), b1))
    return ad.relu(ad.add(ad.matmul(h, w2), b2))


def forward_numpy(params: BackboneParams, items: list[np.ndarray]) -> list[np.ndarray]:
    """Inference-path forward; same arithmetic as the tape, no recording."""
    if not items:
        return []
    r = items[0].shape[0]
    stacked = np.vstack(items)
    if stacked.shape[1] != params.c_in:
        raise ShapeMismatch(
            f"input has {stacked.shape[1]} channels, first layer expects {params.c_in}"
        )
    h = np.maximum(stacked @ params.w1 + params.b1, 0.0)
    out = np.maximum(h @ params.w2 + params.b2, 0.0)
    return [out[i * r : (i + 1) * r] for i in range(len(items))]
