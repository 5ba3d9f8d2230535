"""Engine checkpoint file: magic DARACK01, little-endian.

Layout:
  magic (8 bytes)
  u32 layer_count, then per backbone matrix: u32 rows, u32 cols, f64 payload
  f64 gamma_log
  u32 gate_mode (0 fixed / 1 learnable), f64 alpha,
      u32 gate_len, gate_len * f64 gate weights, f64 gate bias
  u32 reprojection_class_count, then per class:
      u32 class_tag, u32 rows, u32 cols, f64 payload

A pretraining checkpoint simply has reprojection_class_count = 0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneParams
from .errors import BadMagic, HeaderMismatch, IoFailure
from .nda import GateParams

CHECKPOINT_MAGIC = b"DARACK01"


@dataclass
class Checkpoint:
    backbone: BackboneParams
    gamma_log: float
    gate: GateParams
    reprojection: dict[int, np.ndarray]  # class tag -> Z_n, empty before stage 2


def _pack_matrix(m: np.ndarray) -> bytes:
    return struct.pack("<2I", m.shape[0], m.shape[1]) + np.ascontiguousarray(
        m, dtype="<f8"
    ).tobytes()


class _Reader:
    def __init__(self, blob: bytes, source):
        self.blob = blob
        self.at = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.at + n > len(self.blob):
            raise HeaderMismatch(f"{self.source}: truncated at byte {self.at}")
        out = self.blob[self.at : self.at + n]
        self.at += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def matrix(self) -> np.ndarray:
        r, c = struct.unpack("<2I", self.take(8))
        data = np.frombuffer(self.take(8 * r * c), dtype="<f8")
        return data.reshape(r, c).astype(np.float64)


def save_checkpoint(ckpt: Checkpoint, destination) -> None:
    payload = bytearray(CHECKPOINT_MAGIC)
    mats = ckpt.backbone.matrices()
    payload += struct.pack("<I", len(mats))
    for m in mats:
        payload += _pack_matrix(m)
    payload += struct.pack("<d", ckpt.gamma_log)
    g = ckpt.gate
    payload += struct.pack("<Id", 1 if g.mode == "learnable" else 0, g.alpha)
    payload += struct.pack(f"<I{g.w.size}d", g.w.size, *g.w.ravel().tolist())
    payload += struct.pack("<d", g.b)
    payload += struct.pack("<I", len(ckpt.reprojection))
    for tag in sorted(ckpt.reprojection):
        payload += struct.pack("<I", tag) + _pack_matrix(ckpt.reprojection[tag])
    try:
        with open(destination, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {destination}: {exc}") from exc


def load_checkpoint(source) -> Checkpoint:
    try:
        with open(source, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {source}: {exc}") from exc
    if blob[:8] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{source} does not start with {CHECKPOINT_MAGIC!r}")
    rd = _Reader(blob, source)
    rd.at = 8
    layer_count = rd.u32()
    if layer_count != 4:
        raise HeaderMismatch(f"{source}: expected 4 backbone matrices, got {layer_count}")
    w1, b1, w2, b2 = (rd.matrix() for _ in range(4))
    gamma_log = rd.f64()
    mode = "learnable" if rd.u32() else "fixed"
    alpha = rd.f64()
    gate_len = rd.u32()
    gate_w = np.frombuffer(rd.take(8 * gate_len), dtype="<f8").reshape(1, gate_len).copy()
    gate_b = rd.f64()
    reproj: dict[int, np.ndarray] = {}
    for _ in range(rd.u32()):
        tag = rd.u32()
        reproj[tag] = rd.matrix()
    if rd.at != len(blob):
        raise HeaderMismatch(f"{source}: {len(blob) - rd.at} trailing bytes")
    return Checkpoint(
        backbone=BackboneParams(w1, b1, w2, b2),
        gamma_log=gamma_log,
        gate=GateParams(mode=mode, w=gate_w, b=gate_b, alpha=alpha),
        reprojection=reproj,
    )
