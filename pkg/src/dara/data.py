"""Feature banks, episodic sampling, pseudo-splits, and the synthetic benchmark.

A bank stores items on a W x H spatial grid with C channels; each item is a
(W*H) x C float64 matrix in memory and f32 on disk. Banks hold either raw
synthetic inputs (fed to the trainable extractor) or externally extracted
feature maps; the engine treats both the same way.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    HeaderMismatch,
    InsufficientItems,
    IoFailure,
    LabelOutOfRange,
    ShapeMismatch,
)

BANK_MAGIC = b"DARAFB01"


@dataclass
class FeatureBank:
    width: int
    height: int
    channels: int
    class_count: int
    items: list[tuple[np.ndarray, int]] = field(default_factory=list)

    @property
    def resolution(self) -> int:
        return self.width * self.height

    def validate(self) -> "FeatureBank":
        if min(self.width, self.height, self.channels, self.class_count) < 1:
            raise ValueError("W, H, C and class_count must all be >= 1")
        r = self.resolution
        for i, (fmap, label) in enumerate(self.items):
            if fmap.shape != (r, self.channels):
                raise ShapeMismatch(
                    f"item {i} has shape {fmap.shape}, expected {(r, self.channels)}"
                )
            if not (0 <= label < self.class_count):
                raise LabelOutOfRange(
                    f"item {i} label {label} not in [0, {self.class_count})"
                )
        return self

    def by_class(self) -> dict[int, list[int]]:
        """Item indices grouped by label, in bank order."""
        groups: dict[int, list[int]] = {c: [] for c in range(self.class_count)}
        for i, (_, label) in enumerate(self.items):
            groups[label].append(i)
        return groups


def save_bank(bank: FeatureBank, destination) -> None:
    """Write the little-endian DARAFB01 format; values truncate to f32."""
    bank.validate()
    payload = bytearray()
    payload += BANK_MAGIC
    payload += struct.pack(
        "<5I", len(bank.items), bank.width, bank.height, bank.channels, bank.class_count
    )
    payload += struct.pack(f"<{len(bank.items)}I", *(label for _, label in bank.items))
    for fmap, _ in bank.items:
        # Row r of the map is spatial cell (h, w) with r = h*W + w, so
        # C-order flattening matches the on-disk (item, h, w, c) ordering.
        payload += np.ascontiguousarray(fmap, dtype="<f4").tobytes()
    try:
        with open(destination, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {destination}: {exc}") from exc


def load_bank(source) -> FeatureBank:
    """Read and validate a DARAFB01 file."""
    try:
        with open(source, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {source}: {exc}") from exc
    if len(blob) < 8 or blob[:8] != BANK_MAGIC:
        raise BadMagic(f"{source} does not start with {BANK_MAGIC!r}")
    if len(blob) < 28:
        raise HeaderMismatch(f"{source}: truncated header")
    num_items, width, height, channels, class_count = struct.unpack(
        "<5I", blob[8:28]
    )
    per_item = width * height * channels
    expected = 28 + 4 * num_items + 4 * per_item * num_items
    if len(blob) != expected:
        raise HeaderMismatch(
            f"{source}: header declares {expected} bytes, file has {len(blob)}"
        )
    labels = struct.unpack(f"<{num_items}I", blob[28 : 28 + 4 * num_items])
    values = np.frombuffer(blob, dtype="<f4", offset=28 + 4 * num_items)
    items = []
    for i in range(num_items):
        fmap = values[i * per_item : (i + 1) * per_item].astype(np.float64)
        items.append((fmap.reshape(width * height, channels), int(labels[i])))
    bank = FeatureBank(width, height, channels, class_count, items)
    try:
        return bank.validate()
    except LabelOutOfRange:
        raise
    except ShapeMismatch as exc:  # cannot happen given the length check
        raise HeaderMismatch(str(exc)) from exc


@dataclass
class EpisodeSpec:
    ways: int = 5
    shots: int = 5
    queries_per_class: int = 15
    pseudo_query_shots: int = 1
    seed: int = 0

    def validate(self) -> "EpisodeSpec":
        if self.ways < 2:
            raise ValueError("ways must be >= 2")
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.queries_per_class < 1:
            raise ValueError("queries_per_class must be >= 1")
        if self.shots == 1:
            if self.pseudo_query_shots != 1:
                raise ValueError("1-shot requires pseudo_query_shots = 1")
        elif not (1 <= self.pseudo_query_shots < self.shots):
            raise ValueError(
                f"pseudo_query_shots must be in [1, {self.shots - 1}] for"
                f" {self.shots}-shot"
            )
        return self


@dataclass
class Episode:
    class_ids: list[int]                      # bank labels, one per way
    support: list[list[np.ndarray]]           # [way][shot] -> (R, C)
    query: list[tuple[np.ndarray, int]]       # (map, way index)
    support_indices: list[list[int]] = field(default_factory=list)  # bank positions


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Independent, reproducible stream for episode `index`.

    Streams are split with SeedSequence spawn keys, so any subset of
    episodes can be generated in any order (or in parallel) and still
    match a sequential run bit for bit.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def sample_episode(
    bank: FeatureBank,
    spec: EpisodeSpec,
    rng: np.random.Generator,
    query_offset: float = 0.0,
) -> Episode:
    """Draw an N-way K-shot episode with disjoint support/query items.

    `query_offset` is added to every entry of the sampled query items,
    reproducing the benchmark's support/query covariate shift.
    """
    spec.validate()
    groups = bank.by_class()
    eligible = [c for c, idxs in groups.items() if len(idxs) >= spec.shots + spec.queries_per_class]
    if len(eligible) < spec.ways:
        need = spec.shots + spec.queries_per_class
        short = [c for c in groups if len(groups[c]) < need]
        raise InsufficientItems(
            f"need {spec.ways} classes with >= {need} items; classes {short} fall short"
        )
    class_ids = sorted(rng.choice(eligible, size=spec.ways, replace=False).tolist())
    support: list[list[np.ndarray]] = []
    support_indices: list[list[int]] = []
    query: list[tuple[np.ndarray, int]] = []
    for way, cid in enumerate(class_ids):
        picks = rng.choice(groups[cid], size=spec.shots + spec.queries_per_class, replace=False)
        support.append([bank.items[i][0].copy() for i in picks[: spec.shots]])
        support_indices.append([int(i) for i in picks[: spec.shots]])
        for i in picks[spec.shots :]:
            query.append((bank.items[i][0] + query_offset, way))
    return Episode(class_ids, support, query, support_indices)


def pseudo_split(
    support: list[list[np.ndarray]],
    spec: EpisodeSpec,
    rng: np.random.Generator,
) -> tuple[list[list[np.ndarray]], list[list[np.ndarray]]]:
    """Split each class's support shots into pseudo-support and pseudo-query.

    Per class, `pseudo_query_shots` items go to the pseudo-query side and
    the rest stay as pseudo-support. With a single shot the one item plays
    both roles (self-reconstruction); for K > 1 the two sides are disjoint.
    """
    spec.validate()
    ps: list[list[np.ndarray]] = []
    pq: list[list[np.ndarray]] = []
    for shots in support:
        k = len(shots)
        if k == 1:
            ps.append([shots[0]])
            pq.append([shots[0]])
            continue
        order = rng.permutation(k)
        q_idx = set(order[: spec.pseudo_query_shots].tolist())
        ps.append([shots[i] for i in range(k) if i not in q_idx])
        pq.append([shots[i] for i in range(k) if i in q_idx])
    return ps, pq


@dataclass
class SynthConfig:
    source_classes: int = 8
    target_classes: int = 8
    items_per_class: int = 40
    width: int = 5
    height: int = 5
    channels: int = 8
    separation: float = 0.8
    views_per_class: int = 3
    view_spread: float = 1.5
    domain_scale: float = 1.8
    domain_offset: float = -1.6
    query_delta: float = 1.4
    noise: float = 0.5
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if min(self.source_classes, self.target_classes, self.items_per_class) < 1:
            raise ValueError("class and item counts must be >= 1")
        if min(self.width, self.height, self.channels) < 1:
            raise ValueError("W, H, C must be >= 1")
        if self.views_per_class < 1:
            raise ValueError("views_per_class must be >= 1")
        if self.noise <= 0:
            raise ValueError("noise must be > 0")
        return self


def _gaussian_bank(
    rng: np.random.Generator, cfg: SynthConfig, classes: int
) -> FeatureBank:
    """Classes are mixtures of `views_per_class` clusters around a class mean.

    Multi-modal classes keep the intra-class structure non-trivial: a single
    averaged prototype sits between views, and instances from a minority
    view look like outliers. View offsets scale with `separation`, so
    separation = 0 erases every class-specific trace and the bank is
    class-blind by symmetry.
    """
    r = cfg.width * cfg.height
    means = cfg.separation * rng.standard_normal((classes, r, cfg.channels))
    views = means[:, None] + cfg.separation * cfg.view_spread * rng.standard_normal(
        (classes, cfg.views_per_class, r, cfg.channels)
    )
    items = []
    for c in range(classes):
        picks = rng.integers(0, cfg.views_per_class, size=cfg.items_per_class)
        for t in picks:
            items.append(
                (views[c, t] + cfg.noise * rng.standard_normal((r, cfg.channels)), c)
            )
    return FeatureBank(cfg.width, cfg.height, cfg.channels, classes, items)


def gen_synthetic(cfg: SynthConfig) -> tuple[FeatureBank, FeatureBank, dict]:
    """Build a (source, target) bank pair plus a query-shift descriptor.

    The source bank is class means plus Gaussian noise. The target bank
    draws fresh class structure and pushes it through a per-channel affine
    (scale sampled in [min(1,s), max(1,s)], offset in [min(0,o), max(0,o)]),
    the domain shift. Query-side covariate shift is NOT baked into the
    bank: the returned descriptor carries `query_delta`, which episode
    sampling adds to query items only.
    """
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    src_seq, tgt_seq, affine_seq = root.spawn(3)
    source = _gaussian_bank(np.random.default_rng(src_seq), cfg, cfg.source_classes)
    target = _gaussian_bank(np.random.default_rng(tgt_seq), cfg, cfg.target_classes)

    arng = np.random.default_rng(affine_seq)
    lo_s, hi_s = min(1.0, cfg.domain_scale), max(1.0, cfg.domain_scale)
    lo_o, hi_o = min(0.0, cfg.domain_offset), max(0.0, cfg.domain_offset)
    scale_c = arng.uniform(lo_s, hi_s, size=cfg.channels)
    offset_c = arng.uniform(lo_o, hi_o, size=cfg.channels)
    target.items = [(fmap * scale_c + offset_c, label) for fmap, label in target.items]

    descriptor = {
        "query_delta": cfg.query_delta,
        "channel_scale": scale_c.tolist(),
        "channel_offset": offset_c.tolist(),
    }
    return source.validate(), target.validate(), descriptor
