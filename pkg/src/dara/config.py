"""Flat `key = value` configuration shared by every command.

One registry covers all commands, so a single config file can drive the
whole recipe (synth -> pretrain -> finetune -> eval -> hist). Flag
overrides win over file values; `workers` additionally falls back to the
DARA_WORKERS environment variable. The canonical serialization of the
effective config is hashed into `config_digest`, which every output
artifact echoes.
"""

from __future__ import annotations

import hashlib
import os

from .data import EpisodeSpec, SynthConfig
from .errors import ConfigError
from .pipeline import TrainConfig

# key -> (type, default); paths default to "" meaning "not set"
REGISTRY: dict[str, tuple[type, object]] = {
    # synthetic benchmark
    "source_classes": (int, 8),
    "target_classes": (int, 8),
    "items_per_class": (int, 40),
    "width": (int, 5),
    "height": (int, 5),
    "channels": (int, 8),
    "separation": (float, 0.8),
    "views_per_class": (int, 3),
    "view_spread": (float, 1.5),
    "domain_scale": (float, 1.8),
    "domain_offset": (float, -1.6),
    "query_delta": (float, 1.4),
    "noise": (float, 0.5),
    # episode shape
    "ways": (int, 5),
    "shots": (int, 5),
    "queries_per_class": (int, 15),
    "pseudo_query_shots": (int, 1),
    # training
    "pretrain_epochs": (int, 100),
    "finetune_epochs": (int, 100),
    "lr_pretrain": (float, 0.05),
    "lr_stage1": (float, 0.01),
    "lr_stage2": (float, 0.01),
    "batch_size": (int, 16),
    "c_hidden": (int, 32),
    "c_feat": (int, 160),
    "beta": (float, 1.0),
    "use_recalibration": (bool, True),
    "use_reprojection_finetune": (bool, True),
    "use_nda": (bool, True),
    "nda_variant": (str, "learnable"),
    "statistic_source": (str, "q-all"),
    "pool_mode": (str, "stacked"),
    "shared_finetune": (bool, False),
    "clamp_negative_weights": (bool, False),
    # evaluation
    "episodes": (int, 600),
    "workers": (int, 1),
    "seed": (int, 0),
    # artifact paths
    "source_bank": (str, ""),
    "target_bank": (str, ""),
    "checkpoint": (str, ""),
    "finetuned": (str, ""),
    "report": (str, ""),
    "histogram": (str, ""),
    # rendering
    "figures": (bool, True),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str):
    typ, _ = REGISTRY[key]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(
            f"key '{key}' expects {typ.__name__}, got {raw!r}"
        ) from exc


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """Raw key -> value strings from `key = value` lines, `#` comments."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key not in REGISTRY:
            raise ConfigError(f"{origin}:{lineno}: unknown key '{key}'")
        out[key] = value.strip()
    return out


class Config:
    """Typed view of the effective configuration."""

    def __init__(self, values: dict[str, object]):
        self._values = values

    def __getitem__(self, key: str):
        return self._values[key]

    def get(self, key: str, default=None):
        return self._values.get(key, default)

    def require_path(self, key: str) -> str:
        value = str(self._values.get(key, ""))
        if not value:
            raise ConfigError(f"missing required key '{key}'")
        return value

    def canonical(self) -> str:
        lines = []
        for key in sorted(self._values):
            value = self._values[key]
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def synth(self) -> SynthConfig:
        v = self._values
        return SynthConfig(
            source_classes=v["source_classes"],
            target_classes=v["target_classes"],
            items_per_class=v["items_per_class"],
            width=v["width"],
            height=v["height"],
            channels=v["channels"],
            separation=v["separation"],
            views_per_class=v["views_per_class"],
            view_spread=v["view_spread"],
            domain_scale=v["domain_scale"],
            domain_offset=v["domain_offset"],
            query_delta=v["query_delta"],
            noise=v["noise"],
            seed=v["seed"],
        ).validate()

    def episode_spec(self) -> EpisodeSpec:
        v = self._values
        return EpisodeSpec(
            ways=v["ways"],
            shots=v["shots"],
            queries_per_class=v["queries_per_class"],
            pseudo_query_shots=v["pseudo_query_shots"],
            seed=v["seed"],
        ).validate()

    def train(self) -> TrainConfig:
        v = self._values
        return TrainConfig(
            pretrain_epochs=v["pretrain_epochs"],
            finetune_epochs=v["finetune_epochs"],
            lr_pretrain=v["lr_pretrain"],
            lr_stage1=v["lr_stage1"],
            lr_stage2=v["lr_stage2"],
            batch_size=v["batch_size"],
            c_hidden=v["c_hidden"],
            c_feat=v["c_feat"],
            beta=v["beta"],
            seed=v["seed"],
            workers=v["workers"],
            use_recalibration=v["use_recalibration"],
            use_reprojection_finetune=v["use_reprojection_finetune"],
            use_nda=v["use_nda"],
            nda_variant=v["nda_variant"],
            statistic_source=v["statistic_source"],
            pool_mode=v["pool_mode"],
            shared_finetune=v["shared_finetune"],
            clamp_negative_weights=v["clamp_negative_weights"],
        ).validate()


def load_config(path: str | None, overrides: dict[str, str]) -> Config:
    """Merge defaults, environment, file, and flag overrides (strongest last)."""
    values = {key: default for key, (_, default) in REGISTRY.items()}
    env_workers = os.environ.get("DARA_WORKERS")
    if env_workers is not None:
        values["workers"] = _coerce("workers", env_workers)
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config '{path}': {exc}") from exc
        for key, raw in parse_config_text(text, origin=path).items():
            values[key] = _coerce(key, raw)
    for key, raw in overrides.items():
        if key not in REGISTRY:
            raise ConfigError(f"unknown key '{key}'")
        values[key] = _coerce(key, raw)
    return Config(values)
