"""Sectioned INI pipeline configuration with strict keys.

Every key has a typed default below; a file may override any subset. Unknown
sections or keys, and values that do not parse as the default's type, raise
:class:`ConfigError`.
"""

from __future__ import annotations

import configparser
import copy
import json
from pathlib import Path

from .data import AugmentConfig, SyntheticDatasetSpec, Trigger
from .detector import DedeTrainConfig
from .evalkit import ProbeConfig
from .nets import DedeArch, EncoderArch, PatchGrid
from .victim import ATTACK_KINDS, AttackConfig, ContrastiveConfig

DEFAULTS: dict[str, dict[str, object]] = {
    "run": {"seed": 0, "out": "runs/default"},
    "data": {
        "classes": 4, "channels": 3, "height": 16, "width": 16, "noise": 0.05, "jitter": 2,
        "template_seed": 0, "ood_template_seed": 1, "ood_classes": 16,
        "pretrain": 2048, "dede_train": 1024, "downstream_train": 1024, "test": 1024,
    },
    "encoder": {"patch": 4, "depth": 2, "width": 64, "heads": 4, "embed_dim": 64},
    "contrastive": {
        "temperature": 0.5, "epochs": 4, "batch_size": 128, "lr": 1e-3,
        "min_area": 0.8, "flip_p": 0.5, "brightness": 0.2, "aug_noise": 0.02,
    },
    "attack": {
        "kind": "embedding-target", "target": 0, "trigger": "patch", "trigger_size": 3, "trigger_value": 1.0,
        "amplitude": 0.05, "freq_u": 6, "freq_v": 6, "reference_size": 32,
        "lambda_eff": 1.0, "lambda_util": 1.0, "lambda_align": 1.0, "align_warmup_epochs": 2,
        "epochs": 6, "batch_size": 64, "lr": 1e-3, "poison_rate": 0.08, "pretrain_epochs": 4,
    },
    "dede": {
        "iterations": 500, "lr": 1e-3, "alpha": 0.9, "batch_size": 64, "poison_rate": 0.01, "ood_fraction": 0.0,
        "ood_quantile": 0.99, "optimizer": "adam", "train_data": "in-distribution",
        "enc_depth": 2, "enc_width": 64, "dec_depth": 2, "dec_width": 64, "heads": 4,
    },
    "eval": {
        "test_triggered_fraction": 0.5, "downstream_poison_rate": 0.01, "probe_epochs": 60,
        "probe_batch_size": 128, "probe_lr": 1e-2, "kmeans_k": 0, "ensemble": 1,
    },
}

CHOICES = {
    ("attack", "kind"): ("none",) + ATTACK_KINDS,
    ("attack", "trigger"): ("patch", "spectral"),
    ("dede", "optimizer"): ("adam", "sgd"),
    ("dede", "train_data"): ("in-distribution", "ood"),
}


class ConfigError(ValueError):
    pass


def _cast(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            value = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            value = int(raw)
        elif isinstance(default, float):
            value = float(raw)
        else:
            value = raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r}: expected {type(default).__name__}") from None
    allowed = CHOICES.get((section, key))
    if allowed and value not in allowed:
        raise ConfigError(f"[{section}] {key} = {value!r}: must be one of {', '.join(allowed)}")
    return value


class PipelineConfig:
    """Resolved configuration: ``cfg.section["key"]`` or ``cfg.get(section, key)``."""

    def __init__(self, values: dict[str, dict[str, object]] | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        for section, items in (values or {}).items():
            for key, value in items.items():
                self.set(section, key, value)

    def __getattr__(self, section: str) -> dict[str, object]:
        try:
            return self.__dict__["values"][section]
        except KeyError:
            raise AttributeError(section) from None

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, value) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        self.values[section][key] = _cast(section, key, str(value), DEFAULTS[section][key])

    @property
    def seed(self) -> int:
        return int(self.values["run"]["seed"])

    def with_overrides(self, **sections) -> "PipelineConfig":
        out = PipelineConfig(self.values)
        for section, items in sections.items():
            for key, value in items.items():
                out.set(section, key, value)
        return out

    def to_dict(self) -> dict[str, dict[str, object]]:
        return copy.deepcopy(self.values)

    def to_ini(self) -> str:
        lines = []
        for section, items in self.values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in items.items())
            lines.append("")
        return "\n".join(lines)

    def fingerprint(self) -> str:
        return json.dumps(self.values, sort_keys=True)

    # builders for the typed per-stage configs

    def dataset_spec(self, ood: bool = False) -> SyntheticDatasetSpec:
        d = self.data
        # the OOD dataset gets more classes than the main one; a handful of templates is too narrow a prior
        return SyntheticDatasetSpec(
            classes=d["ood_classes"] if ood else d["classes"], channels=d["channels"], height=d["height"], width=d["width"],
            noise=d["noise"], jitter=d["jitter"],
            template_seed=d["ood_template_seed"] if ood else d["template_seed"],
            sizes={k: d[k] for k in ("pretrain", "dede_train", "downstream_train", "test")},
        )

    def grid(self) -> PatchGrid:
        d = self.data
        return PatchGrid(d["channels"], d["height"], d["width"], self.encoder["patch"])

    def encoder_arch(self) -> EncoderArch:
        e = self.encoder
        return EncoderArch(e["depth"], e["width"], e["heads"], e["embed_dim"])

    def contrastive(self, epochs: int | None = None) -> ContrastiveConfig:
        c = self.values["contrastive"]
        aug = AugmentConfig(c["min_area"], c["flip_p"], c["brightness"], c["aug_noise"])
        return ContrastiveConfig(c["temperature"], aug, c["epochs"] if epochs is None else epochs,
                                 c["batch_size"], c["lr"])

    def trigger(self) -> Trigger:
        a = self.attack
        return Trigger(kind=a["trigger"], size=a["trigger_size"], value=a["trigger_value"],
                       amplitude=a["amplitude"], freq_u=a["freq_u"], freq_v=a["freq_v"])

    def attack_config(self) -> AttackConfig:
        a = self.attack
        if a["kind"] == "none":
            raise ConfigError("[attack] kind = none has no attack configuration")
        return AttackConfig(
            kind=a["kind"], trigger=self.trigger(), target=a["target"], reference_size=a["reference_size"],
            lambda_eff=a["lambda_eff"], lambda_util=a["lambda_util"], lambda_align=a["lambda_align"],
            align_warmup_epochs=a["align_warmup_epochs"], epochs=a["epochs"], batch_size=a["batch_size"],
            lr=a["lr"], poison_rate=a["poison_rate"],
        )

    def dede_config(self) -> DedeTrainConfig:
        d = self.dede
        return DedeTrainConfig(iterations=d["iterations"], lr=d["lr"], alpha=d["alpha"], batch_size=d["batch_size"],
                               ood_fraction=d["ood_fraction"], ood_quantile=d["ood_quantile"],
                               optimizer=d["optimizer"])

    def dede_arch(self) -> DedeArch:
        d = self.dede
        return DedeArch(d["enc_depth"], d["enc_width"], d["dec_depth"], d["dec_width"], d["heads"])

    def probe_config(self) -> ProbeConfig:
        e = self.values["eval"]
        return ProbeConfig(e["probe_epochs"], e["probe_batch_size"], e["probe_lr"])

    def validate(self) -> None:
        try:
            self.dataset_spec().validate()
            self.dataset_spec(ood=True).validate()
            self.grid()
            self.dede_config()
            self.trigger().origin(self.data["height"], self.data["width"])
            if self.attack["kind"] != "none":
                self.attack_config()
        except ValueError as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(str(err)) from None
        if not 0 <= self.attack["target"] < self.data["classes"]:
            raise ConfigError("[attack] target must be a valid class index")
        for section, key in (("dede", "poison_rate"), ("eval", "downstream_poison_rate"), ("attack", "poison_rate")):
            if not 0.0 <= self.values[section][key] <= 1.0:
                raise ConfigError(f"[{section}] {key} must lie in [0, 1]")
        if not 0.0 < self.values["eval"]["test_triggered_fraction"] < 1.0:
            raise ConfigError("[eval] test_triggered_fraction must lie in (0, 1)")
        if self.encoder["width"] % self.encoder["heads"] or self.dede["enc_width"] % self.dede["heads"] \
                or self.dede["dec_width"] % self.dede["heads"]:
            raise ConfigError("widths must be divisible by the head count")


def parse_config(text: str) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from None
    values = {section: dict(parser.items(section)) for section in parser.sections()}
    cfg = PipelineConfig(values)
    cfg.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
