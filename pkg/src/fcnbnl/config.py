"""Flat ``section.key = value`` run configuration.

Every key has a default; files and command-line overrides may only set
known keys. All values are parsed and the derived objects built in
:meth:`RunConfig.validate` before any command touches the filesystem.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SynthConfig
from .fcn import FcnTopology, ScalePyramidConfig
from .nbnl import NbnlConfig
from .training import TrainingConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "all", "none") else int(text)


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return v


def _precision(text: str) -> str:
    if text not in ("f32", "f64"):
        raise ValueError("precision must be f32 or f64")
    return text


# key -> (parser, default text)
SCHEMA: dict[str, tuple] = {
    "seed": (_seed, "0"),
    "out": (str, "runs/default"),
    "precision": (_precision, "f32"),
    "dataset.path": (str, ""),
    "dataset.train_fraction": (float, "0.6666666666666666"),
    "synth.k": (int, "4"),
    "synth.images_per_class": (int, "75"),
    "synth.image_size": (int, "48"),
    "synth.motif_size": (int, "12"),
    "synth.noise_level": (float, "0.03"),
    "topology.layers": (str, "5x16s2,3x32s2,3x64s1"),
    "topology.normalize": (_bool, "false"),
    "topology.batch_norm": (_bool, "true"),
    "pyramid.factors": (_floats, "1.0,1.5,2.0"),
    "pyramid.base": (int, "48"),
    "pyramid.interpolation": (str, "bilinear"),
    "nbnl.q": (float, "10"),
    "nbnl.p": (int, "2"),
    "train.epochs": (int, "15"),
    "train.batch_size": (int, "10"),
    "train.lr": (float, "0.2"),
    "train.lr_drops": (_ints, ""),
    "train.lr_drop_factor": (float, "0.1"),
    "train.weight_decay_prototypes": (float, "1e-5"),
    "train.weight_decay_network": (float, "1e-5"),
    "train.fine_tune_last_n_layers": (_optional_int, "all"),
    "train.rgb_jitter": (_bool, "false"),
    "bench.counts": (_ints, "16,52,110"),
    "bench.repetitions": (int, "5"),
    "bench.images": (int, "1"),
    "bench.image_size": (int, "200"),
    "bench.patch_sizes": (_ints, "32,64,128"),
    "gradcheck.components": (str, "all"),
    "gradcheck.trials": (int, "20"),
    "gradcheck.tolerance": (str, "default"),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


@dataclass
class RunConfig:
    raw: dict[str, str] = field(default_factory=dict)
    values: dict = field(default_factory=dict)

    @classmethod
    def load(
        cls, path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None
    ) -> RunConfig:
        raw = {k: d for k, (_, d) in SCHEMA.items()}
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            raw.update(parse_config_text(p.read_text(), str(p)))
        for key, value in (overrides or {}).items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            raw[key] = value
        cfg = cls(raw)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    def validate(self) -> None:
        values = {}
        for key, (parser, _) in SCHEMA.items():
            try:
                values[key] = parser(self.raw[key])
            except ValueError as exc:
                raise ConfigError(f"invalid value for {key}: {exc}") from None
        self.values = values
        try:
            self.synth_config().validate()
            topo = self.topology()
            self.pyramid().validate_for(topo)
            self.nbnl_config(2)
            self.training_config()
            if not 0 < values["dataset.train_fraction"] < 1:
                raise ValueError("dataset.train_fraction must be in (0, 1)")
            if values["bench.repetitions"] < 5:
                raise ValueError("bench.repetitions must be >= 5")
            if not values["bench.counts"]:
                raise ValueError("bench.counts must list at least one count")
            if values["gradcheck.trials"] < 1:
                raise ValueError("gradcheck.trials must be >= 1")
            self.gradcheck_tolerance()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def dtype(self):
        return np.float64 if self.values["precision"] == "f64" else np.float32

    def synth_config(self) -> SynthConfig:
        v = self.values
        return SynthConfig(
            v["synth.k"],
            v["synth.images_per_class"],
            v["synth.image_size"],
            v["synth.motif_size"],
            v["synth.noise_level"],
            v["seed"],
        )

    def topology(self, in_channels: int = 3) -> FcnTopology:
        v = self.values
        return FcnTopology.from_spec_string(
            v["topology.layers"], in_channels, v["topology.normalize"], v["topology.batch_norm"]
        )

    def pyramid(self) -> ScalePyramidConfig:
        v = self.values
        return ScalePyramidConfig(v["pyramid.factors"], v["pyramid.base"], v["pyramid.interpolation"])

    def nbnl_config(self, k: int) -> NbnlConfig:
        return NbnlConfig(k, self.values["nbnl.p"], self.values["nbnl.q"])

    def training_config(self) -> TrainingConfig:
        v = self.values
        return TrainingConfig(
            epochs=v["train.epochs"],
            batch_size=v["train.batch_size"],
            learning_rate=v["train.lr"],
            lr_drop_epochs=v["train.lr_drops"] or None,
            lr_drop_factor=v["train.lr_drop_factor"],
            weight_decay_prototypes=v["train.weight_decay_prototypes"],
            weight_decay_network=v["train.weight_decay_network"],
            seed=v["seed"],
            fine_tune_last_n_layers=v["train.fine_tune_last_n_layers"],
            rgb_jitter=v["train.rgb_jitter"],
        )

    def gradcheck_tolerance(self) -> float | None:
        t = self.values["gradcheck.tolerance"]
        if t == "default":
            return None
        value = float(t)
        if value <= 0:
            raise ValueError("gradcheck.tolerance must be positive")
        return value

    def dump(self) -> str:
        return "".join(f"{k} = {self.raw[k]}\n" for k in SCHEMA)
