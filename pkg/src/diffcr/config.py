"""Run configuration: INI file with sections, overridable from the command line."""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, fields, replace
from typing import Optional

from .data import ToyDataset
from .estimator import DiffCRDiT

SECTIONS = {
    "model": ("image_side", "patch_side", "hidden_dim", "heads", "layers", "mlp_ratio",
              "classes", "train_timesteps", "sample_steps", "regions", "cfg_scale", "routing"),
    "ratio": ("target_ratio", "ratio_loss_coeff", "ratio_loss_coeff_end"),
    "train": ("seed", "steps", "batch_size", "learning_rate", "weight_decay", "uncond_prob",
              "beta_start", "beta_end", "log_every", "checkpoint_every"),
    "data": ("generator", "dataset_size", "pixel_noise", "intensity_jitter"),
}


@dataclass(frozen=True)
class RunConfig:
    image_side: int = 16
    patch_side: int = 2
    hidden_dim: int = 64
    heads: int = 4
    layers: int = 8
    mlp_ratio: int = 4
    classes: int = 10
    train_timesteps: int = 200
    sample_steps: int = 50
    regions: int = 4
    cfg_scale: float = 4.5
    routing: bool = True
    target_ratio: float = 0.3
    ratio_loss_coeff: float = 0.3
    ratio_loss_coeff_end: Optional[float] = None
    seed: int = 0
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 3e-2
    uncond_prob: float = 0.1
    beta_start: Optional[float] = None
    beta_end: Optional[float] = None
    log_every: int = 10
    checkpoint_every: int = 500
    generator: str = "patterns"
    dataset_size: int = 2048
    pixel_noise: float = 0.05
    intensity_jitter: float = 0.1

    # -- conversions -------------------------------------------------------

    def estimator(self) -> DiffCRDiT:
        return DiffCRDiT(
            image_side=self.image_side, patch_side=self.patch_side, hidden_dim=self.hidden_dim,
            heads=self.heads, layers=self.layers, mlp_ratio=self.mlp_ratio,
            n_classes=self.classes, train_timesteps=self.train_timesteps,
            sample_steps=self.sample_steps, regions=self.regions, target_ratio=self.target_ratio,
            ratio_loss_coeff=self.ratio_loss_coeff, ratio_loss_coeff_end=self.ratio_loss_coeff_end,
            cfg_scale=self.cfg_scale, routing=self.routing, learning_rate=self.learning_rate,
            weight_decay=self.weight_decay, batch_size=self.batch_size, steps=self.steps,
            uncond_prob=self.uncond_prob, beta_start=self.beta_start, beta_end=self.beta_end,
            log_every=self.log_every, random_state=self.seed)

    def dataset(self) -> ToyDataset:
        return ToyDataset(generator=self.generator, classes=self.classes, image_side=self.image_side,
                          noise=self.pixel_noise, intensity_jitter=self.intensity_jitter)

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **kw)

    # -- text form ---------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section, keys in SECTIONS.items():
            cp[section] = {k: _dump(getattr(self, k)) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for section in cp.sections():
            if section not in SECTIONS:
                raise ValueError(f"unknown config section [{section}]")
            for key, raw in cp[section].items():
                if key not in SECTIONS[section]:
                    raise ValueError(f"unknown key {key!r} in [{section}]")
                values[key] = _load(raw, types[key])
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_ini(fh.read())

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def header(self, kind: str) -> list[str]:
        return [f"diffcr {kind}", f"config_sha256={self.digest()}"]

    def diff(self, other: "RunConfig") -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name) != getattr(other, f.name)]


def _dump(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def _load(raw: str, typ: str):
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    if typ == "bool":
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if typ == "int":
        return int(raw)
    if typ == "str":
        return raw
    return float(raw)
