"""Run configuration: one dataclass drives data, model, and training.

The defaults form the toy profile: small widths and 64px images chosen so a
full training run fits in CPU minutes. FULL_SCALE records the reference
full-scale hyperparameters for comparison; they are far outside desk-scale
budgets and are never the default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .bfser import TOY_WIDTHS
from .errors import ConfigError

# reference full-scale profile (documentation, not a runnable default);
# lr decays to lr_final over the 160 epochs at that scale
FULL_SCALE = {
    "image_size": 448,
    "d_model": 96,
    "d_inner": 192,
    "d_conv": 3,
    "lr": 1e-4,
    "lr_final": 5e-6,
    "batch_size": 16,
    "epochs": 160,
}

_DISCRETIZATIONS = ("taylor", "zoh")
_SCAN_MODES = ("sequential", "chunked")


@dataclass
class RunConfig:
    # data
    data_root: str = "data"
    image_size: int = 64
    # model
    widths: tuple = TOY_WIDTHS
    d_model: int = 24
    d_inner: int = 48
    d_conv: int = 3
    n_state: int = 4
    knowledge_channels: int = 64
    discretization: str = "taylor"
    scan_mode: str = "sequential"
    per_direction_params: bool = False
    per_channel_gate: bool = False
    # mode and ablation flags
    rgb_only: bool = False
    enable_lsfm: bool = True
    enable_ffm: bool = True
    enable_ssfm: bool = True
    enable_cssm: bool = True
    enable_gate: bool = True
    enable_scan_blocks: bool = True
    embed_u: bool = True
    enable_ckler: bool = False
    enable_injection: bool = False
    pseudo_aux: bool = False
    # training
    lr: float = 1e-3
    batch_size: int = 3
    steps: int = 1500
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.validate()

    def validate(self):
        for field in ("image_size", "d_model", "d_inner", "d_conv", "n_state",
                      "knowledge_channels", "batch_size", "steps"):
            v = getattr(self, field)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"{field} must be a positive integer, got {v!r}")
        if len(self.widths) != 5 or any(
                not isinstance(w, int) or w <= 0 for w in self.widths):
            raise ConfigError(f"widths must be 5 positive ints, got {self.widths}")
        if self.image_size % 32:
            raise ConfigError(
                f"image_size must be a multiple of 32 (five halvings), "
                f"got {self.image_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.discretization not in _DISCRETIZATIONS:
            raise ConfigError(f"discretization must be one of "
                              f"{_DISCRETIZATIONS}, got {self.discretization!r}")
        if self.scan_mode not in _SCAN_MODES:
            raise ConfigError(
                f"scan_mode must be one of {_SCAN_MODES}, got {self.scan_mode!r}")
        if self.enable_injection and not self.enable_ckler:
            raise ConfigError("enable_injection requires enable_ckler")
        if self.pseudo_aux and not self.enable_ckler:
            raise ConfigError("pseudo_aux needs the translator to synthesize "
                              "the auxiliary stream")
        if self.enable_ckler and self.rgb_only:
            raise ConfigError("the translator needs the dual-stream mode")
        if self.log_every <= 0:
            raise ConfigError(f"log_every must be positive, got {self.log_every}")
        return self

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                d = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path} must hold a JSON object")
        return cls.from_dict(d)

    # model construction -------------------------------------------------

    def segmenter_kwargs(self):
        return dict(widths=self.widths, d_model=self.d_model,
                    d_inner=self.d_inner, n_state=self.n_state,
                    d_conv=self.d_conv, discretization=self.discretization,
                    scan_mode=self.scan_mode,
                    per_direction_params=self.per_direction_params,
                    per_channel_gate=self.per_channel_gate,
                    rgb_only=self.rgb_only, enable_lsfm=self.enable_lsfm,
                    enable_ffm=self.enable_ffm, enable_ssfm=self.enable_ssfm,
                    enable_cssm=self.enable_cssm, enable_gate=self.enable_gate,
                    enable_scan_blocks=self.enable_scan_blocks,
                    embed_u=self.embed_u,
                    knowledge_channels=self.knowledge_channels)
