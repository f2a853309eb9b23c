"""Experiment configuration, named profiles and fingerprints."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .capsnet import Geometry
from .data import AffineRanges
from .sparsity import SparsityConfig

MODES = ("sparse", "dense")


@dataclass
class SvmSettings:
    C: float = 10.0
    gamma: float | None = None  # None: 1 / (n_features * feature variance)
    train_cap: int = 10_000
    tol: float = 1e-3


@dataclass
class EvalSizes:
    svm_train: int = 5000
    mnist_test: int = 5000
    affine_train: int = 5000
    affine_test: int = 5000
    diagnostics: int = 10_000


@dataclass
class ExperimentConfig:
    mnist_dir: str | None = None
    train_subset: int = 10_000
    geometry: Geometry = field(default_factory=Geometry)
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    mode: str = "sparse"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    steps: int = 30_000
    seed_weights: int = 0
    seed_data: int = 1
    seed_affine: int = 2
    affine: AffineRanges = field(default_factory=AffineRanges)
    svm: SvmSettings = field(default_factory=SvmSettings)
    eval: EvalSizes = field(default_factory=EvalSizes)
    log_every: int = 50
    checkpoint_every: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.sparsity.n_latent != self.geometry.n_latent:
            raise ValueError(f"sparsity.n_latent={self.sparsity.n_latent} but geometry.n_latent={self.geometry.n_latent}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["geometry"] = self.geometry.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "geometry" in d:
            d["geometry"] = Geometry.from_dict(d["geometry"])
        if "sparsity" in d:
            d["sparsity"] = SparsityConfig(**d["sparsity"])
        if "affine" in d:
            d["affine"] = AffineRanges(**d["affine"])
        if "svm" in d:
            d["svm"] = SvmSettings(**d["svm"])
        if "eval" in d:
            d["eval"] = EvalSizes(**d["eval"])
        return cls(**d)

    def validate_paths(self):
        if self.mnist_dir is not None and not Path(self.mnist_dir).is_dir():
            raise FileNotFoundError(f"mnist_dir does not exist: {self.mnist_dir}")

    def fingerprint(self) -> str:
        """Hash of the canonical config, ignoring paths and logging cadence."""
        d = self.to_dict()
        for key in ("out_dir", "mnist_dir", "log_every", "checkpoint_every"):
            d.pop(key, None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_mode(self, mode: str) -> "ExperimentConfig":
        return replace(self, mode=mode)

    def resolved_out_dir(self) -> Path:
        root = os.environ.get("CAPSPARSE_OUT")
        return Path(root) / Path(self.out_dir).name if root else Path(self.out_dir)


def desk_profile(**overrides) -> ExperimentConfig:
    """Laptop-scale run: narrow conv stack, 28px canvas, 3,000 steps."""
    geo = Geometry(canvas=28, conv_channels=64, n_primary=8, primary_dim=8, n_latent=16, latent_dim=16)
    cfg = ExperimentConfig(geometry=geo, batch_size=32, steps=3000, train_subset=10_000,
                           out_dir="runs/desk")
    return replace(cfg, **overrides)


def paper_profile(**overrides) -> ExperimentConfig:
    """Full width: 256 conv channels, 32 primary types, 40px canvas, 30,000 steps of 128."""
    geo = Geometry(canvas=40, conv_channels=256, n_primary=32, primary_dim=8, n_latent=16, latent_dim=16)
    cfg = ExperimentConfig(geometry=geo, batch_size=128, steps=30_000, train_subset=60_000,
                           out_dir="runs/paper")
    return replace(cfg, **overrides)


PROFILES = {"desk": desk_profile, "paper": paper_profile}


def load_config(path) -> ExperimentConfig:
    """Read a JSON config; an optional ``"profile"`` key supplies defaults."""
    raw = json.loads(Path(path).read_text())
    profile = raw.pop("profile", None)
    if profile:
        base = PROFILES[profile]().to_dict()
        for key, val in raw.items():
            if isinstance(val, dict) and isinstance(base.get(key), dict):
                base[key].update(val)
            else:
                base[key] = val
        raw = base
    cfg = ExperimentConfig.from_dict(raw)
    cfg.validate_paths()
    return cfg
