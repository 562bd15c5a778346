"""Run configuration and seed streams.

Every stochastic component draws its seed from the single run seed through
:func:`stream_seed`, which hashes a stream name into numpy's
``SeedSequence`` spawn key. Streams in use: ``dvi.init``, ``dvi.train``,
``dvi.sample``, ``reconstruct``, ``metrics``.
"""

from dataclasses import dataclass, field, fields, asdict
import json
import zlib

import numpy as np

from .errors import ConfigError


def stream_seed(seed, name):
    seq = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return int(seq.generate_state(1, dtype=np.uint32)[0])


@dataclass
class TrajectorySection:
    num_main_views: int = 4
    num_interp: int = 2
    radius: float = 2.5
    interp_elevation_pattern: list = field(default_factory=lambda: [30.0, -30.0])


@dataclass
class DVISection:
    image_size: int = 32
    patch_size: int = 8
    feature_dim: int = 16
    hidden: list = field(default_factory=lambda: [256, 256])
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 8


@dataclass
class FusionSection:
    patch_size: int = 8
    embed_dim: int = 32
    num_heads: int = 1


@dataclass
class TriplaneSection:
    resolution: int = 32
    channels: int = 16
    decoder_hidden: list = field(default_factory=lambda: [64])


@dataclass
class RenderSection:
    width: int = 64
    height: int = 64
    fov_deg: float = 50.0
    n_samples: int = 128
    margin: float = 1.8
    normal_step: float = 2.0 / 64
    mask_threshold: float = 0.5


@dataclass
class ReconstructSection:
    steps: int = 2000
    learning_rate: float = 1e-2
    rays_per_step: int = 1024
    n_samples: int = 96
    dtype: str = "float32"
    lambda_lpips: float = 2.0
    lambda_mask: float = 1.0
    lambda_depth: float = 0.5
    lambda_normal: float = 0.2
    lambda_reg: float = 0.01
    extract_resolution: int = 64
    iso: float = 25.0


@dataclass
class MetricsSection:
    rings: list = field(default_factory=lambda: [0.0, 15.0, 30.0])
    views_per_ring: int = 8
    resolution: int = 128
    n_points: int = 100_000
    tau: float = 0.05
    iou_resolution: int = 128


SECTIONS = {
    "trajectory": TrajectorySection,
    "dvi": DVISection,
    "fusion": FusionSection,
    "triplane": TriplaneSection,
    "render": RenderSection,
    "reconstruct": ReconstructSection,
    "metrics": MetricsSection,
}


@dataclass
class RunConfig:
    trajectory: TrajectorySection = field(default_factory=TrajectorySection)
    dvi: DVISection = field(default_factory=DVISection)
    fusion: FusionSection = field(default_factory=FusionSection)
    triplane: TriplaneSection = field(default_factory=TriplaneSection)
    render: RenderSection = field(default_factory=RenderSection)
    reconstruct: ReconstructSection = field(default_factory=ReconstructSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    seed: int = None

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(data) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in SECTIONS.items():
            raw = data.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(section_cls)}
            bad = set(raw) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            kwargs[name] = section_cls(**raw)
        seed = data.get("seed")
        if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool) or seed < 0):
            raise ConfigError("seed must be a non-negative integer")
        return cls(**kwargs, seed=seed)

    @classmethod
    def load(cls, path):
        try:
            text = open(path).read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc

    def to_dict(self):
        return asdict(self)

    def require_seed(self):
        if self.seed is None:
            raise ConfigError("this command is stochastic: set \"seed\" in the config or pass --seed")
        return self.seed
