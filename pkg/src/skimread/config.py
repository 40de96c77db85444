"""Configuration for the two-branch retrieval model.

All knobs live in nested dataclasses addressed by dotted keys
(``intensive.d_v``, ``loss.margin``, ...).  Two factory profiles exist:
``desk_profile`` (small dimensions, float64, fast enough to train and
gradient-check on a laptop) and ``paper_profile`` (production-scale
dimensions, float32).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Any


@dataclass
class TextConfig:
    d_word: int = 64            # word embedding dimension
    h_text: int = 64            # GRU hidden size per direction
    r_text: int = 64            # conv filters per window
    windows: tuple[int, ...] = (2, 3, 4)
    bow_binary: bool = False    # False = raw counts
    external_enabled: bool = False
    external_dim: int = 0


@dataclass
class PreviewConfig:
    kind: str = "bigru"         # "bigru" or "fc"
    hidden: int = 32            # GRU hidden per direction; output dim is 2*hidden

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden


@dataclass
class IntensiveConfig:
    d_map: int = 32             # mapped frame dimension
    windows: tuple[int, ...] = (1, 3)
    filters: int = 16           # r; must equal d_v for the max-pool residual
    stride: int = 2
    d_k: int = 8
    d_v: int = 16
    d_ff: int = 0               # 0 -> 2*d_v
    variant: str = "paa"        # paa | mean | simple | concat_sa | sum_sa
    bias: bool = True           # biases on the attention/query projections

    @property
    def ff_dim(self) -> int:
        return self.d_ff if self.d_ff > 0 else 2 * self.d_v

    @property
    def out_dim(self) -> int:
        return len(self.windows) * self.d_v


@dataclass
class HybridConfig:
    alpha: float = 0.6
    d_lat: int = 64
    k_concepts: int = 128
    share_text_proj: bool = False
    concept_triplet_sim: str = "jaccard"   # jaccard | cosine


@dataclass
class LossConfig:
    margin: float = 0.2
    w_lat: float = 1.0
    w_con_trip: float = 1.0
    w_bce: float = 1.0
    concept_terms: bool = True  # False drops concept triplet + BCE (ablation)


@dataclass
class ModelTopology:
    branches: str = "both"      # preview | intensive | both
    dependent: bool = True      # feed the preview vector as the attention query


@dataclass
class TrainSettings:
    batch_size: int = 128
    lr: float = 1e-4
    lr_patience: int = 3        # consecutive non-improving epochs before halving
    early_stop_patience: int = 10
    max_epochs: int = 50
    seed: int = 0
    monitor: str = "sumr"       # sumr (maximize) | loss (minimize)
    dtype: str = "float64"      # float64 | float32
    vocab_min_count: int = 5
    early_stop: bool = True

    def __post_init__(self) -> None:
        if self.early_stop_patience <= self.lr_patience:
            raise ValueError("early_stop_patience must exceed lr_patience")


@dataclass
class DataConfig:
    kind: str = "synthetic"     # synthetic | files
    # synthetic knobs
    seed: int = 7
    n_videos: int = 48
    captions_per_video: int = 1
    m_min: int = 4
    m_max: int = 8
    d_frame: int = 16
    vocab_size: int = 72
    n_topics: int = 0           # 0 -> one topic per video
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    # file knobs
    feature_file: str = ""
    caption_files: dict[str, str] = field(default_factory=dict)  # split -> path
    external_file: str = ""


@dataclass
class Config:
    text: TextConfig = field(default_factory=TextConfig)
    preview: PreviewConfig = field(default_factory=PreviewConfig)
    intensive: IntensiveConfig = field(default_factory=IntensiveConfig)
    hybrid: HybridConfig = field(default_factory=HybridConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelTopology = field(default_factory=ModelTopology)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        if self.preview.kind not in ("bigru", "fc"):
            raise ValueError(f"unknown preview.kind {self.preview.kind!r}")
        if self.model.branches not in ("preview", "intensive", "both"):
            raise ValueError(f"unknown model.branches {self.model.branches!r}")
        if self.model.dependent and self.model.branches != "both":
            raise ValueError("model.dependent requires both branches")
        if self.intensive.filters != self.intensive.d_v:
            # the max-pool residual adds an r-vector to a d_v-vector
            raise ValueError(
                f"intensive.filters ({self.intensive.filters}) must equal "
                f"intensive.d_v ({self.intensive.d_v})"
            )
        if not self.intensive.windows or min(self.intensive.windows) < 1:
            raise ValueError("intensive.windows must be non-empty, all >= 1")
        if self.intensive.stride < 1:
            raise ValueError("intensive.stride must be >= 1")
        if not 0.0 <= self.hybrid.alpha <= 1.0:
            raise ValueError("hybrid.alpha must lie in [0, 1]")
        if self.intensive.variant not in ("paa", "mean", "simple", "concat_sa", "sum_sa"):
            raise ValueError(f"unknown intensive.variant {self.intensive.variant!r}")
        if self.train.monitor not in ("sumr", "loss"):
            raise ValueError(f"unknown train.monitor {self.train.monitor!r}")

    # -- dict / file round-trip -------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return _asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Config":
        cfg = _from_dict(cls, d)
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Config":
        return cls.from_dict(json.loads(text))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str) -> "Config":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha1(canon.encode("utf-8")).hexdigest()[:12]

    # -- dotted-key access -------------------------------------------------

    def get(self, key: str) -> Any:
        obj: Any = self
        for part in key.split("."):
            obj = getattr(obj, part)
        return obj

    def set(self, key: str, value: Any) -> None:
        parts = key.split(".")
        obj: Any = self
        for part in parts[:-1]:
            obj = getattr(obj, part)
        current = getattr(obj, parts[-1])
        if isinstance(current, tuple) and isinstance(value, (list, tuple)):
            value = tuple(value)
        setattr(obj, parts[-1], value)

    def with_overrides(self, overrides: dict[str, Any]) -> "Config":
        cfg = Config.from_dict(self.to_dict())
        for key, value in overrides.items():
            cfg.set(key, value)
        cfg.validate()
        return cfg


def _asdict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _asdict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return list(obj)
    if isinstance(obj, dict):
        return {k: _asdict(v) for k, v in obj.items()}
    return obj


def _from_dict(cls: type, d: dict[str, Any]) -> Any:
    kwargs = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        value = d[f.name]
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.type, str) and f.type in _NESTED
        ):
            sub_cls = _NESTED[f.type] if isinstance(f.type, str) else f.type
            kwargs[f.name] = _from_dict(sub_cls, value)
        elif isinstance(value, list):
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    return cls(**kwargs)


# postponed-annotation lookup for nested dataclass fields
_NESTED = {
    "TextConfig": TextConfig,
    "PreviewConfig": PreviewConfig,
    "IntensiveConfig": IntensiveConfig,
    "HybridConfig": HybridConfig,
    "LossConfig": LossConfig,
    "ModelTopology": ModelTopology,
    "TrainSettings": TrainSettings,
    "DataConfig": DataConfig,
}


def desk_profile(seed: int = 0) -> Config:
    """Small, fast configuration for tests and local experiments.

    Video-side dimensions are the small audit set (frame dim 16, overview
    dim 16, 16 filters); text dims stay at 64.  k_concepts is clamped to the
    corpus vocabulary during pipeline assembly when the corpus is smaller.
    """
    cfg = Config()
    cfg.text = TextConfig(d_word=64, h_text=64, r_text=64)
    cfg.preview = PreviewConfig(kind="bigru", hidden=8)
    cfg.intensive = IntensiveConfig(
        d_map=32, windows=(1, 3), filters=16, stride=2, d_k=8, d_v=16
    )
    cfg.hybrid = HybridConfig(alpha=0.6, d_lat=64, k_concepts=128)
    cfg.train = TrainSettings(
        batch_size=16, lr=1e-3, seed=seed, dtype="float64", vocab_min_count=1
    )
    cfg.data = DataConfig(seed=seed + 7)
    cfg.validate()
    return cfg


def paper_profile(seed: int = 0) -> Config:
    """Production-scale configuration matching the published dimensioning."""
    cfg = Config()
    cfg.text = TextConfig(d_word=500, h_text=512, r_text=512)
    cfg.preview = PreviewConfig(kind="bigru", hidden=512)
    cfg.intensive = IntensiveConfig(
        d_map=2048, windows=(1, 3), filters=1024, stride=2, d_k=512, d_v=1024
    )
    cfg.hybrid = HybridConfig(alpha=0.6, d_lat=1536, k_concepts=512)
    cfg.train = TrainSettings(
        batch_size=128, lr=1e-4, seed=seed, dtype="float32", vocab_min_count=5
    )
    cfg.data = DataConfig(kind="files", d_frame=4096)
    cfg.validate()
    return cfg
