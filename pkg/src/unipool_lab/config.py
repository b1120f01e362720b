"""Model, training and experiment configuration with strict validation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

from .routing import ROUTER_KINDS

BYTE_VOCAB = 256
BOS_ID, EOS_ID, PAD_ID = 256, 257, 258
DEFAULT_VOCAB = 259


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


def _from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(where, "expected a JSON object")
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in data:
        if key not in names:
            raise ConfigError(f"{where}.{key}" if where else key, "unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        if f.type in ("int", "int | None") and v is not None and (isinstance(v, bool) or not isinstance(v, int)):
            raise ConfigError(f"{where}.{f.name}" if where else f.name, f"expected an integer, got {v!r}")
        if f.type in ("float", "float | None") and v is not None:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{where}.{f.name}" if where else f.name, f"expected a number, got {v!r}")
            v = float(v)
        if f.type == "bool" and not isinstance(v, bool):
            raise ConfigError(f"{where}.{f.name}" if where else f.name, f"expected true/false, got {v!r}")
        if f.type == "str" and not isinstance(v, str):
            raise ConfigError(f"{where}.{f.name}" if where else f.name, f"expected a string, got {v!r}")
        kwargs[f.name] = v
    return cls(**kwargs)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    hidden: int = 64
    n_heads: int = 4
    n_kv_heads: int = 2
    ffn_dim: int | None = None
    vocab_size: int = DEFAULT_VOCAB
    seq_len: int = 128
    mode: str = "moe"
    n_groups: int = 1
    experts_per_layer: int = 8
    pool_size: int | None = None
    top_k: int = 1
    router: str = "norm_router"
    aux_alpha: float = 0.0
    pool_alpha: float = 1e-2
    router_eps: float = 1e-6
    router_c: float | None = None
    router_c_samples: int = 100_000
    rope_base: float = 1_000_000.0
    init_std: float = 0.01
    norm_eps: float = 1e-5
    tied_embeddings: bool = False

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden)
        self.validate()

    def validate(self) -> None:
        for name in ("n_layers", "hidden", "n_heads", "n_kv_heads", "ffn_dim", "vocab_size", "seq_len",
                     "n_groups", "experts_per_layer", "top_k", "router_c_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be positive")
        if self.mode not in ("dense", "moe"):
            raise ConfigError("mode", f"expected 'dense' or 'moe', got {self.mode!r}")
        if self.hidden % self.n_heads:
            raise ConfigError("n_heads", f"{self.n_heads} does not divide hidden={self.hidden}")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError("n_kv_heads", f"{self.n_kv_heads} does not divide n_heads={self.n_heads}")
        if (self.hidden // self.n_heads) % 2:
            raise ConfigError("n_heads", "head dimension must be even for rotary embeddings")
        if self.vocab_size < BYTE_VOCAB:
            raise ConfigError("vocab_size", "must cover the 256 byte values")
        if self.router not in ROUTER_KINDS:
            raise ConfigError("router", f"expected one of {ROUTER_KINDS}, got {self.router!r}")
        if self.aux_alpha < 0 or self.pool_alpha < 0:
            raise ConfigError("aux_alpha" if self.aux_alpha < 0 else "pool_alpha", "must be non-negative")
        if self.router_eps <= 0:
            raise ConfigError("router_eps", "must be positive")
        if self.router_c is not None and self.router_c <= 0:
            raise ConfigError("router_c", "must be positive")
        if self.init_std <= 0:
            raise ConfigError("init_std", "must be positive")
        if self.mode == "dense":
            return
        if self.aux_alpha > 0 and self.pool_alpha > 0:
            raise ConfigError("pool_alpha", "per-layer and pool auxiliary losses cannot both be active")
        if self.n_layers % self.n_groups:
            raise ConfigError("n_groups", f"{self.n_groups} does not divide n_layers={self.n_layers}")
        if self.pool_size is not None and self.pool_size < 1:
            raise ConfigError("pool_size", "must be positive")
        if self.num_experts % self.n_groups:
            raise ConfigError("pool_size", f"n_groups={self.n_groups} does not divide pool size {self.num_experts}")
        if self.top_k > self.group_size:
            raise ConfigError("top_k", f"{self.top_k} exceeds the group pool size {self.group_size}")

    @property
    def num_experts(self) -> int:
        if self.mode == "dense":
            return 0
        if self.pool_size is not None:
            return self.pool_size
        return self.experts_per_layer * self.n_layers

    @property
    def group_size(self) -> int:
        return self.num_experts // self.n_groups

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    @property
    def ownership(self) -> str:
        if self.mode == "dense":
            return "dense"
        if self.n_groups == self.n_layers:
            return "private"
        return "global" if self.n_groups == 1 else "grouped"

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict, where: str = "model") -> "ModelConfig":
        return _from_dict(cls, data, where)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 16
    micro_batches: int = 1
    lr: float = 5e-4
    min_lr: float = 5e-5
    warmup_fraction: float = 0.01
    grad_clip: float = 1.0
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    eval_every: int = 100
    eval_windows: int = 32
    val_fraction: float = 0.1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("train.steps", "must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be positive")
        if self.micro_batches < 1 or self.batch_size % self.micro_batches:
            raise ConfigError("train.micro_batches", "must be positive and divide batch_size")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("train.val_fraction", "must lie in (0, 1)")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("train.warmup_fraction", "must lie in [0, 1)")
        if self.lr <= 0 or self.min_lr < 0 or self.min_lr > self.lr:
            raise ConfigError("train.min_lr", "need 0 <= min_lr <= lr and lr > 0")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict, where: str = "train") -> "TrainConfig":
        return _from_dict(cls, data, where)


@dataclass(frozen=True)
class AnalysisConfig:
    probe_protocols: tuple = ()
    probe_windows: int = 16
    heldout_windows: int = 16
    top_n: int = 8

    @classmethod
    def from_dict(cls, data: dict, where: str = "analysis") -> "AnalysisConfig":
        data = dict(data)
        protos = data.pop("probe_protocols", [])
        if not isinstance(protos, list) or not all(isinstance(p, str) for p in protos):
            raise ConfigError(f"{where}.probe_protocols", "expected a list of protocol names")
        cfg = _from_dict(cls, data, where)
        return dataclasses.replace(cfg, probe_protocols=tuple(protos))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["probe_protocols"] = list(self.probe_protocols)
        return d


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    data: str = ""
    output_dir: str = "runs/default"
    seed: int = 42

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "expected a JSON object")
        allowed = {"model", "train", "analysis", "data", "output_dir", "seed"}
        for key in data:
            if key not in allowed:
                raise ConfigError(key, "unknown field")
        seed = data.get("seed", 42)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError("seed", "expected an integer")
        for key in ("data", "output_dir"):
            if key in data and not isinstance(data[key], str):
                raise ConfigError(key, "expected a string")
        return cls(
            model=ModelConfig.from_dict(data.get("model", {})),
            train=TrainConfig.from_dict(data.get("train", {})),
            analysis=AnalysisConfig.from_dict(data.get("analysis", {})),
            data=data.get("data", ""),
            output_dir=data.get("output_dir", "runs/default"),
            seed=seed,
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("<file>", f"invalid JSON: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "analysis": self.analysis.to_dict(),
            "data": self.data,
            "output_dir": self.output_dir,
            "seed": self.seed,
        }


def config_hash(obj) -> str:
    d = obj.to_dict() if hasattr(obj, "to_dict") else obj
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def vanilla_config(n_layers: int = 4, experts_per_layer: int = 8, **kw) -> ModelConfig:
    """Layer-private experts, softmax top-1, per-layer aux 1e-2."""
    base = dict(n_layers=n_layers, n_groups=n_layers, experts_per_layer=experts_per_layer, router="softmax",
                aux_alpha=1e-2, pool_alpha=0.0)
    base.update(kw)
    return ModelConfig(**base)


def unipool_config(n_layers: int = 4, experts_per_layer: int = 8, **kw) -> ModelConfig:
    """One shared pool of experts_per_layer * L experts, NormRouter, pool aux 1e-2."""
    base = dict(n_layers=n_layers, n_groups=1, experts_per_layer=experts_per_layer, router="norm_router",
                aux_alpha=0.0, pool_alpha=1e-2)
    base.update(kw)
    return ModelConfig(**base)
