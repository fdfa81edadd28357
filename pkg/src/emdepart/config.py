"""Configuration sections and the published per-dataset presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

SIMILARITY_VARIANTS = ("smooth_chamfer", "average", "maximum")
ABLATIONS = ("no_global", "no_residual", "no_partial_score")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    oov_policy: str = "skip"


@dataclass
class ModelConfig:
    r: int = 32
    k: int = 4
    sdm_layers: int = 2
    r_h: int | None = None  # attention head dim of the SDM; defaults to r
    enc_layers: int = 2
    enc_heads: int = 4
    img_mlp_layers: int = 2
    mlp_hidden: int | None = None  # defaults to r
    dropout: float = 0.0
    no_global: bool = False
    no_residual: bool = False

    @property
    def head_dim(self) -> int:
        return self.r_h or self.r

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or self.r


@dataclass
class AlignmentConfig:
    tau: float = 32.0
    lambda_local: float = 0.1
    lambda_var: float = 1.0
    lambda_div: float = 3.0
    gamma: float = 0.10
    eps: float = 1e-4
    p: int = 3
    similarity_variant: str = "smooth_chamfer"
    pooling: str = "mean"


@dataclass
class TrainConfig:
    base_lr: float = 1.0e-4
    batch_size: int = 64
    epochs: int = 32
    warmup_epochs: int = 0
    seed: int = 0
    dtype: str = "float64"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    validation: bool = False  # fit on the validation view instead of the full seen split
    log_eval: bool = True  # evaluate every epoch for the val_T1 / val_H columns


@dataclass
class EvalConfig:
    p: int | None = None  # defaults to alignment.p
    gamma_cs: float | None = None  # None -> select on the validation view
    gamma_grid: list[float] = field(
        default_factory=lambda: [round(0.05 * i, 2) for i in range(21)])
    no_partial_score: bool = False


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "Config":
        m, a, t = self.model, self.alignment, self.train
        if m.r < 1 or m.k < 1 or m.sdm_layers < 1:
            raise ConfigError("r, k and sdm_layers must be positive")
        if m.r % m.enc_heads:
            raise ConfigError(f"r={m.r} is not divisible by enc_heads={m.enc_heads}")
        if not 0.0 <= m.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if a.tau <= 0 or a.eps <= 0 or a.gamma < 0:
            raise ConfigError("need tau > 0, eps > 0, gamma >= 0")
        if min(a.lambda_local, a.lambda_var, a.lambda_div) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 1 <= a.p <= m.k:
            raise ConfigError(f"p={a.p} must lie in [1, k={m.k}]")
        if self.eval.p is not None and not 1 <= self.eval.p <= m.k:
            raise ConfigError(f"eval p={self.eval.p} must lie in [1, k={m.k}]")
        if a.similarity_variant not in SIMILARITY_VARIANTS:
            raise ConfigError(f"unknown similarity variant {a.similarity_variant!r}")
        if a.pooling not in ("mean", "max"):
            raise ConfigError(f"unknown pooling {a.pooling!r}")
        if t.base_lr <= 0 or t.batch_size < 1 or t.epochs < 1 or t.warmup_epochs < 0:
            raise ConfigError("invalid optimization settings")
        if t.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {t.dtype!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        sections = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, sub_cls in (("data", DataConfig), ("model", ModelConfig),
                              ("alignment", AlignmentConfig), ("train", TrainConfig),
                              ("eval", EvalConfig)):
            body = d.get(name, {}) or {}
            allowed = {f.name for f in fields(sub_cls)}
            bad = set(body) - allowed
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = sub_cls(**body)
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_ablation(self, flag: str) -> "Config":
        if flag == "no_global":
            return replace(self, model=replace(self.model, no_global=True))
        if flag == "no_residual":
            return replace(self, model=replace(self.model, no_residual=True))
        if flag == "no_partial_score":
            return replace(self, eval=replace(self.eval, no_partial_score=True))
        if flag in ("average", "maximum"):
            return replace(self, alignment=replace(self.alignment, similarity_variant=flag))
        raise ConfigError(f"unknown ablation {flag!r}")


def preset(name: str) -> Config:
    """Hyperparameters reported for AWA2, CUB and FLO."""
    name = name.lower()
    table = {
        "awa2": dict(lr=1.0e-4, dropout=0.35, bs=64, warm=0, epochs=32, ll=0.1, lv=1.0,
                     ld=3.0, k=4, p=3, tau=32.0, gamma=0.10, r=256),
        "cub": dict(lr=8.0e-4, dropout=0.15, bs=40, warm=2, epochs=32, ll=0.5, lv=1.0,
                    ld=3.0, k=5, p=3, tau=4.2, gamma=0.25, r=64),
        "flo": dict(lr=5.0e-4, dropout=0.12, bs=48, warm=0, epochs=40, ll=0.5, lv=1.0,
                    ld=3.0, k=4, p=1, tau=4.0, gamma=0.75, r=128),
    }
    if name not in table:
        raise ConfigError(f"no preset named {name!r}; choose from {sorted(table)}")
    h = table[name]
    return Config(
        model=ModelConfig(r=h["r"], k=h["k"], sdm_layers=2, enc_layers=2, img_mlp_layers=2,
                          dropout=h["dropout"]),
        alignment=AlignmentConfig(tau=h["tau"], lambda_local=h["ll"], lambda_var=h["lv"],
                                  lambda_div=h["ld"], gamma=h["gamma"], eps=1e-4, p=h["p"]),
        train=TrainConfig(base_lr=h["lr"], batch_size=h["bs"], epochs=h["epochs"],
                          warmup_epochs=h["warm"]),
    ).validate()
