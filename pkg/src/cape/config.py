"""Flat key=value run configuration.

Files are UTF-8 text, one `key=value` per line, `#` comments allowed.
Unknown keys are rejected; every key has a documented default. Command-line
overrides win over file values. Run directories are content-addressed by a
hash of the effective configuration.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # inputs/outputs
    data: str = ""                  # dataset CSV (see data module schema)
    truth: str = ""                 # compartment-fraction CSV from simulate
    checkpoint: str = ""            # input checkpoint for downstream commands
    seed: int = 0
    figures: bool = True            # render PNG figures next to the CSVs

    # model dimensions
    lookback: int = 36
    patch_len: int = 4
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    prototypes: int = 16
    ff_mult: int = 2
    roles: str = ""                 # comma-separated tags; empty = default mix

    # simulation corpus
    sim_series: int = 200
    sim_length: int = 100
    sim_noise: float = 0.05
    sim_observable: str = "incidence"   # or "prevalence"
    sim_beta_min: float = 0.15
    sim_beta_max: float = 0.6
    sim_gamma_min: float = 0.05
    sim_gamma_max: float = 0.25
    sim_mu_min: float = 0.0
    sim_mu_max: float = 0.05
    sim_i0_min: float = 0.002
    sim_i0_max: float = 0.02
    population: float = 1.0e6

    # optimization
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-5
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    stride: int = 2
    mask_ratio: float = 0.3
    split_train: float = 0.6
    split_val: float = 0.1
    split_test: float = 0.3
    finetune_epochs: int = 5
    finetune_lr: float = 1e-3
    lambda_finetune: float = 1e-3
    horizon: int = 4

    # loss weights and ranges
    lambda_align: float = 1e-5
    epsilon_mono: float = 0.01
    alpha_mix: float = 0.1
    perturb_eps: float = 0.05
    r0_lower: float = 0.0
    r0_upper: float = 20.0
    masked_only: bool = False
    normalize_contrastive: bool = True
    ngm_subset: str = "all"

    # evaluation
    horizons: str = "1,2,4,8,16"
    gradcheck_seeds: int = 10

    def horizon_list(self) -> list[int]:
        try:
            return [int(tok) for tok in self.horizons.split(",") if tok.strip()]
        except ValueError:
            raise ConfigError(f"bad horizons list {self.horizons!r}") from None

    def to_lines(self) -> list[str]:
        return [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]

    def content_hash(self) -> str:
        blob = "\n".join(sorted(self.to_lines())).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {name}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"key {name}: expected {kind}, got {raw!r}") from None
    return raw


def apply_setting(cfg: RunConfig, key: str, value: str) -> None:
    key = key.strip()
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(cfg, key, _coerce(key, value))


def load_config(path: str | None = None,
                overrides: list[str] | None = None) -> RunConfig:
    """Build the effective config: defaults, then file, then overrides."""
    cfg = RunConfig()
    if path:
        try:
            text = open(path, encoding="utf-8").read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for line_no, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{line_no}: expected key=value")
            key, value = stripped.split("=", 1)
            apply_setting(cfg, key, value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        apply_setting(cfg, key, value)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.lookback % cfg.patch_len != 0:
        raise ConfigError("lookback must be divisible by patch_len")
    if cfg.hidden % cfg.heads != 0:
        raise ConfigError("hidden must be divisible by heads")
    splits = (cfg.split_train, cfg.split_val, cfg.split_test)
    if abs(sum(splits) - 1.0) > 1e-9:
        raise ConfigError(f"splits must sum to 1, got {splits}")
    if cfg.sim_observable not in ("incidence", "prevalence"):
        raise ConfigError(f"bad sim_observable {cfg.sim_observable!r}")
    if cfg.ngm_subset not in ("all", "infectious"):
        raise ConfigError(f"bad ngm_subset {cfg.ngm_subset!r}")
    if not 0 < cfg.mask_ratio < 1:
        raise ConfigError("mask_ratio must be in (0, 1)")
    if cfg.r0_lower > cfg.r0_upper:
        raise ConfigError("r0_lower must not exceed r0_upper")


def describe_keys() -> str:
    """One line per key with its default, for --help."""
    out = []
    for f in fields(RunConfig):
        default = getattr(RunConfig(), f.name)
        out.append(f"  {f.name} (default: {default!r})")
    return "\n".join(out)
