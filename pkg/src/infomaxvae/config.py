"""Run configuration: defaults, validation, and flat key=value files.

Config files are plain `key=value` lines (blank lines and # comments
allowed); command-line flags override file values.  The same format is
written back into each run directory as the reproducibility snapshot.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

OBJECTIVES = ("vae", "beta-vae", "info-vae-mmd", "infomax")
DIVERGENCES = ("kl-f-dual", "dv")
BINARIZE_MODES = ("none", "threshold", "stochastic")


class ConfigError(ValueError):
    """Invalid configuration; the message lists every offending field."""


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "infomax"
    alpha: float = 10.0
    beta: float = 1.0
    divergence: str = "kl-f-dual"
    z_dim: int = 8
    batch: int = 64
    steps: int = 10_000
    seed: int = 0
    width: int = 256
    critic_width: int = 400
    lr_vae: float = 1e-3
    lr_critic: float = 1e-4
    critic_inner_steps: int = 1  # 0 disables critic updates entirely
    checkpoint_every: int = 1000
    data_path: str = ""
    labels_path: str = ""
    binarize: str = "none"
    subset: int = 0  # 0 keeps the full dataset
    out_dir: str = "runs/run"
    eval_mi: bool = False  # per-checkpoint MI retrains a critic; opt in
    eval_probe: bool = False
    make_plots: bool = True
    mmd_alpha: float = 0.0
    mmd_lambda: float = 1000.0

    def validate(self) -> "TrainConfig":
        problems = []
        if self.objective not in OBJECTIVES:
            problems.append(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.divergence not in DIVERGENCES:
            problems.append(f"divergence must be one of {DIVERGENCES}, got {self.divergence!r}")
        if self.binarize not in BINARIZE_MODES:
            problems.append(f"binarize must be one of {BINARIZE_MODES}, got {self.binarize!r}")
        if self.alpha < 0:
            problems.append(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            problems.append(f"beta must be >= 0, got {self.beta}")
        if self.batch < 2:
            problems.append(f"batch must be >= 2, got {self.batch}")
        if self.z_dim < 1:
            problems.append(f"z_dim must be >= 1, got {self.z_dim}")
        if self.width < 1:
            problems.append(f"width must be >= 1, got {self.width}")
        if self.critic_width < 1:
            problems.append(f"critic_width must be >= 1, got {self.critic_width}")
        if self.steps < 0:
            problems.append(f"steps must be >= 0, got {self.steps}")
        if self.subset < 0:
            problems.append(f"subset must be >= 0, got {self.subset}")
        if self.checkpoint_every < 1:
            problems.append(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.lr_vae <= 0 or self.lr_critic <= 0:
            problems.append(f"learning rates must be > 0, got {self.lr_vae}, {self.lr_critic}")
        if self.critic_inner_steps < 0:
            problems.append(f"critic_inner_steps must be >= 0, got {self.critic_inner_steps}")
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    if kind in ("bool", bool):
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"field {name!r} expects a boolean, got {raw!r}")
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw.strip())
    return values


def load_config_file(path) -> dict:
    with open(path) as fh:
        return parse_config_text(fh.read())


def build_config(file_values: dict | None = None,
                 overrides: dict | None = None) -> TrainConfig:
    """Layer overrides (CLI flags) on top of file values on top of defaults."""
    merged = dict(file_values or {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = value
    return replace(TrainConfig(), **merged).validate()


def config_to_text(config: TrainConfig) -> str:
    lines = []
    for f in sorted(fields(TrainConfig), key=lambda f: f.name):
        lines.append(f"{f.name}={getattr(config, f.name)}")
    return "\n".join(lines) + "\n"
