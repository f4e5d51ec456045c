"""Line-oriented key=value run configuration.

One assignment per line; blank lines and lines starting with '#' are
ignored.  Unknown keys and malformed values are rejected with the line
number so config typos fail before any compute starts.  Every run writes
the fully resolved configuration (defaults filled in) next to its outputs
so results stay reproducible from the artifacts alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    variant: str = "B"
    k: int = 4
    n_select: int = 4
    k_train: int = 8
    lr0: float = 5e-4
    epochs_stage1: int = 2
    epochs_stage2: int = 2
    batch_size: int = 64
    seed: int = 0
    dataset: str = ""
    gate_mode: str = ""          # empty = variant default
    second_path_mode: str = "sum"
    pad_mode: str = "neg_one"
    weight_decay_stage1: float = 1e-5
    weight_decay_stage2: float = 0.0
    stage_widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 3
    num_classes: int = 10
    image_size: int = 32
    augment: bool = True
    limit_train: int = 0         # 0 = no cap
    limit_eval: int = 0

    def validate(self) -> None:
        if self.variant not in ("A", "B", "C"):
            raise ConfigError(f"variant must be A, B or C, got {self.variant!r}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.k_train < 1:
            raise ConfigError(f"k_train must be >= 1, got {self.k_train}")
        if not 1 <= self.n_select <= self.k_train:
            raise ConfigError(
                f"n_select must be in [1, k_train], got {self.n_select}"
            )
        if self.gate_mode not in ("", "none", "soft", "hard"):
            raise ConfigError(f"unknown gate_mode {self.gate_mode!r}")
        if self.gate_mode == "hard" and self.variant != "C":
            raise ConfigError("gate_mode=hard requires variant C")
        if self.variant == "C" and self.gate_mode in ("none", "soft"):
            raise ConfigError(f"variant C cannot use gate_mode={self.gate_mode}")
        if self.second_path_mode not in ("sum", "avg"):
            raise ConfigError(
                f"second_path_mode must be sum or avg, got {self.second_path_mode!r}"
            )
        if self.pad_mode not in ("neg_one", "pos_one", "zero"):
            raise ConfigError(f"unknown pad_mode {self.pad_mode!r}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        for name in ("epochs_stage1", "epochs_stage2", "batch_size",
                     "blocks_per_stage", "num_classes", "image_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("seed", "limit_train", "limit_eval"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("weight_decay_stage1", "weight_decay_stage2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if len(self.stage_widths) < 1 or any(w < 1 for w in self.stage_widths):
            raise ConfigError(f"bad stage_widths {self.stage_widths}")


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes"):
        return True
    if low in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_widths(raw: str) -> tuple:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty width list")
    return tuple(int(p) for p in parts)


_PARSERS = {
    "variant": str,
    "k": int,
    "n_select": int,
    "k_train": int,
    "lr0": float,
    "epochs_stage1": int,
    "epochs_stage2": int,
    "batch_size": int,
    "seed": int,
    "dataset": str,
    "gate_mode": str,
    "second_path_mode": str,
    "pad_mode": str,
    "weight_decay_stage1": float,
    "weight_decay_stage2": float,
    "stage_widths": _parse_widths,
    "blocks_per_stage": int,
    "num_classes": int,
    "image_size": int,
    "augment": _parse_bool,
    "limit_train": int,
    "limit_eval": int,
}


def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            value = _PARSERS[key](raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def resolved_text(cfg: RunConfig) -> str:
    """Serialize with every key explicit, parseable by parse_config_text."""
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "stage_widths":
            value = ",".join(str(w) for w in value)
        elif isinstance(value, bool):
            value = "1" if value else "0"
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(resolved_text(cfg))
