"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .trainer import TrainConfig


@dataclass
class RunConfig:
    # data generation
    count: int = 400
    test_count: int = 0
    contrast: float = 0.25
    noise_sigma: float = 0.15
    # paths
    data: str = ""
    checkpoint: str = ""
    out: str = "."
    # evaluation
    steps: int = 0  # 0 means the checkpoint's crf_t_test
    overlays: int = 0
    # training (mirrors TrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def flat(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"}
        d.update(asdict(self.train))
        return d


_TOP = {f.name: f for f in fields(RunConfig) if f.name != "train"}
_TRAIN = {f.name: f for f in fields(TrainConfig)}
KEYS = tuple(_TOP) + tuple(_TRAIN)


def _coerce(key: str, default, raw):
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {type(default).__name__}") from None


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def load_file(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_text(text, str(p))


def resolve(*layers: Optional[dict]) -> RunConfig:
    """Merge layers left to right (later wins; ``None`` values are skipped) over the defaults."""
    merged = {}
    for layer in layers:
        for k, v in (layer or {}).items():
            if v is None:
                continue
            if k not in KEYS:
                raise ConfigError(f"unknown key {k!r}")
            merged[k] = v
    base = RunConfig()
    top = {k: _coerce(k, getattr(base, k), v) for k, v in merged.items() if k in _TOP}
    tdefaults = TrainConfig()
    tvals = {k: _coerce(k, getattr(tdefaults, k), v) for k, v in merged.items() if k in _TRAIN}
    try:
        train = TrainConfig(**tvals)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(**top, train=train)


def dumps(cfg: RunConfig) -> str:
    lines = ["# resolved run configuration"]
    lines += [f"{k} = {v}" for k, v in cfg.flat().items()]
    return "\n".join(lines) + "\n"


def echo(cfg: RunConfig, out_dir, name: str = "config.txt") -> Path:
    p = Path(out_dir)
    p.mkdir(parents=True, exist_ok=True)
    target = p / name
    target.write_text(dumps(cfg))
    return target
