"""Run configuration: a flat ``key = value`` text file where every key has a default."""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

ARMS = ("A", "B", "C", "D", "E")
MAP_MODES = ("soft-sum", "hard-argmax")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    out_dir: str = "runs/default"
    data_dir: str = ""  # empty: <out_dir>/data

    # data
    height: int = 32
    width: int = 32
    k: int = 4
    n_labeled: int = 4
    n_unlabeled: int = 36
    n_test: int = 10
    data_seed: int = 0

    # seeds
    init_seed: int = 0
    train_seed: int = 0
    cluster_seed: int = 0
    ablation_seeds: str = "0,1,2"

    # optimisation
    total_iters: int = 2000
    phase1_iters: int = 500
    batch_size: int = 16
    labeled_per_batch: int = 8
    learning_rate: float = 1e-2
    momentum: float = 0.9
    ema_decay: float = 0.99

    # losses
    alpha: float = 0.1
    beta1: float = 0.1
    beta2_final: float = 0.5
    warmup_fraction: float = 0.25
    map_mode: str = "soft-sum"
    consistency_on_labeled: bool = False

    # network
    levels: int = 3
    base_channels: int = 16
    noise_sigma: float = 0.1
    noise_clip: float = 0.2
    warm_start: bool = True
    detach_scs: bool = False

    # subclass generation
    max_points_per_class: int = 20000
    cluster_iters: int = 50
    split_background: bool = False

    # run
    ablation_arm: str = "E"
    eval_every: int = 0
    eval_mode: str = "micro"

    def __post_init__(self):
        if self.ablation_arm not in ARMS:
            raise ConfigError(f"ablation_arm must be one of {ARMS}, got {self.ablation_arm!r}")
        if self.map_mode not in MAP_MODES:
            raise ConfigError(f"map_mode must be one of {MAP_MODES}, got {self.map_mode!r}")
        if self.eval_mode not in ("micro", "macro"):
            raise ConfigError("eval_mode must be 'micro' or 'macro'")
        if not 1 <= self.labeled_per_batch <= self.batch_size:
            raise ConfigError("labeled_per_batch must lie in 1..batch_size")
        if self.batch_size - self.labeled_per_batch < 1:
            raise ConfigError("batch needs at least one unlabeled slot")
        if self.total_iters < 1 or self.phase1_iters < 0:
            raise ConfigError("iteration counts must be positive")
        if self.height % 2 ** (self.levels - 1) or self.width % 2 ** (self.levels - 1):
            raise ConfigError(f"height/width must be divisible by {2 ** (self.levels - 1)}")
        try:
            self.seeds
        except ValueError as exc:
            raise ConfigError(f"ablation_seeds must be a comma-separated integer list: {exc}") from exc

    @property
    def unlabeled_per_batch(self) -> int:
        return self.batch_size - self.labeled_per_batch

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in str(self.ablation_seeds).split(",") if s.strip()]

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir) if self.data_dir else Path(self.out_dir) / "data"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format(v)}")
        return "\n".join(lines) + "\n"


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return repr(v)


def _parse_value(raw: str, typ, key: str, lineno: int):
    raw = raw.strip()
    if typ == "bool" or typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"line {lineno}: {key} expects true/false, got {raw!r}")
    if typ == "str" or typ is str:
        if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
            return ast.literal_eval(raw)
        return raw
    try:
        val = ast.literal_eval(raw)
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"line {lineno}: cannot parse value for {key}: {raw!r}") from exc
    if typ in ("int", int):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"line {lineno}: {key} expects an integer, got {raw!r}")
        return val
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"line {lineno}: {key} expects a number, got {raw!r}")
    return float(val)


def parse_config(text: str, **overrides) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#") or stripped.startswith("["):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        # trailing comments are only stripped outside quotes
        if "#" in raw and not raw.strip().startswith(("'", '"')):
            raw = raw.split("#", 1)[0]
        values[key] = _parse_value(raw, types[key], key, lineno)
    values.update(overrides)
    return RunConfig(**values)


def load_config(path=None, **overrides) -> RunConfig:
    if path is None:
        return RunConfig(**overrides)
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), **overrides)
