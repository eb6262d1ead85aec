"""Run configuration and its flat ``section.key = value`` text format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .pipeline import EncoderConfig, TrainConfig
from .region_proposal import Stage1Config
from .stage2 import Stage2Config

OUTPUT_DIR_ENV = "NER_RPN_OUTPUT_DIR"

# stage-2 keys that change the parameter shapes or the forward computation
ARCH_KEYS = ("n_heads", "head_dim", "feat_dim", "channel_scale", "disable_boundary_heads", "disable_max_pool", "concat_probs")


class ConfigError(ValueError):
    """Collects field-level validation messages."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class PathsConfig:
    train: str = ""
    dev: str = ""
    test: str = ""
    output_dir: str = "runs/default"
    format: str = "auto"
    tag_scheme: str = "auto"


@dataclass
class RunConfig:
    seed: int | None = None
    paths: PathsConfig = field(default_factory=PathsConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    train: TrainConfig = field(default_factory=TrainConfig)

    SECTIONS = ("paths", "encoder", "stage1", "stage2", "train")

    def to_flat(self) -> dict[str, object]:
        flat: dict[str, object] = {"seed": self.seed}
        for sec in self.SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, sec)).items():
                flat[f"{sec}.{k}"] = v
        return flat

    def arch_hash(self) -> str:
        """Digest of every setting a checkpoint's parameters depend on."""
        flat = self.to_flat()
        keys = [k for k in flat if k.startswith("encoder.")] + [f"stage2.{k}" for k in ARCH_KEYS]
        blob = json.dumps({k: flat[k] for k in sorted(keys)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _parse_value(raw: str, default: object, key: str) -> object:
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int) or (default is None and key == "seed"):
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {raw!r}") from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    return raw


def parse_assignments(lines: list[str], source: str = "<overrides>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError([f"{source}:{n}: expected 'key = value', got {line!r}"])
        out[key.strip()] = value.strip()
    return out


def build_config(assignments: dict[str, str]) -> RunConfig:
    """Apply raw ``key -> value`` strings over the defaults and validate every section."""
    defaults = RunConfig().to_flat()
    errors = []
    values: dict[str, object] = {}
    for key, raw in assignments.items():
        if key not in defaults:
            errors.append(f"{key}: unknown configuration key")
            continue
        try:
            values[key] = _parse_value(raw, defaults[key], key)
        except ValueError as e:
            errors.append(str(e))
    if errors:
        raise ConfigError(errors)

    seed = values.pop("seed", None)
    sections: dict[str, dict] = {sec: {} for sec in RunConfig.SECTIONS}
    for key, v in values.items():
        sec, _, name = key.partition(".")
        sections[sec][name] = v
    built = {}
    for sec, cls in (
        ("paths", PathsConfig),
        ("encoder", EncoderConfig),
        ("stage1", Stage1Config),
        ("stage2", Stage2Config),
        ("train", TrainConfig),
    ):
        try:
            built[sec] = cls(**sections[sec])
        except (ValueError, TypeError) as e:
            errors.append(f"{sec}: {e}")
    if seed is None:
        errors.append("seed: a seed is mandatory")
    if errors:
        raise ConfigError(errors)
    return RunConfig(seed=seed, **built)


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    assignments = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError([f"config: file {str(path)!r} does not exist"])
        assignments.update(parse_assignments(Path(path).read_text(encoding="utf-8").splitlines(), str(path)))
    assignments.update(parse_assignments(list(overrides)))
    env_dir = os.environ.get(OUTPUT_DIR_ENV)
    if env_dir:
        assignments["paths.output_dir"] = env_dir
    return build_config(assignments)


def check_paths(config: RunConfig, required: list[str]) -> None:
    errors = []
    for name in required:
        value = getattr(config.paths, name)
        if not value:
            errors.append(f"paths.{name}: required for this command")
        elif not Path(value).exists():
            errors.append(f"paths.{name}: file {value!r} does not exist")
    if errors:
        raise ConfigError(errors)


def dump_config(config: RunConfig, path: str | Path) -> None:
    """Write the effective configuration in the same format it is read from."""
    lines = []
    for key, v in config.to_flat().items():
        if isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{key} = {v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
