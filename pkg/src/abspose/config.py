"""Flat ``key = value`` run configuration.

Keys are ``section.field`` (``scene.fx``, ``noise.sigma_2d_px``,
``posenet.hidden_width``, ...). Lines starting with ``#`` are comments.
Unknown keys are rejected; every key has a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields, replace

from .pipeline import ConfigConflict, PoseNetConfig
from .synthdata import ConfigError, NoiseModel, SceneConfig


class ConfigParseError(ValueError):
    pass


@dataclass(frozen=True)
class EvalSettings:
    bin_width_mm: float = 50.0
    hist_cap_mm: float = 1000.0
    tail_threshold_mm: float = 500.0


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    # seeds for median-of-seeds comparisons
    seeds: str = "0,1,2"

    @property
    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds.split(",") if s.strip()]


@dataclass(frozen=True)
class BaselineSettings:
    use_depth_features: bool = False


@dataclass(frozen=True)
class AblationSettings:
    # fraction of training targets replaced by outliers
    outlier_fraction: float = 0.0


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    posenet: PoseNetConfig = field(default_factory=PoseNetConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    run: RunSettings = field(default_factory=RunSettings)
    baseline: BaselineSettings = field(default_factory=BaselineSettings)
    ablation: AblationSettings = field(default_factory=AblationSettings)

    @property
    def scene_config(self) -> SceneConfig:
        """Scene configuration with this run's noise model attached."""
        return replace(self.scene, noise=self.noise)

    def items(self) -> list[tuple[str, object]]:
        out = []
        for section in _SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                if section == "scene" and f.name == "noise":
                    continue
                out.append((f"{section}.{f.name}", getattr(obj, f.name)))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in self.items())

    def hash(self) -> str:
        return config_hash(self.to_text())


_SECTIONS = ("scene", "noise", "posenet", "eval", "run", "baseline", "ablation")


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(raw: str, default, key: str):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines into a dict of raw strings, reporting line numbers on error."""
    known = {k for k, _ in RunConfig().items()}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigParseError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key not in known:
            raise ConfigParseError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigParseError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def build_config(overrides: dict[str, str], source: str = "<config>") -> RunConfig:
    """Apply raw string overrides on top of the defaults."""
    base = RunConfig()
    per_section: dict[str, dict] = {s: {} for s in _SECTIONS}
    defaults = dict(base.items())
    for key, raw in overrides.items():
        if key not in defaults:
            raise ConfigParseError(f"{source}: unknown key {key!r}")
        try:
            value = _coerce(raw, defaults[key], key)
        except ValueError as exc:
            raise ConfigParseError(f"{source}: {exc}") from None
        section, name = key.split(".", 1)
        per_section[section][name] = value
    try:
        kwargs = {}
        for section in _SECTIONS:
            obj = getattr(base, section)
            if per_section[section]:
                obj = dataclasses.replace(obj, **per_section[section])
            kwargs[section] = obj
        return RunConfig(**kwargs)
    except (ConfigError, ConfigConflict) as exc:
        raise ConfigParseError(f"{source}: {exc}") from None


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (highest precedence)."""
    merged = {}
    source = "<defaults>"
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            merged.update(parse_config_text(fh.read(), str(path)))
        source = str(path)
    if overrides:
        merged.update(overrides)
    return build_config(merged, source)
