"""Parameter presets and the flat ``section.key = value`` configuration format."""

__all__ = ["ConfigError", "PresetConfig", "preset", "PRESETS"]

import dataclasses
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple, Union

from .circlefit import CircleFitParams
from .crown import CrownParams
from .stems import StemDetectionParams
from .terrain import CsfParams, DtmParams

PRESETS = ("tls", "uls")

# keys of CircleFitParams that are part of the configuration
_CIRCLE_KEYS = (
    "bandwidth",
    "min_score",
    "min_diameter",
    "max_diameter",
    "min_points",
    "min_cci",
    "ransac_iterations",
    "method",
)


class ConfigError(ValueError):
    """Invalid configuration file, key or value."""


@dataclass(frozen=True)
class PresetConfig:
    preset: str = "tls"
    seed: int = 0
    csf: CsfParams = field(default_factory=CsfParams)
    dtm: DtmParams = field(default_factory=DtmParams)
    stems: StemDetectionParams = field(default_factory=StemDetectionParams)
    crown: CrownParams = field(default_factory=CrownParams)
    ellipse_fitting: bool = False

    def __post_init__(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"Unknown preset {self.preset!r}; expected one of {PRESETS}.")
        if self.ellipse_fitting:
            raise ConfigError("Ellipse fitting is not supported; set stems.ellipse_fitting = false.")

    @property
    def circle(self) -> CircleFitParams:
        return self.stems.circle

    def stem_params(self) -> StemDetectionParams:
        """Stem parameters with the run seed applied to the circle fitting."""
        return replace(self.stems, circle=replace(self.stems.circle, rng_seed=self.seed))

    def items(self) -> Iterable[Tuple[str, Any]]:
        yield "preset", self.preset
        yield "seed", self.seed
        for section in ("csf", "dtm"):
            for f in dataclasses.fields(getattr(self, section)):
                yield f"{section}.{f.name}", getattr(getattr(self, section), f.name)
        for f in dataclasses.fields(self.stems):
            if f.name != "circle":
                yield f"stems.{f.name}", getattr(self.stems, f.name)
        yield "stems.ellipse_fitting", self.ellipse_fitting
        for name in _CIRCLE_KEYS:
            yield f"circle.{name}", getattr(self.stems.circle, name)
        for f in dataclasses.fields(self.crown):
            yield f"crown.{f.name}", getattr(self.crown, f.name)

    def to_text(self) -> str:
        return "".join(f"{key} = {_format(value)}\n" for key, value in self.items())

    @classmethod
    def from_text(cls, text: str) -> "PresetConfig":
        """Parses a configuration. Values not given are taken from the preset named by the :code:`preset` key (TLS if
        absent)."""
        values = _parse_lines(text.splitlines())
        base = preset(values.pop("preset", "tls"))
        return base.with_overrides(values)

    @classmethod
    def load(cls, path: Union[str, Path], preset_name: Optional[str] = None) -> "PresetConfig":
        values = _parse_lines(Path(path).read_text(encoding="utf-8").splitlines())
        name = preset_name or values.pop("preset", "tls")
        values.pop("preset", None)
        return preset(name).with_overrides(values)

    def with_overrides(self, overrides: Mapping[str, str]) -> "PresetConfig":
        """Returns a copy with values given as strings keyed by dotted names."""
        known = dict(self.items())
        sections: Dict[str, Dict[str, Any]] = {"csf": {}, "dtm": {}, "stems": {}, "circle": {}, "crown": {}}
        top: Dict[str, Any] = {}
        for key, raw in overrides.items():
            if key not in known:
                raise ConfigError(f"Unknown configuration key {key!r}.")
            if key == "preset":
                raise ConfigError("The preset can only be chosen in the first place, not overridden.")
            if key == "seed":
                top["seed"] = _coerce(key, raw, int)
                continue
            if key == "stems.ellipse_fitting":
                top["ellipse_fitting"] = _coerce(key, raw, bool)
                continue
            section, name = key.split(".", 1)
            owner = {
                "csf": CsfParams,
                "dtm": DtmParams,
                "stems": StemDetectionParams,
                "circle": CircleFitParams,
                "crown": CrownParams,
            }[section]
            sections[section][name] = _coerce(key, raw, typing.get_type_hints(owner)[name])
        try:
            circle = replace(self.stems.circle, **sections["circle"])
            return replace(
                self,
                csf=replace(self.csf, **sections["csf"]),
                dtm=replace(self.dtm, **sections["dtm"]),
                stems=replace(self.stems, circle=circle, **sections["stems"]),
                crown=replace(self.crown, **sections["crown"]),
                **top,
            )
        except ConfigError:
            raise
        except ValueError as error:
            raise ConfigError(str(error)) from error


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw: Any, target: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    origin = typing.get_origin(target)
    args = typing.get_args(target)
    if origin is Union and type(None) in args:
        if text.lower() in ("none", "null", ""):
            return None
        target = next(a for a in args if a is not type(None))
        origin = typing.get_origin(target)
    try:
        if target is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if target is int:
            return int(text)
        if target is float:
            return float(text)
        if origin is typing.Literal:
            if text not in typing.get_args(target):
                raise ValueError(text)
            return text
        if target is str:
            return text
    except ValueError as error:
        raise ConfigError(f"Invalid value {raw!r} for {key}.") from error
    raise ConfigError(f"Unsupported type for {key}.")


def _parse_lines(lines: Iterable[str]) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"Line {number}: expected 'key = value', got {line!r}.")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def preset(name: str) -> PresetConfig:
    """The TLS preset (dense stem layers, e.g. terrestrial or personal laser scanning) or the ULS preset (sparse stem
    layers from UAV laser scanning). Both share the terrain and crown parameters."""
    name = name.lower()
    if name == "tls":
        return PresetConfig(preset="tls")
    if name == "uls":
        circle = CircleFitParams(bandwidth=0.03, min_score=5.0, min_points=3)
        stems = StemDetectionParams(
            max_height=5.0,
            eps_2d=0.07,
            min_pts_2d=15,
            eps_3d=0.3,
            min_pts_3d=1,
            min_cluster_points=20,
            num_layers=4,
            layer_height=1.4,
            layer_overlap=0.4,
            num_sample_layers=2,
            max_diameter_std=0.1,
            circle=circle,
        )
        return PresetConfig(preset="uls", stems=stems)
    raise ConfigError(f"Unknown preset {name!r}; expected one of {PRESETS}.")
