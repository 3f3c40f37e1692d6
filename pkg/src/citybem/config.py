"""Run configuration, read from a TOML key = value document."""
from __future__ import annotations

import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    footprints: Path
    weather: Path
    elevation: Path | None = None
    bbox: tuple[float, float, float, float] | None = None  # lon/lat; None: footprint extent
    zoom: int = 16
    lod: int = 1
    sky_az: int = 72
    sky_alt: int = 10
    samples: int = 64
    vf_rays: int = 100_000
    n_workers: int = 1
    partition_case: int = 0
    seed: int = 0
    out: Path = Path("out")
    archetype: str = "old"
    period: tuple[int, int] | None = None  # weather step slice [start, stop)
    aggregate_output: bool = False
    trees: Path | None = None

    def __post_init__(self):
        if self.n_workers < 1:
            raise ConfigError("n_workers must be >= 1")
        if self.lod not in (0, 1):
            raise ConfigError("lod must be 0 or 1")
        if self.partition_case not in (0, 1):
            raise ConfigError("partition_case must be 0 or 1")
        if self.samples < 1 or self.vf_rays < 1:
            raise ConfigError("samples and vf_rays must be positive")
        if not 0 <= self.zoom <= 19:
            raise ConfigError("zoom must be in [0, 19]")

    def with_(self, **kw) -> RunConfig:
        return replace(self, **kw)

    def check_paths(self) -> None:
        for name in ("footprints", "weather", "elevation", "trees"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{name} file not found: {p}")


_PATHS = {"footprints", "weather", "elevation", "out", "trees"}
_TUPLES = {"bbox", "period"}


def config_from_dict(doc: dict, base: Path | None = None) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw = {}
    for key, value in doc.items():
        if key in _PATHS:
            p = Path(value)
            kw[key] = p if p.is_absolute() or base is None else base / p
        elif key in _TUPLES:
            kw[key] = tuple(value)
        else:
            kw[key] = value
    for req in ("footprints", "weather"):
        if req not in kw:
            raise ConfigError(f"missing required key {req!r}")
    try:
        return RunConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc, base=path.parent)
