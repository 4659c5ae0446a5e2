"""Pipeline configuration: one TOML file, one table per module.

Example::

    [saliency]
    rel_thresh = 0.05

    [geomcon]
    eps_abs = 0.01
    n_frames = 12

    [bikac]
    k = 200.0
    stiffness = { p2P = 150.0 }

Unknown tables or keys and out-of-range values raise ConfigError tagged with
the module that owns them.
"""

from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .bikac import KacParams
from .errors import ConfigError
from .geomcon import ConstraintTolerances, ExtractionConfig
from .hmsr import HmsrConfig
from .pipeline import PreprocessConfig
from .saliency import GraspDetectorConfig, SaliencyConfig

ENV_VAR = "BIKVIL_CONFIG"

_TOL_KEYS = {f.name for f in fields(ConstraintTolerances)}
_EXT_KEYS = {f.name for f in fields(ExtractionConfig)} - {"tol"}
_VMP_KEYS = {"n_basis", "ridge"}
_HMSR_KEYS = {f.name for f in fields(HmsrConfig)} - _VMP_KEYS

# table name -> owning module (for diagnostics)
SECTIONS = {
    "preprocess": "trajdata",
    "saliency": "saliency",
    "grasp": "saliency",
    "geomcon": "geomcon",
    "hmsr": "hmsr",
    "vmp": "vmp",
    "bikac": "bikac",
}


@dataclass(frozen=True)
class PipelineConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)
    grasp: GraspDetectorConfig = field(default_factory=GraspDetectorConfig)
    geomcon: ExtractionConfig = field(default_factory=ExtractionConfig)
    hmsr: HmsrConfig = field(default_factory=HmsrConfig)
    bikac: KacParams = field(default_factory=KacParams)

    def validate(self) -> "PipelineConfig":
        self.preprocess.validate()
        self.saliency.validate()
        self.grasp.validate()
        self.geomcon.validate()
        self.hmsr.validate()
        self.bikac.validate()
        return self

    def to_dict(self) -> dict:
        geo = asdict(self.geomcon)
        tol = geo.pop("tol")
        hm = asdict(self.hmsr)
        return {
            "preprocess": asdict(self.preprocess),
            "saliency": asdict(self.saliency),
            "grasp": asdict(self.grasp),
            "geomcon": {**tol, **geo},
            "hmsr": {k: v for k, v in hm.items() if k not in _VMP_KEYS},
            "vmp": {k: hm[k] for k in sorted(_VMP_KEYS)},
            "bikac": asdict(self.bikac),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        for name in raw:
            if name not in SECTIONS:
                raise ConfigError(f"unknown config table [{name}]", "cli")
        tables = {name: dict(raw.get(name, {})) for name in SECTIONS}
        for name, table in tables.items():
            if not isinstance(table, dict):
                raise ConfigError(f"[{name}] must be a table", SECTIONS[name])

        def build(name, klass, allowed, base=None):
            table = tables[name]
            bad = sorted(set(table) - allowed)
            if bad:
                raise ConfigError(f"unknown key(s) {bad} in [{name}]", SECTIONS[name])
            target = base if base is not None else klass()
            try:
                return replace(target, **table)
            except TypeError as exc:
                raise ConfigError(f"[{name}]: {exc}", SECTIONS[name]) from None

        geo_table = tables["geomcon"]
        bad = sorted(set(geo_table) - _TOL_KEYS - _EXT_KEYS)
        if bad:
            raise ConfigError(f"unknown key(s) {bad} in [geomcon]", "geomcon")
        tol = replace(ConstraintTolerances(), **{k: v for k, v in geo_table.items() if k in _TOL_KEYS})
        geo = replace(ExtractionConfig(), tol=tol, **{k: v for k, v in geo_table.items() if k in _EXT_KEYS})
        hm = build("hmsr", HmsrConfig, _HMSR_KEYS)
        hm = build("vmp", HmsrConfig, _VMP_KEYS, base=hm)
        cfg = cls(
            preprocess=build("preprocess", PreprocessConfig, {f.name for f in fields(PreprocessConfig)}),
            saliency=build("saliency", SaliencyConfig, {f.name for f in fields(SaliencyConfig)}),
            grasp=build("grasp", GraspDetectorConfig, {f.name for f in fields(GraspDetectorConfig)}),
            geomcon=geo,
            hmsr=hm,
            bikac=build("bikac", KacParams, {f.name for f in fields(KacParams)}),
        )
        _check_types(cfg)
        return cfg.validate()


def _check_types(cfg: PipelineConfig) -> None:
    defaults = PipelineConfig().to_dict()
    for name, table in cfg.to_dict().items():
        for key, value in table.items():
            ref = defaults[name][key]
            if ref is None or isinstance(ref, dict):
                continue
            if isinstance(ref, bool) != isinstance(value, bool):
                raise ConfigError(f"[{name}].{key} must be {type(ref).__name__}", SECTIONS[name])
            if isinstance(ref, int) and not isinstance(ref, bool) and not isinstance(value, int):
                raise ConfigError(f"[{name}].{key} must be an integer", SECTIONS[name])
            if isinstance(ref, float) and not isinstance(value, (int, float)):
                raise ConfigError(f"[{name}].{key} must be a number", SECTIONS[name])


def parse_override(text: str) -> tuple[str, str, object]:
    """``table.key=value`` with a TOML literal value (bare words are strings)."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override '{text}' must look like table.key=value", "cli")
    lhs, rhs = text.split("=", 1)
    table, key = lhs.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {rhs.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = rhs.strip()
    return table, key, value


def load_config(path: str | os.PathLike | None = None, overrides=()) -> PipelineConfig:
    """Load from ``path``, else from ``$BIKVIL_CONFIG``, else defaults; then apply overrides."""
    raw: dict = {}
    src = path if path is not None else os.environ.get(ENV_VAR)
    if src:
        try:
            raw = tomllib.loads(Path(src).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {src}: {exc}", "cli") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {src}: {exc}", "cli") from None
    for text in overrides:
        table, key, value = parse_override(text)
        raw.setdefault(table, {})
        if not isinstance(raw[table], dict):
            raise ConfigError(f"[{table}] must be a table", "cli")
        raw[table][key] = value
    return PipelineConfig.from_dict(raw)


def dump_toml(cfg: PipelineConfig) -> str:
    """Render the effective configuration as TOML (reloadable by :func:`load_config`)."""
    lines = []
    for name, table in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for key, value in table.items():
            if value is None:
                continue
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, dict):
        return "{ " + ", ".join(f"{k} = {_toml_value(v)}" for k, v in value.items()) + " }"
    return '"' + str(value).replace("\\", "\\\\").replace('"', '\\"') + '"'
