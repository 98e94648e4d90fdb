# config.py

"""
运行配置：_conf_schema.json 默认值 < 配置文件（JSON / JSON5） < 命令行覆盖
"""

import copy
import hashlib
import json
import re
from pathlib import Path
from typing import Any, Iterable, Mapping

import json5
import pydantic

from .errors import ConfigError
from .ingest import ColumnMapping, CovariateOptions
from .model import ModelOptions
from .posterior import SummaryOptions
from .records import GridSpec, StudyWindow
from .sampler import SamplerConfig
from .sim import SimulationDesign

ROOT = Path(__file__).resolve().parent.parent
SCHEMA_PATH = ROOT / "_conf_schema.json"
METADATA_PATH = ROOT / "metadata.yaml"


class PathsConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    sightings: Path | None = None
    covariates: Path | None = None
    extra_presence: Path | None = None
    output_dir: Path = Path("runs/default")


class RunConfig(pydantic.BaseModel):
    """一次运行的全部配置"""

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    paths: PathsConfig = PathsConfig()
    columns: ColumnMapping = ColumnMapping()
    grid: GridSpec = GridSpec()
    study_window: StudyWindow = StudyWindow()
    focal_species: str = ""
    proficiency_threshold: int = pydantic.Field(default=500, ge=1)
    """整个研究窗口内目击条数达到该值的观察者视为熟练观察者"""
    list_length_cuts: tuple[int, int] = (1, 3)
    proficient_any_stage: bool = True
    """熟练观察者记录的非成虫阶段也计入确认出现"""
    anonymise: bool = True
    anonymise_salt: str = ""
    covariates: CovariateOptions = CovariateOptions()
    model: ModelOptions = ModelOptions()
    sampler: SamplerConfig = SamplerConfig()
    simulation: SimulationDesign = SimulationDesign()
    summary: SummaryOptions = SummaryOptions()
    strict: bool = True
    """R̂ 或发散超标时以退出码 1 结束"""
    log_level: str = "INFO"

    @pydantic.field_validator("list_length_cuts")
    @classmethod
    def _check_cuts(cls, value: tuple[int, int]):
        if not 1 <= value[0] < value[1]:
            raise ValueError(f"名录长度分界需满足 1 ≤ c1 < c2，收到 {value}")
        return value

    @pydantic.field_validator("log_level")
    @classmethod
    def _check_level(cls, value: str):
        value = value.upper()
        if value not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            raise ValueError(f"未知日志级别 {value}")
        return value


def _schema_section(entries: Mapping[str, Any]) -> dict[str, Any]:
    out = {}
    for key, entry in entries.items():
        if entry.get("type") == "object":
            out[key] = _schema_section(entry.get("items", {}))
        else:
            out[key] = copy.deepcopy(entry.get("default"))
    return out


def schema_defaults(path: Path = SCHEMA_PATH) -> dict[str, Any]:
    """把 _conf_schema.json 展开成默认配置字典"""
    try:
        with open(path, encoding="utf-8") as f:
            schema = json.load(f)
    except (OSError, ValueError) as e:
        raise ConfigError(f"无法读取配置模式 {path}: {e}") from e
    return _schema_section(schema)


def deep_merge(base: dict[str, Any], update: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    """'sampler.chains=4' → (['sampler', 'chains'], 4)；值按 JSON5 解析，失败则当作字符串"""
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key or any(not part for part in key.split(".")):
        raise ConfigError(f"无法解析覆盖项 {text!r}，格式应为 a.b=value")
    try:
        value = json5.loads(raw)
    except ValueError:
        value = raw
    return key.split("."), value


def apply_overrides(data: dict[str, Any], overrides: Iterable[str] | Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(data)
    items = overrides.items() if isinstance(overrides, Mapping) else (parse_override(o) for o in overrides)
    for key, value in items:
        parts = key.split(".") if isinstance(key, str) else key
        node = out
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"覆盖项 {'.'.join(parts)} 的上级 {part} 不是一个配置段")
            node = child
        node[parts[-1]] = value
    return out


def _resolve_paths(data: dict[str, Any], base: Path) -> dict[str, Any]:
    # 配置文件中的相对路径相对于配置文件所在目录
    paths = data.get("paths")
    if not isinstance(paths, dict):
        return data
    for key, value in paths.items():
        if value and not Path(value).is_absolute():
            paths[key] = str(base / value)
    return data


def read_config_file(path: Path | str) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            data = json5.load(f)
    except ValueError as e:
        raise ConfigError(f"配置文件 {path} 解析失败: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"配置文件 {path} 的顶层必须是对象")
    return _resolve_paths(data, path.resolve().parent)


def load_config(
    path: Path | str | None = None,
    overrides: Iterable[str] | Mapping[str, Any] = (),
) -> RunConfig:
    data = schema_defaults()
    if path is not None:
        data = deep_merge(data, read_config_file(path))
    data = apply_overrides(data, overrides)
    try:
        return RunConfig.model_validate(data)
    except pydantic.ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"配置无效: {problems}") from e


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def package_version(path: Path = METADATA_PATH) -> str:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError:
        return "unknown"
    match = re.search(r"^version:\s*(\S+)", text, flags=re.MULTILINE)
    return match.group(1) if match else "unknown"
