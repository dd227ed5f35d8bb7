import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .errors import ConfigError

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    # dotenv is optional; ignore if not installed
    pass


@dataclass
class Settings:
    log_level: str = os.getenv("SML_LOG_LEVEL", "INFO")
    jobs: int = int(os.getenv("SML_JOBS", 1))
    cache_dir: str = os.getenv("SML_CACHE_DIR", ".sml_cache")


settings = Settings()


# =====================================================================
# Конфигурация запуска: секции model / train / data / diagnostics
# =====================================================================

@dataclass
class ModelSection:
    embedding_dim: int = 8
    tower_widths: List[int] = field(default_factory=lambda: [256, 128, 64])
    hidden_act: str = "relu"
    skip: str = "meta_tanh"
    include_input_skip: bool = True
    tower_head: bool = True
    alpha: float = 0.01
    meta_per_element: bool = False


@dataclass
class TrainSection:
    batch_size: int = 1024
    epochs: int = 3
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    auc_floor: float = 0.502
    collapse_min_epochs: int = 2
    eval_batch_size: int = 8192


@dataclass
class DataSection:
    continuous_count: int = 13
    categorical_count: int = 26
    hash_buckets: int = 65536
    missing_token: str = "__missing__"
    skip_bad_records: bool = True
    max_records: Optional[int] = None


@dataclass
class DiagnosticsSection:
    width: int = 64
    samples: int = 10000
    mode: str = "init"
    bins: int = 10
    layers: Optional[List[int]] = None
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    depths: List[int] = field(default_factory=lambda: [4, 8, 16, 32])
    variants: List[str] = field(default_factory=lambda: ["dnn", "meta_tanh"])


_SECTIONS = {
    "model": ModelSection,
    "train": TrainSection,
    "data": DataSection,
    "diagnostics": DiagnosticsSection,
}


@dataclass
class RunConfig:
    """
    Полностью разрешённая конфигурация запуска.

    Источник: JSON-файл (необязательный) + переопределения вида
    --section.key=value. Результат to_dict() дословно кладётся в каждый
    артефакт, чтобы запуск можно было повторить по заголовку.
    """

    seed: Optional[int] = None
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(raw) - set(_SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown section")

        seed = raw.get("seed")
        if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
            raise ConfigError("seed: expected integer")

        sections = {
            name: _build_section(section_cls, raw.get(name) or {}, name)
            for name, section_cls in _SECTIONS.items()
        }
        return cls(seed=seed, **sections)

    @classmethod
    def load(cls, path: Optional[str], overrides: Sequence[str] = ()) -> "RunConfig":
        raw: Dict[str, Any] = {}
        if path:
            try:
                raw = json.loads(Path(path).read_text(encoding="utf-8"))
            except FileNotFoundError as e:
                raise ConfigError(f"config file not found: {path}") from e
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file is not valid JSON: {e}") from e
        return cls.from_dict(apply_overrides(raw, overrides))


def _build_section(section_cls: type, raw: Dict[str, Any], path: str) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected object")

    defaults = section_cls()
    known = {f.name for f in fields(section_cls)}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key")
        _check_type(getattr(defaults, key), value, f"{path}.{key}")
    return section_cls(**{**asdict(defaults), **raw})


def _check_type(default: Any, value: Any, path: str) -> None:
    if value is None or default is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Применяет переопределения "--model.tower_widths=[64,64]".

    Значение разбирается как JSON-литерал; если не получилось — берётся строкой.
    """
    merged = json.loads(json.dumps(raw))
    for item in overrides:
        text = item[2:] if item.startswith("--") else item
        if "=" not in text:
            raise ConfigError(f"override {item!r}: expected --section.key=value")
        dotted, value_text = text.split("=", 1)
        parts = dotted.split(".")
        if len(parts) == 1 and parts[0] == "seed":
            merged["seed"] = _parse_literal(value_text)
            continue
        if len(parts) != 2:
            raise ConfigError(f"override {item!r}: expected --section.key=value")
        section, key = parts
        merged.setdefault(section, {})
        if not isinstance(merged[section], dict):
            raise ConfigError(f"{section}: expected object")
        merged[section][key] = _parse_literal(value_text)
    return merged


def _parse_literal(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text
