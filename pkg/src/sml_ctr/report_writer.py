"""
Запись артефактов: JSON, CSV и JSON lines.

Без временных меток и с сортированными ключами, поэтому повторный запуск
с тем же конфигом даёт побайтно одинаковые файлы.
"""
import csv
import json
import math
from pathlib import Path
from typing import Any, Dict, IO, List, Optional, Sequence, Union

import numpy as np


def _plain(value: Any) -> Any:
    """numpy-скаляры/массивы -> Python; nan/inf -> None (JSON их не знает)."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return _plain(value.item())
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def dumps(payload: Any, indent: Optional[int] = 2) -> str:
    separators = (",", ": ") if indent else (",", ":")
    return json.dumps(_plain(payload), sort_keys=True, indent=indent, separators=separators)


def write_json(path: Union[str, Path], payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(payload) + "\n", encoding="utf-8")
    return path


def write_csv(
    path: Union[str, Path],
    header: Sequence[str],
    rows: Sequence[Sequence[Any]],
    config: Optional[Dict[str, Any]] = None,
) -> Path:
    """Первая строка — "# config: <компактный JSON>", затем заголовок и строки."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        if config is not None:
            f.write(f"# config: {dumps(config, indent=None)}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else _format_cell(v) for v in _plain(list(row))])
    return path


def _format_cell(value: Any) -> Any:
    if isinstance(value, float):
        return repr(value)
    return value


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))


class JsonLinesWriter:
    """Один JSON-объект на строку; каждая запись сразу сбрасывается на диск."""

    def __init__(self, path: Union[str, Path], append: bool = False) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f: IO[str] = open(self.path, "a" if append else "w", encoding="utf-8")

    def write(self, record: Dict[str, Any]) -> None:
        self._f.write(dumps(record, indent=None) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self) -> "JsonLinesWriter":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def read_json_lines(path: Union[str, Path]) -> List[Dict[str, Any]]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
