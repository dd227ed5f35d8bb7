import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from .config import settings
from .data import DatasetSchema, EncodedBatch, encode_records, read_records
from .errors import DataError

logger = logging.getLogger(__name__)

CACHE_FORMAT = "sml-encoded"
CACHE_VERSION = 1


class DatasetCache:
    """
    Управляет:
    - кэшем закодированных датасетов (колоночный .npz + JSON-заголовок)
    - ключом кэша: sha256(байты исходного файла + схема), версия в имени файла
    """

    def __init__(self, cache_dir: Optional[str] = None) -> None:
        self._dir = Path(cache_dir or settings.cache_dir)

    # =====================================================================
    # 1. КЛЮЧИ
    # =====================================================================

    def key_for(self, source: Path, schema: DatasetSchema, max_records: Optional[int]) -> str:
        h = hashlib.sha256()
        with open(source, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
        h.update(json.dumps(schema.to_dict(), sort_keys=True).encode("utf-8"))
        h.update(str(max_records).encode("utf-8"))
        return h.hexdigest()[:16]

    def path_for(self, source: Path, key: str) -> Path:
        return self._dir / f"{source.stem}.{key}.v{CACHE_VERSION}.npz"

    # =====================================================================
    # 2. ЧТЕНИЕ / ЗАПИСЬ
    # =====================================================================

    def load_or_encode(
        self,
        source: Union[str, Path],
        schema: DatasetSchema,
        max_records: Optional[int] = None,
    ) -> EncodedBatch:
        source = Path(source)
        if source.suffix == ".npz":
            batch, _ = load_encoded(source)
            return batch
        if not source.exists():
            raise DataError(f"data file not found: {source}")

        key = self.key_for(source, schema, max_records)
        cached = self.path_for(source, key)
        if cached.exists():
            logger.info("Cache hit for %s", source)
            batch, _ = load_encoded(cached)
            return batch

        logger.info("No cached encoding found for %s, encoding", source)
        records = read_records(source, schema, max_records)
        if not records:
            raise DataError(f"no valid records in {source}")
        batch = encode_records(records, schema)
        save_encoded(cached, batch, schema, {"source": source.name})
        return batch


def save_encoded(
    path: Union[str, Path],
    batch: EncodedBatch,
    schema: DatasetSchema,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": CACHE_FORMAT,
        "version": CACHE_VERSION,
        "rows": len(batch),
        "schema": schema.to_dict(),
        **(extra or {}),
    }
    with open(path, "wb") as f:
        np.savez(
            f,
            header=np.array(json.dumps(header, sort_keys=True)),
            categorical=batch.categorical,
            continuous=batch.continuous,
            labels=batch.labels,
        )
    return path


def load_encoded(path: Union[str, Path]) -> Tuple[EncodedBatch, Dict[str, Any]]:
    try:
        with np.load(path, allow_pickle=False) as archive:
            header = json.loads(str(archive["header"]))
            if header.get("format") != CACHE_FORMAT or header.get("version") != CACHE_VERSION:
                raise DataError(
                    f"{path}: unsupported encoded dataset "
                    f"(format={header.get('format')}, version={header.get('version')})"
                )
            batch = EncodedBatch(
                categorical=archive["categorical"],
                continuous=archive["continuous"],
                labels=archive["labels"],
            )
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot read encoded dataset {path}: {e}") from e
    return batch, header


dataset_cache = DatasetCache()
