"""
Данные: разбор логов в формате Criteo, хеширование категорий,
преобразование непрерывных признаков, детерминированный сплит 8:1:1
и синтетический генератор CTR с известной истиной.
"""
import functools
import hashlib
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ContractViolation, RecordParseError
from .numerics import DTYPE, Matrix, RngState, sigmoid

logger = logging.getLogger(__name__)

MISSING_TOKEN = "__missing__"


@dataclass
class DatasetSchema:
    """Criteo: метка + 13 целых + 26 категориальных (hex), разделитель TAB."""

    continuous_count: int = 13
    categorical_count: int = 26
    hash_buckets: Union[int, List[int]] = 65536
    missing_token: str = MISSING_TOKEN
    skip_bad_records: bool = True

    def __post_init__(self) -> None:
        if self.continuous_count < 0 or self.categorical_count < 0:
            raise ContractViolation("feature counts must be >= 0")
        if any(b < 1 for b in self.buckets):
            raise ContractViolation("hash bucket counts must be >= 1")

    @property
    def buckets(self) -> List[int]:
        if isinstance(self.hash_buckets, int):
            return [self.hash_buckets] * self.categorical_count
        if len(self.hash_buckets) != self.categorical_count:
            raise ContractViolation(
                f"expected {self.categorical_count} bucket counts, got {len(self.hash_buckets)}"
            )
        return list(self.hash_buckets)

    @property
    def column_count(self) -> int:
        return 1 + self.continuous_count + self.categorical_count

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RawRecord:
    label: int
    continuous: List[Optional[int]]
    categorical: List[Optional[str]]
    line_no: Optional[int] = None


@dataclass
class EncodedBatch:
    categorical: np.ndarray
    continuous: Matrix
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, index: Union[np.ndarray, slice]) -> "EncodedBatch":
        return EncodedBatch(
            categorical=self.categorical[index],
            continuous=self.continuous[index],
            labels=self.labels[index],
        )

    @classmethod
    def concat(cls, batches: Sequence["EncodedBatch"]) -> "EncodedBatch":
        return cls(
            categorical=np.concatenate([b.categorical for b in batches], axis=0),
            continuous=np.concatenate([b.continuous for b in batches], axis=0),
            labels=np.concatenate([b.labels for b in batches], axis=0),
        )


# =====================================================================
# 1. РАЗБОР CRITEO TSV
# =====================================================================

def parse_criteo_tsv(
    line: str,
    schema: DatasetSchema,
    line_no: Optional[int] = None,
) -> RawRecord:
    """
    label \\t I1..I13 \\t C1..C26; пустые поля -> None (пропуск, не 0).
    """
    columns = line.rstrip("\r\n").split("\t")
    if len(columns) != schema.column_count:
        raise RecordParseError(
            f"expected {schema.column_count} fields, got {len(columns)}", line_no
        )

    label_text = columns[0].strip()
    if label_text not in ("0", "1"):
        raise RecordParseError(f"unparsable label {label_text!r}", line_no)

    continuous: List[Optional[int]] = []
    for text in columns[1:1 + schema.continuous_count]:
        if text == "":
            continuous.append(None)
            continue
        try:
            continuous.append(int(text))
        except ValueError:
            raise RecordParseError(f"unparsable integer feature {text!r}", line_no) from None

    categorical = [
        token if token != "" else None
        for token in columns[1 + schema.continuous_count:]
    ]
    return RawRecord(int(label_text), continuous, categorical, line_no)


def format_criteo_tsv(record: RawRecord) -> str:
    cont = ["" if v is None else str(v) for v in record.continuous]
    cat = ["" if t is None else t for t in record.categorical]
    return "\t".join([str(record.label), *cont, *cat])


def read_records(path: Union[str, Path], schema: DatasetSchema,
                 max_records: Optional[int] = None) -> List[RawRecord]:
    records: List[RawRecord] = []
    skipped = 0
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(parse_criteo_tsv(line, schema, line_no))
            except RecordParseError as e:
                if not schema.skip_bad_records:
                    raise
                skipped += 1
                logger.warning("Skipping bad record: %s", e)
            if max_records is not None and len(records) >= max_records:
                break
    if skipped:
        logger.info("Skipped %d bad records in %s", skipped, path)
    return records


# =====================================================================
# 2. ПРЕОБРАЗОВАНИЯ ПРИЗНАКОВ
# =====================================================================

def transform_continuous(x: Optional[float]) -> float:
    """None -> 0; x <= 2 -> x; x > 2 -> (ln x)^2."""
    if x is None:
        return 0.0
    x = float(x)
    if x <= 2:
        return x
    return math.log(x) ** 2


@functools.lru_cache(maxsize=1 << 20)
def hash_feature(field_id: int, token: str, buckets: int) -> int:
    """
    BLAKE2b с digest_size=8 от байтов
        struct.pack("<I", field_id) + token.encode("utf-8"),
    дайджест читается как little-endian uint64 и берётся по модулю buckets.
    """
    if buckets < 1:
        raise ContractViolation(f"buckets must be >= 1, got {buckets}")
    payload = struct.pack("<I", field_id) + token.encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little") % buckets


def encode_records(records: Sequence[RawRecord], schema: DatasetSchema) -> EncodedBatch:
    buckets = schema.buckets
    n = len(records)
    categorical = np.zeros((n, schema.categorical_count), dtype=np.int64)
    continuous = np.zeros((n, schema.continuous_count), dtype=DTYPE)
    labels = np.zeros(n, dtype=DTYPE)

    for row, record in enumerate(records):
        labels[row] = record.label
        for j, value in enumerate(record.continuous):
            continuous[row, j] = transform_continuous(value)
        for f, token in enumerate(record.categorical):
            # пропуск хешируется как обычный токен
            categorical[row, f] = hash_feature(
                f, schema.missing_token if token is None else token, buckets[f]
            )
    return EncodedBatch(categorical, continuous, labels)


# =====================================================================
# 3. СПЛИТ 8:1:1
# =====================================================================

def split_indices_811(n: int, seed: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n < 10:
        raise ContractViolation(f"need at least 10 records to split 8:1:1, got {n}")
    perm = RngState(seed).generator.permutation(n)
    n_train = int(n * 0.8)
    n_valid = int(n * 0.1)
    train = np.sort(perm[:n_train])
    valid = np.sort(perm[n_train:n_train + n_valid])
    test = np.sort(perm[n_train + n_valid:])
    return train, valid, test


def split_811(records: Sequence[Any], seed: int) -> Tuple[Any, Any, Any]:
    """
    Перестановка по seed, затем срез 80/10/10; внутри каждой части
    сохраняется исходный порядок.
    """
    train, valid, test = split_indices_811(len(records), seed)
    if isinstance(records, EncodedBatch):
        return records.take(train), records.take(valid), records.take(test)
    return (
        [records[i] for i in train],
        [records[i] for i in valid],
        [records[i] for i in test],
    )


# =====================================================================
# 4. СИНТЕТИЧЕСКИЙ CTR
# =====================================================================

@dataclass
class SyntheticSpec:
    field_count: int = 20
    vocab_size: int = 1000
    continuous_count: int = 0
    truth_dim: int = 4
    interaction_order: int = 2
    interaction_count: int = 30
    linear_scale: float = 0.5
    interaction_scale: float = 0.5
    bias: float = -1.0
    noise: float = 0.1
    sample_count: int = 100000
    seed: int = 0
    deterministic_labels: bool = False

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        checks = [
            ("field_count", self.field_count >= 1, "must be >= 1"),
            ("vocab_size", self.vocab_size >= 1, "must be >= 1"),
            ("continuous_count", self.continuous_count >= 0, "must be >= 0"),
            ("truth_dim", self.truth_dim >= 1, "must be >= 1"),
            ("interaction_order", self.interaction_order in (1, 2), "must be 1 or 2"),
            ("interaction_count", self.interaction_count >= 0, "must be >= 0"),
            ("noise", self.noise >= 0, "must be >= 0"),
            ("sample_count", self.sample_count >= 1, "must be >= 1"),
            ("seed", self.seed >= 0, "must be >= 0"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ConfigError(f"{name}: {message}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "SyntheticSpec":
        if not isinstance(payload, dict):
            raise ConfigError("synthetic spec must be a JSON object")
        known = set(cls.__dataclass_fields__)
        for key, value in payload.items():
            if key not in known:
                raise ConfigError(f"{key}: unknown field")
            default = cls.__dataclass_fields__[key].default
            if isinstance(default, bool):
                ok = isinstance(value, bool)
            elif isinstance(default, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            else:
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            if not ok:
                raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
        if "seed" not in payload:
            raise ConfigError("seed: required field is missing")
        return cls(**payload)

    def schema(self, hash_buckets: Optional[int] = None) -> DatasetSchema:
        return DatasetSchema(
            continuous_count=self.continuous_count,
            categorical_count=self.field_count,
            hash_buckets=hash_buckets or 4 * self.vocab_size,
        )


@dataclass
class SyntheticDataset:
    records: List[RawRecord]
    truth_scores: Matrix
    bayes_scores: Matrix
    labels: np.ndarray
    pairs: List[Tuple[int, int]] = field(default_factory=list)


def synthesize(spec: SyntheticSpec) -> SyntheticDataset:
    """
    score = bias + sum_f lin_f[c_f] + scale * sum_{(f,g)} <e_f[c_f], e_g[c_g]>
            + сумма по непрерывным + noise * N(0,1)
    label ~ Bernoulli(sigmoid(score)).

    Байесовский скор — та же сумма без шума: P(y=1|x) монотонна по нему,
    поэтому его AUC и есть потолок для любой модели.
    """
    root = RngState(spec.seed)
    truth_rng = root.derive(0)
    sample_rng = root.derive(1)
    noise_rng = root.derive(2)
    label_rng = root.derive(3)

    n, F = spec.sample_count, spec.field_count
    g = truth_rng.generator
    linear = g.normal(0.0, spec.linear_scale / math.sqrt(F), size=(F, spec.vocab_size))
    embeddings = g.normal(0.0, 1.0 / math.sqrt(spec.truth_dim), size=(F, spec.vocab_size, spec.truth_dim))
    cont_weights = g.normal(0.0, 0.3, size=spec.continuous_count)

    pairs: List[Tuple[int, int]] = []
    if spec.interaction_order >= 2 and F >= 2 and spec.interaction_count > 0:
        all_pairs = [(a, b) for a in range(F) for b in range(a + 1, F)]
        chosen = g.choice(len(all_pairs), size=min(spec.interaction_count, len(all_pairs)), replace=False)
        pairs = [all_pairs[i] for i in sorted(chosen)]

    cats = sample_rng.generator.integers(0, spec.vocab_size, size=(n, F))
    raw_cont = sample_rng.generator.poisson(3.0, size=(n, spec.continuous_count))

    score = np.full(n, spec.bias, dtype=DTYPE)
    for f in range(F):
        score += linear[f, cats[:, f]]
    if pairs:
        scale = spec.interaction_scale / math.sqrt(len(pairs))
        for a, b in pairs:
            score += scale * np.einsum("nd,nd->n", embeddings[a, cats[:, a]], embeddings[b, cats[:, b]])
    if spec.continuous_count:
        transformed = np.vectorize(transform_continuous, otypes=[DTYPE])(raw_cont)
        score += transformed @ cont_weights

    bayes = score.copy()
    truth = score + spec.noise * noise_rng.generator.standard_normal(n)
    if spec.deterministic_labels:
        labels = (truth > 0).astype(np.int64)
    else:
        labels = (label_rng.generator.random(n) < sigmoid(truth)).astype(np.int64)

    records = [
        RawRecord(
            label=int(labels[i]),
            continuous=[int(v) for v in raw_cont[i]],
            categorical=[f"{int(c):08x}" for c in cats[i]],
            line_no=i + 1,
        )
        for i in range(n)
    ]
    logger.info("Synthesized %d records, CTR=%.4f", n, float(labels.mean()))
    return SyntheticDataset(records, truth, bayes, labels, pairs)


def write_records(path: Union[str, Path], records: Iterable[RawRecord]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(format_criteo_tsv(record) + "\n")
            count += 1
    return count
