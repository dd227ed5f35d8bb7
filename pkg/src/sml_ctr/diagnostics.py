"""
Диагностика: метрики и анализ свойств сети.

- дисперсия вкладов слоёв в логит и норм активаций по слоям;
- гистограммы частоты активации выпрямителей ("мёртвые" нейроны);
- средняя попарная косинусная близость представлений;
- Монте-Карло проверки законов дисперсии (ReLU, ResNet, skip-логит, MTN);
- свип по глубине с обучением DNN и SML.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import EncodedBatch
from .errors import ContractViolation
from .metrics import auc, logloss
from .network import (
    STREAM_PROBE,
    ModelConfig,
    SkipLogitModel,
    SkipVariant,
    path_contributions,
)
from .numerics import (
    DTYPE,
    ActivationKind,
    Matrix,
    RngState,
    activation,
    he_init,
    sample_gaussian,
    scaled_init,
)
from .training import TrainConfig, fit
from .workers import run_jobs

logger = logging.getLogger(__name__)

__all__ = [
    "auc",
    "logloss",
    "DiagnosticsReport",
    "layer_variance_profile",
    "dead_neuron_histogram",
    "pairwise_cosine_similarity",
    "cosine_profile",
    "relu_variance_mc",
    "tanh_variance_check",
    "taylor_check",
    "variance_law_check",
    "depth_sweep",
    "merge_rows",
]

DEAD_LOW = 0.01
DEAD_HIGH = 0.99

Batch = Union[EncodedBatch, Matrix]


# =====================================================================
# 1. ТИПЫ ОТЧЁТА
# =====================================================================

@dataclass
class LayerVariance:
    layer: int
    source: str
    contrib_var: float
    activation_norm_var: float


@dataclass
class DeadNeuronLayer:
    layer: int
    rates: List[float]
    histogram: List[int]
    bin_edges: List[float]
    bipolarity: float


@dataclass
class CosineSimilarity:
    layer: int
    mean: Optional[float]
    samples: int
    zero_count: int
    degenerate: bool


@dataclass
class SweepRow:
    depth: int
    variant: str
    seed: int
    auc: Optional[float]
    logloss: Optional[float]
    collapsed: bool
    collapse_step: Optional[int] = None
    collapse_reason: Optional[str] = None


@dataclass
class DiagnosticsReport:
    config: Dict[str, Any] = field(default_factory=dict)
    mode: str = "init"
    variance: List[LayerVariance] = field(default_factory=list)
    dead_neurons: List[DeadNeuronLayer] = field(default_factory=list)
    cosine: List[CosineSimilarity] = field(default_factory=list)
    metrics: Dict[str, Optional[float]] = field(default_factory=dict)
    depth_table: List[SweepRow] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def csv_tables(self) -> Dict[str, Tuple[List[str], List[List[Any]]]]:
        """Плоские таблицы (одна строка на слой / глубину) для внешних графиков."""
        tables: Dict[str, Tuple[List[str], List[List[Any]]]] = {}
        if self.variance:
            tables["variance"] = (
                ["layer", "source", "contrib_var", "activation_norm_var"],
                [[r.layer, r.source, r.contrib_var, r.activation_norm_var] for r in self.variance],
            )
        if self.dead_neurons:
            tables["dead_neurons"] = (
                ["layer", "bipolarity", "histogram"],
                [[r.layer, r.bipolarity, " ".join(map(str, r.histogram))] for r in self.dead_neurons],
            )
        if self.cosine:
            tables["cosine"] = (
                ["layer", "mean", "samples", "zero_count", "degenerate"],
                [[r.layer, r.mean, r.samples, r.zero_count, r.degenerate] for r in self.cosine],
            )
        if self.depth_table:
            tables["sweep"] = (
                ["depth", "variant", "seed", "auc", "logloss", "collapsed", "collapse_step"],
                [
                    [r.depth, r.variant, r.seed, r.auc, r.logloss, r.collapsed, r.collapse_step]
                    for r in self.depth_table
                ],
            )
        return tables


# =====================================================================
# 2. ПРОФИЛИ ПО СЛОЯМ
# =====================================================================

def _x0(model: SkipLogitModel, batch: Batch) -> Matrix:
    if isinstance(batch, EncodedBatch):
        return model.embed(batch.categorical, batch.continuous)
    return np.asarray(batch, dtype=DTYPE)


def probe_vector(config: ModelConfig, layer: int) -> Matrix:
    """Замороженная случайная проекция N(0, 1/width) — "логит" слоя обычной DNN."""
    width = config.layer_width(layer)
    rng = RngState(config.seed).derive(STREAM_PROBE, layer)
    return scaled_init(width, 1, rng, gain=1.0)[:, 0]


def layer_variance_profile(model: SkipLogitModel, batch: Batch) -> List[LayerVariance]:
    """
    Для каждого слоя 0..L: межпримерная дисперсия вклада в логит
    (skip-путь, либо пробная проекция если пути нет) и дисперсия нормы активаций.
    """
    x0 = _x0(model, batch)
    if x0.shape[0] < 2:
        raise ContractViolation("variance profile needs at least 2 samples")

    _, cache = model.forward_x0(x0)
    profile: List[LayerVariance] = []
    for layer, act in enumerate(cache.acts):
        if layer in cache.paths:
            contrib = cache.paths[layer].t @ model.params[f"skip.{layer}.w"]
            source = "skip"
        else:
            contrib = act @ probe_vector(model.config, layer)
            source = "probe"
        profile.append(
            LayerVariance(
                layer=layer,
                source=source,
                contrib_var=float(np.var(contrib, ddof=1)),
                activation_norm_var=float(np.var(np.linalg.norm(act, axis=1), ddof=1)),
            )
        )
    return profile


def dead_neuron_histogram(
    model: SkipLogitModel,
    batch: Batch,
    bins: int = 10,
) -> List[DeadNeuronLayer]:
    """
    Частота активации каждого нейрона = доля примеров с пре-активацией >= 0
    (в нуле — активен, как и производная). Биполярность = доля нейронов
    с частотой < 0.01 или > 0.99.
    """
    if model.config.hidden_act not in (ActivationKind.RELU, ActivationKind.LEAKY_RELU):
        raise ContractViolation("dead-neuron analysis requires relu or leaky_relu hidden activations")

    _, cache = model.forward_x0(_x0(model, batch))
    layers: List[DeadNeuronLayer] = []
    for i, z in enumerate(cache.pre, start=1):
        rates = (z >= 0).mean(axis=0)
        counts, edges = np.histogram(rates, bins=bins, range=(0.0, 1.0))
        bipolar = float(np.mean((rates < DEAD_LOW) | (rates > DEAD_HIGH)))
        layers.append(
            DeadNeuronLayer(
                layer=i,
                rates=[float(r) for r in rates],
                histogram=[int(c) for c in counts],
                bin_edges=[float(e) for e in edges],
                bipolarity=bipolar,
            )
        )
    return layers


def _mean_pairwise_cosine(act: Matrix, layer: int) -> CosineSimilarity:
    norms = np.linalg.norm(act, axis=1)
    nonzero = norms > 0
    zero_count = int((~nonzero).sum())
    m = int(nonzero.sum())
    if m < 2:
        return CosineSimilarity(layer, None, act.shape[0], zero_count, degenerate=True)
    unit = act[nonzero] / norms[nonzero, None]
    total = unit.sum(axis=0)
    # sum_{i != j} <u_i, u_j> = |sum u|^2 - sum |u_i|^2
    pair_sum = float(total @ total) - float(np.sum(unit * unit))
    return CosineSimilarity(layer, pair_sum / (m * (m - 1)), act.shape[0], zero_count, degenerate=False)


def pairwise_cosine_similarity(model: SkipLogitModel, batch: Batch, layer: int) -> CosineSimilarity:
    """Средний косинус по всем неупорядоченным парам примеров на слое layer."""
    if not 0 <= layer <= model.config.depth:
        raise ContractViolation(f"layer {layer} out of range 0..{model.config.depth}")
    x0 = _x0(model, batch)
    if x0.shape[0] < 2:
        raise ContractViolation("cosine similarity needs at least 2 samples")
    _, cache = model.forward_x0(x0)
    return _mean_pairwise_cosine(cache.acts[layer], layer)


def cosine_profile(model: SkipLogitModel, batch: Batch, layers: Optional[Sequence[int]] = None) -> List[CosineSimilarity]:
    x0 = _x0(model, batch)
    if x0.shape[0] < 2:
        raise ContractViolation("cosine similarity needs at least 2 samples")
    _, cache = model.forward_x0(x0)
    wanted = range(model.config.depth + 1) if layers is None else layers
    out = []
    for layer in wanted:
        if not 0 <= layer <= model.config.depth:
            raise ContractViolation(f"layer {layer} out of range 0..{model.config.depth}")
        out.append(_mean_pairwise_cosine(cache.acts[layer], layer))
    return out


# =====================================================================
# 3. МОНТЕ-КАРЛО: ReLU, tanh, Тейлор
# =====================================================================

@dataclass
class ReluVarianceResult:
    delta: float
    n: int
    estimate: float
    standard_error: float
    bound: float
    exact: float
    within_bound: bool


def relu_variance_mc(delta: float, n: int, rng: RngState, chunk: int = 1_000_000) -> ReluVarianceResult:
    """
    Var(relu(X)), X ~ N(0, delta^2), против границы delta^2 (1 - 2/pi).
    Точное значение: delta^2 (1/2 - 1/(2 pi)).
    """
    if n < 10_000:
        raise ContractViolation(f"n must be >= 10^4, got {n}")
    if delta < 0:
        raise ContractViolation(f"delta must be >= 0, got {delta}")

    sums = np.zeros(5, dtype=DTYPE)
    remaining = n
    while remaining > 0:
        size = min(chunk, remaining)
        y, _ = activation(ActivationKind.RELU, sample_gaussian(rng, size, 0.0, delta)[:, 0])
        sums += [size, y.sum(), (y ** 2).sum(), (y ** 3).sum(), (y ** 4).sum()]
        remaining -= size

    mean = sums[1] / n
    m2 = max(sums[2] / n - mean ** 2, 0.0)
    m4 = sums[4] / n - 4 * mean * sums[3] / n + 6 * mean ** 2 * sums[2] / n - 3 * mean ** 4
    estimate = m2 * n / (n - 1)
    se = math.sqrt(max(m4 - m2 ** 2, 0.0) / n)
    bound = delta ** 2 * (1.0 - 2.0 / math.pi)
    exact = delta ** 2 * (0.5 - 1.0 / (2.0 * math.pi))
    return ReluVarianceResult(
        delta=delta,
        n=n,
        estimate=float(estimate),
        standard_error=se,
        bound=bound,
        exact=exact,
        within_bound=bool(estimate <= bound + 3 * se),
    )


def tanh_variance_check(rng: RngState, n: int = 100_000, scales: Sequence[float] = (0.1, 1.0, 10.0, 100.0)) -> Dict[str, Any]:
    """Var(tanh(c X)) <= 1 для любых масштабов входа."""
    variances = {}
    for i, scale in enumerate(scales):
        x = sample_gaussian(rng.derive(i), n, 0.0, scale)[:, 0]
        variances[str(scale)] = float(np.var(np.tanh(x)))
    return {"variances": variances, "passed": all(v <= 1.0 for v in variances.values())}


def taylor_check(points: int = 10_000, limit: float = 0.1) -> Dict[str, Any]:
    """|tanh(z) - z| <= |z|^3 / 3 на сетке |z| <= limit (допуск на округление)."""
    z = np.linspace(-limit, limit, points)
    gap = np.abs(np.tanh(z) - z)
    bound = np.abs(z) ** 3 / 3.0 + 4 * np.finfo(DTYPE).eps * np.abs(z)
    worst = float(np.max(gap - bound))
    return {"points": points, "limit": limit, "max_excess": worst, "passed": bool(worst <= 0.0)}


# =====================================================================
# 4. ЗАКОНЫ ДИСПЕРСИИ ПРИ ИНИЦИАЛИЗАЦИИ
# =====================================================================

@dataclass
class VarianceLawRow:
    depth: int
    measured: float
    predicted: float
    standard_error: float
    per_seed: List[float]
    passed: bool
    detail: Dict[str, Any] = field(default_factory=dict)


@dataclass
class VarianceLawReport:
    kind: str
    rows: List[VarianceLawRow]
    slope: Optional[float] = None
    reference: Optional[float] = None
    passed: bool = True

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _model_seed(rng: RngState) -> int:
    return int(rng.generator.integers(0, 2 ** 62))


def _resnet_block_ratio(depth: int, rng: RngState, width: int, samples: int, branch_scale: float) -> float:
    """x <- x + c * relu(x W1) W2, W1 по He, W2 с единичным коэффициентом."""
    x = sample_gaussian(rng.derive(0), samples, cols=width)
    v0 = float(np.var(x))
    for b in range(depth):
        w1 = he_init(width, width, rng.derive(1, b))
        w2 = scaled_init(width, width, rng.derive(2, b), gain=1.0)
        h, _ = activation(ActivationKind.RELU, x @ w1)
        x = x + branch_scale * (h @ w2)
    return (float(np.var(x)) / v0) ** (1.0 / depth)


def _skiplogit_linear(L: int, rng: RngState, width: int, samples: int) -> Tuple[float, List[float]]:
    config = ModelConfig(
        vocab_sizes=[],
        continuous_count=width,
        tower_widths=[width] * L,
        hidden_act=ActivationKind.IDENTITY,
        skip=SkipVariant.from_name("vanilla"),
        include_input_skip=False,
        tower_head=False,
        seed=_model_seed(rng.derive(0)),
    )
    model = SkipLogitModel.initialize(config)
    x0 = sample_gaussian(rng.derive(1), samples, cols=width)
    logit, contribs, _ = path_contributions(model, x0)
    return float(np.var(logit)), [float(v) for v in np.var(contribs, axis=0)]


def _mtn_bound(L: int, rng: RngState, width: int, samples: int) -> Tuple[float, float]:
    config = ModelConfig(
        vocab_sizes=[],
        continuous_count=width,
        tower_widths=[width] * (L - 1),
        hidden_act=ActivationKind.RELU,
        skip=SkipVariant.from_name("meta_tanh"),
        include_input_skip=True,
        tower_head=False,
        seed=_model_seed(rng.derive(0)),
    )
    model = SkipLogitModel.initialize(config)
    x0 = sample_gaussian(rng.derive(1), samples, cols=width)
    logit, contribs, _ = path_contributions(model, x0)
    return float(np.var(logit)), float(np.var(contribs[:, 0]))


def _mean_se(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=DTYPE)
    if arr.size < 2:
        return float(arr.mean()), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def variance_law_check(
    kind: str,
    depth_list: Sequence[int],
    rng: RngState,
    width: int = 64,
    samples: int = 100_000,
    seeds: int = 5,
    branch_scale: float = 1.0,
    tolerance: float = 0.15,
) -> VarianceLawReport:
    """
    resnet_doubling  — отношение дисперсий соседних блоков ~ 1 + c^2 (2 при c = 1);
    skiplogit_linear — Var(logit) ~ L * (дисперсия одного пути), L скрытых путей;
    mtn_bound        — Var(logit) <= Var(входного пути) + L - 1,
                       L путей = вход + (L - 1) скрытых слоёв.

    Законы — про математическое ожидание по инициализации, поэтому
    значения усредняются по нескольким независимым наборам весов.
    """
    rows: List[VarianceLawRow] = []
    all_path_vars: List[float] = []

    for depth in depth_list:
        if depth < 1 or (kind == "mtn_bound" and depth < 2):
            raise ContractViolation(f"{kind}: invalid depth {depth}")
        streams = [rng.derive(depth, s) for s in range(seeds)]

        if kind == "resnet_doubling":
            ratios = [_resnet_block_ratio(depth, r, width, samples, branch_scale) for r in streams]
            predicted = 1.0 + branch_scale ** 2
            measured, se = _mean_se(ratios)
            passed = all(abs(r - predicted) <= 0.2 * predicted for r in ratios)
            rows.append(VarianceLawRow(depth, measured, predicted, se, ratios, passed))

        elif kind == "skiplogit_linear":
            results = [_skiplogit_linear(depth, r, width, samples) for r in streams]
            logit_vars = [v for v, _ in results]
            path_vars = [p for _, paths in results for p in paths]
            all_path_vars.extend(path_vars)
            measured, se = _mean_se(logit_vars)
            predicted = depth * float(np.mean(path_vars))
            passed = abs(measured / predicted - 1.0) <= tolerance
            rows.append(
                VarianceLawRow(depth, measured, predicted, se, logit_vars, passed,
                               {"mean_path_variance": float(np.mean(path_vars))})
            )

        elif kind == "mtn_bound":
            results = [_mtn_bound(depth, r, width, samples) for r in streams]
            logit_vars = [v for v, _ in results]
            input_vars = [iv for _, iv in results]
            measured, se = _mean_se(logit_vars)
            input_mean = float(np.mean(input_vars))
            predicted = input_mean + depth - 1
            _, gap_se = _mean_se([v - iv for v, iv in results])
            passed = measured <= predicted + 3 * gap_se
            rows.append(
                VarianceLawRow(depth, measured, predicted, se, logit_vars, passed,
                               {"input_path_variance": input_mean})
            )
        else:
            raise ContractViolation(f"unknown variance law {kind!r}")

        logger.info("%s depth=%d measured=%.4f predicted=%.4f", kind, depth, rows[-1].measured, rows[-1].predicted)

    report = VarianceLawReport(kind=kind, rows=rows, passed=all(r.passed for r in rows))
    if kind == "skiplogit_linear" and len(rows) >= 2:
        depths = np.array([r.depth for r in rows], dtype=DTYPE)
        measured = np.array([r.measured for r in rows], dtype=DTYPE)
        slope = float(np.polyfit(depths, measured, 1)[0])
        reference = float(np.mean(all_path_vars))
        report.slope = slope
        report.reference = reference
        report.passed = abs(slope - reference) <= tolerance * reference
    return report


# =====================================================================
# 5. СВИП ПО ГЛУБИНЕ
# =====================================================================

def _sweep_job(
    depth: int,
    variant: str,
    seed: int,
    base: Dict[str, Any],
    width: int,
    train: EncodedBatch,
    valid: EncodedBatch,
    train_cfg: Dict[str, Any],
) -> SweepRow:
    config = ModelConfig.from_dict({**base, "tower_widths": [width] * depth, "skip": variant, "seed": seed})
    cfg = TrainConfig(**{**train_cfg, "seed": seed})
    model = SkipLogitModel.initialize(config)
    result = fit(model, train, valid, cfg)
    last = result.history[-1] if result.history else None
    return SweepRow(
        depth=depth,
        variant=variant,
        seed=seed,
        auc=None if last is None else last.val_auc,
        logloss=None if last is None else last.val_logloss,
        collapsed=result.collapsed,
        collapse_step=result.collapse_step,
        collapse_reason=result.collapse_reason,
    )


def depth_sweep(
    depths: Sequence[int],
    base_config: ModelConfig,
    train: EncodedBatch,
    valid: EncodedBatch,
    train_cfg: TrainConfig,
    variants: Sequence[str] = ("dnn", "meta_tanh"),
    seeds: Sequence[int] = (0,),
    width: int = 64,
    jobs: int = 1,
) -> List[SweepRow]:
    """
    Для каждой (глубины, варианта, seed) обучает модель одинаковой ширины
    и записывает AUC/logloss валидации и флаг коллапса. Коллапс отдельной
    глубины не прерывает свип.
    """
    base = base_config.to_dict()
    cfg = asdict(train_cfg)
    jobs_args = [
        (depth, variant, seed, base, width, train, valid, cfg)
        for depth in depths
        for variant in variants
        for seed in seeds
    ]
    rows = run_jobs(_sweep_job, jobs_args, jobs)
    for row in rows:
        logger.info(
            "sweep depth=%d variant=%s seed=%d auc=%s collapsed=%s",
            row.depth, row.variant, row.seed, row.auc, row.collapsed,
        )
    return merge_rows(rows)


def merge_rows(*tables: Sequence[SweepRow]) -> List[SweepRow]:
    """Объединение таблиц свипа по ключу (depth, variant, seed); более поздняя строка побеждает."""
    merged: Dict[Tuple[int, str, int], SweepRow] = {}
    for table in tables:
        for row in table:
            merged[(row.depth, row.variant, row.seed)] = row
    return [merged[key] for key in sorted(merged)]
