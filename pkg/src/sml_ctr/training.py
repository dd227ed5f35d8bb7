"""
Обучение: мини-батчи, логистическая потеря, Adam с поправкой смещения,
детекция коллапса и точное возобновление с чекпоинта.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from .data import EncodedBatch
from .errors import ContractViolation, DataError, TrainingCollapse, UndefinedMetricError
from .metrics import auc, logloss
from .network import ModelConfig, Params, SkipLogitModel, predict_logits
from .numerics import DTYPE, RngState, sigmoid

logger = logging.getLogger(__name__)

STREAM_SHUFFLE = 10

CHECKPOINT_FORMAT = "sml-checkpoint"
CHECKPOINT_VERSION = 1


# =====================================================================
# 1. ADAM
# =====================================================================

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.t, dict(self.m), dict(self.v))


def adam_step(state: AdamState, params: Params, grads: Params) -> Tuple[Params, AdamState]:
    """
    Один шаг Adam. Массивы не меняются на месте: параметры и моменты
    заменяются новыми, поэтому ранее снятые снимки остаются валидными.
    """
    for name in sorted(grads):
        if name not in params:
            raise ContractViolation(f"gradient for unknown parameter {name!r}")
        if grads[name].shape != params[name].shape:
            raise ContractViolation(
                f"gradient shape {grads[name].shape} != parameter shape {params[name].shape} for {name}"
            )
        if not np.isfinite(grads[name]).all():
            raise TrainingCollapse(f"non-finite gradient for {name}", step=state.t)

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    step_size = state.lr / bc1

    for name in sorted(grads):
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(params[name])
            v = np.zeros_like(params[name])
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        params[name] = params[name] - step_size * m / (np.sqrt(v / bc2) + state.eps)
    return params, state


# =====================================================================
# 2. КОНФИГУРАЦИЯ И СОСТОЯНИЕ
# =====================================================================

@dataclass
class CollapsePolicy:
    check_non_finite: bool = True
    auc_floor: float = 0.502
    min_epochs: int = 2


@dataclass
class TrainConfig:
    batch_size: int = 1024
    epochs: int = 3
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_batch_size: int = 8192
    collapse: CollapsePolicy = field(default_factory=CollapsePolicy)

    def __post_init__(self) -> None:
        if isinstance(self.collapse, dict):
            self.collapse = CollapsePolicy(**self.collapse)
        if self.batch_size < 1:
            raise ContractViolation(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ContractViolation(f"epochs must be >= 0, got {self.epochs}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainState:
    model: SkipLogitModel
    adam: AdamState
    rng: RngState
    epoch: int = 0
    batch_index: int = 0
    step: int = 0
    epoch_loss_sum: float = 0.0
    epoch_loss_count: int = 0

    @classmethod
    def fresh(cls, model: SkipLogitModel, cfg: TrainConfig) -> "TrainState":
        adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        return cls(model=model, adam=adam, rng=RngState(cfg.seed))

    def snapshot(self) -> "TrainState":
        model = SkipLogitModel(self.model.config, dict(self.model.params), self.model.version)
        return TrainState(
            model=model,
            adam=self.adam.copy(),
            rng=RngState.from_dict(self.rng.to_dict()),
            epoch=self.epoch,
            batch_index=self.batch_index,
            step=self.step,
            epoch_loss_sum=self.epoch_loss_sum,
            epoch_loss_count=self.epoch_loss_count,
        )


@dataclass
class EpochMetrics:
    epoch: int
    step: int
    train_logloss: float
    val_auc: Optional[float]
    val_logloss: Optional[float]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class FitResult:
    state: TrainState
    history: List[EpochMetrics]
    collapsed: bool = False
    collapse_step: Optional[int] = None
    collapse_reason: Optional[str] = None
    paused: bool = False
    last_good: Optional[TrainState] = None

    @property
    def best_epoch(self) -> Optional[EpochMetrics]:
        scored = [h for h in self.history if h.val_auc is not None]
        if not scored:
            return None
        return max(scored, key=lambda h: h.val_auc)


# =====================================================================
# 3. ЦИКЛ ОБУЧЕНИЯ
# =====================================================================

def epoch_order(rng: RngState, epoch: int, n: int) -> np.ndarray:
    # перестановка зависит только от (seed, epoch), не от состояния модели
    return rng.derive(STREAM_SHUFFLE, epoch).generator.permutation(n)


def train_step(state: TrainState, batch: EncodedBatch) -> float:
    model = state.model
    logit, cache = model.forward(batch.categorical, batch.continuous)
    if not np.isfinite(logit).all():
        raise TrainingCollapse("non-finite logit", step=state.step)

    p = sigmoid(logit)
    loss = logloss(p, batch.labels)
    if not math.isfinite(loss):
        raise TrainingCollapse("non-finite loss", step=state.step)

    d_logit = (p - batch.labels) / len(batch)
    grads = model.backward(cache, d_logit)
    # adam.t совпадает с state.step: оба считают применённые шаги
    adam_step(state.adam, model.params, grads)
    model.apply_update()

    state.step += 1
    state.epoch_loss_sum += loss * len(batch)
    state.epoch_loss_count += len(batch)
    return loss


def evaluate(model: SkipLogitModel, batch: EncodedBatch, chunk: int = 8192) -> Dict[str, Any]:
    if len(batch) == 0:
        return {"auc": None, "logloss": None, "finite": True}
    logits = predict_logits(model, batch.categorical, batch.continuous, chunk)
    if not np.isfinite(logits).all():
        return {"auc": None, "logloss": None, "finite": False}
    p = sigmoid(logits)
    try:
        auc_value: Optional[float] = auc(logits, batch.labels)
    except UndefinedMetricError:
        logger.warning("AUC undefined: single-class labels")
        auc_value = None
    return {"auc": auc_value, "logloss": logloss(p, batch.labels), "finite": True}


def fit(
    model: SkipLogitModel,
    train: EncodedBatch,
    valid: EncodedBatch,
    cfg: TrainConfig,
    state: Optional[TrainState] = None,
    max_steps: Optional[int] = None,
    on_epoch: Optional[Callable[[EpochMetrics, TrainState], None]] = None,
) -> FitResult:
    """
    Перемешанные мини-батчи по эпохам; после эпохи — метрики на валидации
    и проверка политики коллапса. max_steps останавливает обучение
    посреди эпохи (для чекпоинтов), state — продолжает с сохранённого места.
    """
    if len(train) == 0:
        raise ContractViolation("training set is empty")
    state = state or TrainState.fresh(model, cfg)
    history: List[EpochMetrics] = []
    last_good = state.snapshot()
    n = len(train)
    n_batches = math.ceil(n / cfg.batch_size)

    while state.epoch < cfg.epochs:
        order = epoch_order(state.rng, state.epoch, n)
        while state.batch_index < n_batches:
            if max_steps is not None and state.step >= max_steps:
                return FitResult(state, history, paused=True, last_good=last_good)
            start = state.batch_index * cfg.batch_size
            batch = train.take(order[start:start + cfg.batch_size])
            try:
                loss = train_step(state, batch)
            except TrainingCollapse as e:
                logger.warning("Training collapsed: %s", e)
                return FitResult(state, history, collapsed=True, collapse_step=e.step,
                                 collapse_reason="non_finite", last_good=last_good)
            logger.debug("step=%d loss=%.6f", state.step, loss)
            state.batch_index += 1

        train_loss = state.epoch_loss_sum / max(state.epoch_loss_count, 1)
        state.epoch += 1
        state.batch_index = 0
        state.epoch_loss_sum = 0.0
        state.epoch_loss_count = 0

        val = evaluate(state.model, valid, cfg.eval_batch_size)
        metrics = EpochMetrics(
            epoch=state.epoch,
            step=state.step,
            train_logloss=train_loss,
            val_auc=val["auc"],
            val_logloss=val["logloss"],
        )
        history.append(metrics)
        logger.info(
            "epoch=%d step=%d train_logloss=%.6f val_auc=%s val_logloss=%s",
            metrics.epoch, metrics.step, train_loss, metrics.val_auc, metrics.val_logloss,
        )

        reason = _collapse_reason(state, metrics, val["finite"], cfg.collapse)
        if reason is not None:
            logger.warning("Collapse detected after epoch %d: %s", state.epoch, reason)
            return FitResult(state, history, collapsed=True, collapse_step=state.step,
                             collapse_reason=reason, last_good=last_good)

        last_good = state.snapshot()
        if on_epoch is not None:
            on_epoch(metrics, state)

    return FitResult(state, history, last_good=last_good)


def _collapse_reason(
    state: TrainState,
    metrics: EpochMetrics,
    val_finite: bool,
    policy: CollapsePolicy,
) -> Optional[str]:
    if policy.check_non_finite:
        if not all(np.isfinite(p).all() for p in state.model.params.values()):
            return "non_finite"
        if not val_finite or not math.isfinite(metrics.train_logloss):
            return "non_finite"
    if (
        metrics.val_auc is not None
        and state.epoch >= policy.min_epochs
        and metrics.val_auc < policy.auc_floor
    ):
        return "auc_floor"
    return None


# =====================================================================
# 4. ЧЕКПОИНТЫ
# =====================================================================

def save_checkpoint(
    path: Union[str, Path],
    state: TrainState,
    cfg: TrainConfig,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    .npz: param:<имя>, adam_m:<имя>, adam_v:<имя> + JSON "meta"
    (формат, версия, конфиги, скаляры Adam, состояние ГСЧ, счётчики).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    adam = state.adam
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": state.model.config.to_dict(),
        "train_config": cfg.to_dict(),
        "model_version": state.model.version,
        "adam": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t},
        "rng": state.rng.to_dict(),
        "epoch": state.epoch,
        "batch_index": state.batch_index,
        "step": state.step,
        "epoch_loss_sum": state.epoch_loss_sum,
        "epoch_loss_count": state.epoch_loss_count,
        **(extra or {}),
    }
    arrays: Dict[str, np.ndarray] = {"meta": np.array(json.dumps(meta, sort_keys=True))}
    for name, value in state.model.params.items():
        arrays[f"param:{name}"] = value
    for name, value in adam.m.items():
        arrays[f"adam_m:{name}"] = value
    for name, value in adam.v.items():
        arrays[f"adam_v:{name}"] = value

    tmp = path.with_suffix(".tmp.npz")
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[TrainState, TrainConfig, Dict[str, Any]]:
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive["meta"]))
            arrays = {key: np.array(archive[key], dtype=DTYPE) for key in archive.files if key != "meta"}
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e

    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(
            f"{path}: unsupported checkpoint (format={meta.get('format')}, version={meta.get('version')})"
        )

    params = {k.split(":", 1)[1]: v for k, v in arrays.items() if k.startswith("param:")}
    m = {k.split(":", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_m:")}
    v = {k.split(":", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_v:")}

    model = SkipLogitModel(
        config=ModelConfig.from_dict(meta["model_config"]),
        params=params,
        version=int(meta["model_version"]),
    )
    a = meta["adam"]
    adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"], m=m, v=v)
    state = TrainState(
        model=model,
        adam=adam,
        rng=RngState.from_dict(meta["rng"]),
        epoch=int(meta["epoch"]),
        batch_index=int(meta["batch_index"]),
        step=int(meta["step"]),
        epoch_loss_sum=float(meta["epoch_loss_sum"]),
        epoch_loss_count=int(meta["epoch_loss_count"]),
    )
    return state, TrainConfig(**meta["train_config"]), meta
