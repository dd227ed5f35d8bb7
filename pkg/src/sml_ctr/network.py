"""
Сеть Skip Meta Logit: эмбеддинги -> башня MLP -> логит.

Каждый скрытый слой (и, опционально, вход x0) добавляет в итоговый логит
скалярный вклад своего skip-пути:

    contrib_i = sum_k W_i[k] * act(scale_i(x_i)[k] * x_i[k])

где scale = 1 (none), обучаемый вектор v (learned) или
s(x) = leaky_relu(w_scale . x) (meta). Мета-ветка читает x как значение:
градиент в x через s не течёт (stop gradient), в w_scale — течёт.

Обратный проход написан вручную и проверяется конечными разностями.
"""
import enum
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractViolation
from .numerics import (
    DTYPE,
    ActivationKind,
    Matrix,
    RngState,
    activation,
    init_gain,
    scaled_init,
)

Params = Dict[str, Matrix]

# подпотоки ГСЧ для групп параметров
STREAM_EMBEDDING = 0
STREAM_TOWER = 1
STREAM_HEAD = 2
STREAM_SKIP = 3
STREAM_PROBE = 4


class ScaleMode(str, enum.Enum):
    NONE = "none"
    LEARNED = "learned"
    META = "meta"


_SKIP_ACTS = (
    ActivationKind.IDENTITY,
    ActivationKind.RELU,
    ActivationKind.SIGMOID,
    ActivationKind.TANH,
)


@dataclass(frozen=True)
class SkipVariant:
    scale_mode: ScaleMode = ScaleMode.META
    act: ActivationKind = ActivationKind.TANH
    enabled: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "scale_mode", ScaleMode(self.scale_mode))
        object.__setattr__(self, "act", ActivationKind(self.act))
        if self.act not in _SKIP_ACTS:
            raise ContractViolation(f"skip activation {self.act.value!r} is not supported")

    @property
    def name(self) -> str:
        if not self.enabled:
            return "dnn"
        for name, variant in SKIP_VARIANTS.items():
            if variant == self:
                return name
        return f"{self.scale_mode.value}_{self.act.value}"

    @classmethod
    def from_name(cls, name: str) -> "SkipVariant":
        try:
            return SKIP_VARIANTS[name]
        except KeyError:
            known = ", ".join(SKIP_VARIANTS)
            raise ContractViolation(f"unknown skip variant {name!r}; known: {known}") from None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scale_mode": self.scale_mode.value,
            "act": self.act.value,
            "enabled": self.enabled,
        }


# Сетка абляции: DNN, Vanilla, активации, Weight(tanh), Meta X
SKIP_VARIANTS: Dict[str, SkipVariant] = {
    "dnn": SkipVariant(ScaleMode.NONE, ActivationKind.IDENTITY, enabled=False),
    "vanilla": SkipVariant(ScaleMode.NONE, ActivationKind.IDENTITY),
    "relu": SkipVariant(ScaleMode.NONE, ActivationKind.RELU),
    "sigmoid": SkipVariant(ScaleMode.NONE, ActivationKind.SIGMOID),
    "tanh": SkipVariant(ScaleMode.NONE, ActivationKind.TANH),
    "weight_tanh": SkipVariant(ScaleMode.LEARNED, ActivationKind.TANH),
    "meta_vanilla": SkipVariant(ScaleMode.META, ActivationKind.IDENTITY),
    "meta_relu": SkipVariant(ScaleMode.META, ActivationKind.RELU),
    "meta_sigmoid": SkipVariant(ScaleMode.META, ActivationKind.SIGMOID),
    "meta_tanh": SkipVariant(ScaleMode.META, ActivationKind.TANH),
}


def _coerce_variant(value: Any) -> SkipVariant:
    if isinstance(value, SkipVariant):
        return value
    if isinstance(value, str):
        return SkipVariant.from_name(value)
    if isinstance(value, dict):
        return SkipVariant(**value)
    raise ContractViolation(f"cannot interpret skip variant {value!r}")


@dataclass
class ModelConfig:
    embedding_dim: int = 8
    vocab_sizes: List[int] = field(default_factory=list)
    continuous_count: int = 0
    tower_widths: List[int] = field(default_factory=lambda: [256, 128, 64])
    hidden_act: ActivationKind = ActivationKind.RELU
    skip: SkipVariant = field(default_factory=lambda: SKIP_VARIANTS["meta_tanh"])
    include_input_skip: bool = True
    tower_head: bool = True
    alpha: float = 0.01
    meta_per_element: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        self.hidden_act = ActivationKind(self.hidden_act)
        self.skip = _coerce_variant(self.skip)
        self.vocab_sizes = [int(v) for v in self.vocab_sizes]
        self.tower_widths = [int(w) for w in self.tower_widths]
        if not self.tower_widths:
            raise ContractViolation("tower_widths must be non-empty")
        if any(w < 1 for w in self.tower_widths):
            raise ContractViolation(f"all tower widths must be >= 1, got {self.tower_widths}")
        if any(v < 1 for v in self.vocab_sizes):
            raise ContractViolation("vocabulary sizes must be >= 1")
        if self.vocab_sizes and self.embedding_dim < 1:
            raise ContractViolation("embedding_dim must be >= 1")
        if self.continuous_count < 0:
            raise ContractViolation("continuous_count must be >= 0")
        if self.input_width < 1:
            raise ContractViolation("model has no inputs")
        if self.alpha < 0:
            raise ContractViolation("alpha must be >= 0")

    @property
    def depth(self) -> int:
        return len(self.tower_widths)

    @property
    def input_width(self) -> int:
        return self.embedding_dim * len(self.vocab_sizes) + self.continuous_count

    def layer_width(self, layer: int) -> int:
        return self.input_width if layer == 0 else self.tower_widths[layer - 1]

    def path_layers(self) -> List[int]:
        """Индексы слоёв со skip-путём: 0 — вход x0, 1..L — скрытые слои."""
        if not self.skip.enabled:
            return []
        first = 0 if self.include_input_skip else 1
        return list(range(first, self.depth + 1))

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["hidden_act"] = self.hidden_act.value
        d["skip"] = self.skip.to_dict()
        return d

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "ModelConfig":
        return cls(**payload)


@dataclass
class SkipPathParams:
    W: Matrix
    v: Optional[Matrix] = None
    w_scale: Optional[Matrix] = None
    alpha: float = 0.01


@dataclass
class SkipCache:
    layer: int
    x: Matrix
    u: Matrix
    t: Matrix
    t_deriv: Matrix
    s: Optional[Matrix] = None
    s_deriv: Optional[Matrix] = None


@dataclass
class ForwardCache:
    x0: Matrix
    acts: List[Matrix]
    pre: List[Matrix]
    derivs: List[Matrix]
    paths: Dict[int, SkipCache]
    logit: Matrix
    version: int
    categorical: Optional[np.ndarray] = None
    consumed: bool = False


# =====================================================================
# 1. ИНИЦИАЛИЗАЦИЯ
# =====================================================================

def init_params(config: ModelConfig) -> Params:
    """
    Каждая группа параметров берётся из своего подпотока,
    поэтому отключение skip-путей не меняет веса башни.
    """
    root = RngState(config.seed)
    params: Params = {}

    for f, vocab in enumerate(config.vocab_sizes):
        rng = root.derive(STREAM_EMBEDDING, f)
        # строки N(0, 1/embedding_dim): ожидаемая норма строки ~ 1
        params[f"emb.{f}"] = rng.generator.normal(
            0.0, 1.0 / np.sqrt(config.embedding_dim), size=(vocab, config.embedding_dim)
        )

    gain = init_gain(config.hidden_act)
    fan_in = config.input_width
    for i, width in enumerate(config.tower_widths, start=1):
        rng = root.derive(STREAM_TOWER, i)
        params[f"tower.{i}.w"] = scaled_init(fan_in, width, rng, gain)
        params[f"tower.{i}.b"] = np.zeros(width, dtype=DTYPE)
        fan_in = width

    if config.tower_head:
        rng = root.derive(STREAM_HEAD)
        params["head.w"] = scaled_init(fan_in, 1, rng, gain=1.0)[:, 0]
        params["head.b"] = np.zeros(1, dtype=DTYPE)

    for layer in config.path_layers():
        width = config.layer_width(layer)
        rng = root.derive(STREAM_SKIP, layer)
        # W ~ N(0, 1/width): вклад пути с единичной дисперсией при инициализации
        params[f"skip.{layer}.w"] = scaled_init(width, 1, rng, gain=1.0)[:, 0]
        if config.skip.scale_mode is ScaleMode.LEARNED:
            params[f"skip.{layer}.v"] = np.ones(width, dtype=DTYPE)
        elif config.skip.scale_mode is ScaleMode.META:
            meta_rng = rng.derive(1)
            if config.meta_per_element:
                params[f"skip.{layer}.w_scale"] = scaled_init(width, width, meta_rng, gain=1.0)
            else:
                params[f"skip.{layer}.w_scale"] = scaled_init(width, 1, meta_rng, gain=1.0)[:, 0]
    return params


def skip_params(params: Params, layer: int, alpha: float) -> SkipPathParams:
    return SkipPathParams(
        W=params[f"skip.{layer}.w"],
        v=params.get(f"skip.{layer}.v"),
        w_scale=params.get(f"skip.{layer}.w_scale"),
        alpha=alpha,
    )


# =====================================================================
# 2. ЭМБЕДДИНГИ
# =====================================================================

def embed_lookup(
    indices: Optional[np.ndarray],
    tables: Sequence[Matrix],
    continuous: Optional[Matrix] = None,
) -> Matrix:
    """x0 = [emb_0[i_0], ..., emb_F[i_F], continuous] в порядке объявления полей."""
    parts: List[Matrix] = []
    if tables:
        if indices is None:
            raise ContractViolation("categorical indices are required")
        indices = np.asarray(indices)
        if indices.ndim != 2 or indices.shape[1] != len(tables):
            raise ContractViolation(
                f"indices must have shape (batch, {len(tables)}), got {indices.shape}"
            )
        for f, table in enumerate(tables):
            column = indices[:, f]
            if column.size and (column.min() < 0 or column.max() >= table.shape[0]):
                raise ContractViolation(
                    f"field {f}: index out of range for vocabulary of size {table.shape[0]}"
                )
            parts.append(table[column])
    if continuous is not None and np.shape(continuous)[-1] > 0:
        parts.append(np.asarray(continuous, dtype=DTYPE))
    if not parts:
        raise ContractViolation("nothing to embed")
    return np.concatenate(parts, axis=1) if len(parts) > 1 else np.array(parts[0], dtype=DTYPE)


def embed_backward(
    indices: np.ndarray,
    d_x0: Matrix,
    tables: Sequence[Matrix],
) -> Params:
    grads: Params = {}
    offset = 0
    for f, table in enumerate(tables):
        dim = table.shape[1]
        g = np.zeros_like(table)
        np.add.at(g, indices[:, f], d_x0[:, offset:offset + dim])
        grads[f"emb.{f}"] = g
        offset += dim
    return grads


# =====================================================================
# 3. SKIP-ПУТИ
# =====================================================================

def meta_scale(x: Matrix, w_scale: Matrix, alpha: float = 0.01) -> Matrix:
    """
    s(x) = leaky_relu(x . w_scale).

    Скаляр на пример при w_scale формы (width,), поэлементно при (width, width).
    Вызывающий код трактует результат как константу по x.
    """
    a = np.asarray(x, dtype=DTYPE) @ w_scale
    s, _ = activation(ActivationKind.LEAKY_RELU, a, alpha)
    return s


def skip_path_forward(
    x: Matrix,
    p: SkipPathParams,
    v: SkipVariant,
    layer: int = 0,
) -> Tuple[Matrix, SkipCache]:
    if not v.enabled:
        raise ContractViolation("skip paths are disabled for this variant")
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != p.W.shape[0]:
        raise ContractViolation(
            f"skip path width mismatch: input {x.shape}, W {p.W.shape}"
        )

    s = s_deriv = None
    if v.scale_mode is ScaleMode.NONE:
        u = x
    elif v.scale_mode is ScaleMode.LEARNED:
        if p.v is None:
            raise ContractViolation("learned scale requires parameter v")
        u = x * p.v
    else:
        if p.w_scale is None:
            raise ContractViolation("meta scale requires parameter w_scale")
        s = meta_scale(x, p.w_scale, p.alpha)
        # наклон leaky_relu берётся по предактивации, а не по s
        _, s_deriv = activation(ActivationKind.LEAKY_RELU, x @ p.w_scale, p.alpha)
        u = x * (s[:, None] if s.ndim == 1 else s)

    t, t_deriv = activation(v.act, u)
    contrib = t @ p.W
    return contrib, SkipCache(layer=layer, x=x, u=u, t=t, t_deriv=t_deriv, s=s, s_deriv=s_deriv)


def skip_path_backward(
    cache: SkipCache,
    p: SkipPathParams,
    v: SkipVariant,
    d_contrib: Matrix,
) -> Tuple[Params, Matrix]:
    grads: Params = {"w": cache.t.T @ d_contrib}
    du = (d_contrib[:, None] * p.W[None, :]) * cache.t_deriv

    if v.scale_mode is ScaleMode.NONE:
        dx = du
    elif v.scale_mode is ScaleMode.LEARNED:
        grads["v"] = (du * cache.x).sum(axis=0)
        dx = du * p.v
    else:
        s = cache.s
        leaky_deriv = cache.s_deriv
        if s.ndim == 1:
            da = (du * cache.x).sum(axis=1) * leaky_deriv
            dx = du * s[:, None]
        else:
            da = du * cache.x * leaky_deriv
            dx = du * s
        # stop gradient: x входит в w_scale-ветку только как значение
        grads["w_scale"] = cache.x.T @ da
    return grads, dx


# =====================================================================
# 4. БАШНЯ: ПРЯМОЙ И ОБРАТНЫЙ ПРОХОД
# =====================================================================

def tower_forward(
    x0: Matrix,
    params: Params,
    config: ModelConfig,
    version: int = 0,
) -> Tuple[Matrix, ForwardCache]:
    x0 = np.asarray(x0, dtype=DTYPE)
    if x0.ndim != 2 or x0.shape[1] != config.input_width:
        raise ContractViolation(
            f"x0 must have shape (batch, {config.input_width}), got {x0.shape}"
        )

    acts: List[Matrix] = [x0]
    pre: List[Matrix] = []
    derivs: List[Matrix] = []
    for i in range(1, config.depth + 1):
        z = acts[-1] @ params[f"tower.{i}.w"] + params[f"tower.{i}.b"]
        a, d = activation(config.hidden_act, z, config.alpha)
        pre.append(z)
        derivs.append(d)
        acts.append(a)

    logit = np.zeros(x0.shape[0], dtype=DTYPE)
    if config.tower_head:
        logit = logit + (acts[-1] @ params["head.w"] + params["head.b"][0])

    paths: Dict[int, SkipCache] = {}
    for layer in config.path_layers():
        contrib, sc = skip_path_forward(
            acts[layer], skip_params(params, layer, config.alpha), config.skip, layer
        )
        logit = logit + contrib
        paths[layer] = sc

    cache = ForwardCache(
        x0=x0, acts=acts, pre=pre, derivs=derivs, paths=paths, logit=logit, version=version
    )
    return logit, cache


def tower_backward(
    cache: ForwardCache,
    d_logit: Matrix,
    params: Params,
    config: ModelConfig,
    version: Optional[int] = None,
) -> Tuple[Params, Matrix]:
    """
    Точные градиенты всех параметров башни/skip-путей и d_x0.

    Слой l получает и градиент через башню, и прямой вклад своего skip-пути.
    Кэш одноразовый и привязан к версии параметров.
    """
    if cache.consumed:
        raise ContractViolation("forward cache was already used by a backward pass")
    if version is not None and version != cache.version:
        raise ContractViolation(
            f"stale forward cache: parameters at version {version}, cache at {cache.version}"
        )
    d_logit = np.asarray(d_logit, dtype=DTYPE)
    if d_logit.shape != cache.logit.shape:
        raise ContractViolation(
            f"d_logit must have shape {cache.logit.shape}, got {d_logit.shape}"
        )

    grads: Params = {}
    path_dx: Dict[int, Matrix] = {}
    for layer, sc in cache.paths.items():
        g, dx_path = skip_path_backward(
            sc, skip_params(params, layer, config.alpha), config.skip, d_logit
        )
        for name, value in g.items():
            grads[f"skip.{layer}.{name}"] = value
        path_dx[layer] = dx_path

    depth = config.depth
    if config.tower_head:
        grads["head.w"] = cache.acts[depth].T @ d_logit
        grads["head.b"] = np.array([d_logit.sum()])
        dx = np.outer(d_logit, params["head.w"])
    else:
        dx = np.zeros_like(cache.acts[depth])

    for i in range(depth, 0, -1):
        if i in path_dx:
            dx = dx + path_dx[i]
        dz = dx * cache.derivs[i - 1]
        grads[f"tower.{i}.w"] = cache.acts[i - 1].T @ dz
        grads[f"tower.{i}.b"] = dz.sum(axis=0)
        dx = dz @ params[f"tower.{i}.w"].T

    if 0 in path_dx:
        dx = dx + path_dx[0]

    cache.consumed = True
    return grads, dx


# =====================================================================
# 5. МОДЕЛЬ
# =====================================================================

@dataclass
class SkipLogitModel:
    config: ModelConfig
    params: Params
    version: int = 0

    @classmethod
    def initialize(cls, config: ModelConfig) -> "SkipLogitModel":
        return cls(config=config, params=init_params(config))

    @property
    def tables(self) -> List[Matrix]:
        return [self.params[f"emb.{f}"] for f in range(len(self.config.vocab_sizes))]

    def embed(
        self,
        categorical: Optional[np.ndarray],
        continuous: Optional[Matrix] = None,
    ) -> Matrix:
        return embed_lookup(categorical, self.tables, continuous)

    def forward(
        self,
        categorical: Optional[np.ndarray],
        continuous: Optional[Matrix] = None,
    ) -> Tuple[Matrix, ForwardCache]:
        x0 = self.embed(categorical, continuous)
        logit, cache = tower_forward(x0, self.params, self.config, self.version)
        cache.categorical = None if categorical is None else np.asarray(categorical)
        return logit, cache

    def forward_x0(self, x0: Matrix) -> Tuple[Matrix, ForwardCache]:
        return tower_forward(x0, self.params, self.config, self.version)

    def backward(self, cache: ForwardCache, d_logit: Matrix) -> Params:
        grads, d_x0 = tower_backward(cache, d_logit, self.params, self.config, self.version)
        if self.config.vocab_sizes and cache.categorical is not None:
            grads.update(embed_backward(cache.categorical, d_x0, self.tables))
        return grads

    def apply_update(self) -> None:
        self.version += 1


def predict_logits(
    model: SkipLogitModel,
    categorical: Optional[np.ndarray],
    continuous: Optional[Matrix] = None,
    chunk: int = 8192,
) -> Matrix:
    n = _batch_len(categorical, continuous)
    out = np.empty(n, dtype=DTYPE)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        cat = None if categorical is None else categorical[start:stop]
        cont = None if continuous is None else continuous[start:stop]
        out[start:stop], _ = model.forward(cat, cont)
    return out


def path_contributions(
    model: SkipLogitModel,
    x0: Matrix,
    chunk: int = 10000,
) -> Tuple[Matrix, Matrix, List[int]]:
    """
    Логит и вклад каждого skip-пути (колонки в порядке path_layers)
    без удержания кэшей — для выборок порядка 10^5.
    """
    layers = model.config.path_layers()
    n = x0.shape[0]
    logit = np.empty(n, dtype=DTYPE)
    contribs = np.zeros((n, len(layers)), dtype=DTYPE)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        out, cache = model.forward_x0(x0[start:stop])
        logit[start:stop] = out
        for col, layer in enumerate(layers):
            sc = cache.paths[layer]
            contribs[start:stop, col] = sc.t @ model.params[f"skip.{layer}.w"]
    return logit, contribs, layers


def _batch_len(categorical: Optional[np.ndarray], continuous: Optional[Matrix]) -> int:
    if categorical is not None:
        return int(np.shape(categorical)[0])
    if continuous is not None:
        return int(np.shape(continuous)[0])
    raise ContractViolation("empty batch")
