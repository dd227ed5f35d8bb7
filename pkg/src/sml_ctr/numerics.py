"""
Численная основа: плотные матрицы float64, воспроизводимый ГСЧ,
инициализация весов и скалярные активации с точными производными.

Matrix — это просто numpy.ndarray dtype=float64 (2-D для весов/активаций,
1-D допускается для векторов). Все функции чистые: входы не мутируются.
"""
import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from .errors import ContractViolation, NonFiniteError

Matrix = NDArray[np.float64]

DTYPE = np.float64


# =====================================================================
# 1. ГЕНЕРАТОР СЛУЧАЙНЫХ ЧИСЕЛ
# =====================================================================

@dataclass
class RngState:
    """
    Поток случайных чисел: numpy Philox (счётчиковый, 4x64 бит, 10 раундов)
    с ключом из SeedSequence(seed, spawn_key=stream).

    Разделение потоков: derive(k1, k2, ...) даёт независимый поток с
    spawn_key = stream + (k1, k2, ...). Один seed => одна и та же
    последовательность на любой машине с тем же numpy.
    """

    seed: int
    stream: Tuple[int, ...] = ()
    generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ContractViolation("seed must be non-negative")
        self.stream = tuple(int(k) for k in self.stream)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def derive(self, *keys: int) -> "RngState":
        return RngState(self.seed, self.stream + tuple(keys))

    def to_dict(self) -> Dict[str, Any]:
        state = self.generator.bit_generator.state
        return {
            "seed": self.seed,
            "stream": list(self.stream),
            "bit_generator": _jsonable(state),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "RngState":
        rng = cls(int(payload["seed"]), tuple(payload.get("stream", ())))
        state = payload.get("bit_generator")
        if state:
            restored = dict(state)
            restored["state"] = {
                k: np.asarray(v, dtype=np.uint64) for k, v in state["state"].items()
            }
            restored["buffer"] = np.asarray(state["buffer"], dtype=np.uint64)
            rng.generator.bit_generator.state = restored
        return rng


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return [int(v) for v in value.tolist()]
    if isinstance(value, np.integer):
        return int(value)
    return value


# =====================================================================
# 2. ЛИНЕЙНАЯ АЛГЕБРА И СЭМПЛИРОВАНИЕ
# =====================================================================

def gemm(a: Matrix, b: Matrix) -> Matrix:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation(f"gemm expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"gemm dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def sample_gaussian(
    rng: RngState,
    n: int,
    mean: float = 0.0,
    std: float = 1.0,
    cols: int = 1,
) -> Matrix:
    if std < 0:
        raise ContractViolation(f"std must be >= 0, got {std}")
    if n < 0 or cols < 0:
        raise ContractViolation("sample shape must be non-negative")
    if std == 0:
        return np.full((n, cols), float(mean), dtype=DTYPE)
    return rng.generator.normal(loc=mean, scale=std, size=(n, cols))


def init_gain(kind: "ActivationKind") -> float:
    # He для выпрямителей, единичный коэффициент для остальных
    return 2.0 if ActivationKind(kind) in (ActivationKind.RELU, ActivationKind.LEAKY_RELU) else 1.0


def scaled_init(fan_in: int, fan_out: int, rng: RngState, gain: float) -> Matrix:
    if fan_in < 1:
        raise ContractViolation(f"fan_in must be >= 1, got {fan_in}")
    if fan_out < 1:
        raise ContractViolation(f"fan_out must be >= 1, got {fan_out}")
    return rng.generator.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))


def he_init(fan_in: int, fan_out: int, rng: RngState) -> Matrix:
    """Веса N(0, 2/fan_in)."""
    return scaled_init(fan_in, fan_out, rng, gain=2.0)


def symmetric_sqrt(m: Matrix) -> Matrix:
    """Корень из симметричной положительно определённой матрицы через eigh."""
    eigvals, eigvecs = np.linalg.eigh(m)
    if eigvals.min() <= 0:
        raise ContractViolation("matrix is not positive definite")
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


# =====================================================================
# 3. АКТИВАЦИИ
# =====================================================================

class ActivationKind(str, enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"


ArrayLike = Union[float, Matrix]


def activation(
    kind: Union[ActivationKind, str],
    x: ArrayLike,
    alpha: float = 0.01,
) -> Tuple[ArrayLike, ArrayLike]:
    """
    Возвращает (значение, производная) поэлементно.

    Для relu / leaky_relu производная в точке 0 равна наклону справа (1);
    то же соглашение используется при подсчёте "мёртвых" нейронов.
    """
    kind = ActivationKind(kind)
    x_arr = np.asarray(x, dtype=DTYPE)

    if kind is ActivationKind.IDENTITY:
        value, deriv = x_arr, np.ones_like(x_arr)
    elif kind is ActivationKind.RELU:
        positive = x_arr >= 0
        value = np.where(positive, x_arr, 0.0)
        deriv = positive.astype(DTYPE)
    elif kind is ActivationKind.LEAKY_RELU:
        positive = x_arr >= 0
        value = np.where(positive, x_arr, alpha * x_arr)
        deriv = np.where(positive, 1.0, alpha)
    elif kind is ActivationKind.TANH:
        value = np.tanh(x_arr)
        deriv = 1.0 - value * value
    else:
        value = expit(x_arr)
        deriv = value * (1.0 - value)

    if np.ndim(x) == 0:
        return float(value), float(deriv)
    return value, deriv


def sigmoid(x: ArrayLike) -> ArrayLike:
    return expit(x)


# =====================================================================
# 4. КОНЕЧНЫЕ РАЗНОСТИ
# =====================================================================

def finite_diff_grad(
    f: Callable[[Matrix], float],
    x: Matrix,
    h: float = 1e-5,
) -> Matrix:
    """Центральные разности (f(x + h e_i) - f(x - h e_i)) / 2h по каждому элементу."""
    if h <= 0:
        raise ContractViolation(f"step h must be > 0, got {h}")

    point = np.array(x, dtype=DTYPE, copy=True)
    grad = np.zeros_like(point)
    for index in np.ndindex(point.shape):
        original = point[index]

        point[index] = original + h
        plus = float(f(point))
        point[index] = original - h
        minus = float(f(point))
        point[index] = original

        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NonFiniteError(
                f"non-finite function value when perturbing entry {index}", index=index
            )
        grad[index] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(a: ArrayLike, b: ArrayLike) -> float:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    scale = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)
