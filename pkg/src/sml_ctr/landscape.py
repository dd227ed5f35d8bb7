"""
Численная проверка теории для вложенных линейных skip-сетей

    y_hat = (I + A_1 (I + A_2 (... (I + A_l)))) x,   y = R x + xi.

Риск в замкнутой форме, его аналитический градиент, нижняя граница
нормы градиента, значение границы нормы из леммы и рандомизированные
кампании проверки для verify-theory.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import expm
from scipy.optimize import minimize
from scipy.stats import norm

from .errors import ContractViolation, LemmaHypothesisError, NonFiniteError, SpectralError
from .numerics import DTYPE, Matrix, RngState, finite_diff_grad, relative_error, symmetric_sqrt
from .workers import run_jobs

logger = logging.getLogger(__name__)


# =====================================================================
# 1. ЭКЗЕМПЛЯР ЗАДАЧИ
# =====================================================================

@dataclass
class LinearInstance:
    R: Matrix
    Sigma: Matrix
    A: List[Matrix]
    C: Optional[float] = None

    def __post_init__(self) -> None:
        self.R = np.asarray(self.R, dtype=DTYPE)
        self.Sigma = np.asarray(self.Sigma, dtype=DTYPE)
        self.A = [np.asarray(a, dtype=DTYPE) for a in self.A]
        d = self.R.shape[0]
        if self.R.shape != (d, d) or self.Sigma.shape != (d, d):
            raise ContractViolation(f"R and Sigma must be square of the same size, got {self.R.shape}, {self.Sigma.shape}")
        if self.C is None:
            # E|xi|^2 = d для единичного сферического шума
            self.C = float(d)

    @property
    def d(self) -> int:
        return self.R.shape[0]

    @property
    def l(self) -> int:
        return len(self.A)

    def with_layers(self, A: Sequence[Matrix]) -> "LinearInstance":
        return LinearInstance(R=self.R, Sigma=self.Sigma, A=list(A), C=self.C)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "d": self.d,
            "l": self.l,
            "C": self.C,
            "R": self.R.tolist(),
            "Sigma": self.Sigma.tolist(),
            "A": [a.tolist() for a in self.A],
        }


def _check_layers(A: Sequence[Matrix], d: Optional[int] = None) -> int:
    if not A:
        raise ContractViolation("at least one layer is required")
    d = A[0].shape[0] if d is None else d
    for i, a in enumerate(A, start=1):
        if a.shape != (d, d):
            raise ContractViolation(f"layer {i}: expected ({d}, {d}), got {a.shape}")
    return d


def _sigma_sqrt(inst: LinearInstance) -> Matrix:
    if not np.allclose(inst.Sigma, inst.Sigma.T, rtol=0.0, atol=1e-12):
        raise ContractViolation("Sigma must be symmetric")
    return symmetric_sqrt(inst.Sigma)


# =====================================================================
# 2. ВЛОЖЕННОЕ ПРОИЗВЕДЕНИЕ, РИСК, ГРАДИЕНТ
# =====================================================================

def suffixes(A: Sequence[Matrix]) -> List[Matrix]:
    """S_j = I + A_j S_{j+1}, S_{l+1} = I; возвращает [S_1, ..., S_{l+1}]."""
    d = _check_layers(A)
    out = [np.eye(d, dtype=DTYPE)]
    for a in reversed(A):
        out.append(np.eye(d, dtype=DTYPE) + a @ out[-1])
    return out[::-1]


def prefixes(A: Sequence[Matrix]) -> List[Matrix]:
    """Q_j = A_1 ... A_{j-1}; Q_1 = I."""
    d = _check_layers(A)
    out = [np.eye(d, dtype=DTYPE)]
    for a in A[:-1]:
        out.append(out[-1] @ a)
    return out


def nested_product(A: Sequence[Matrix]) -> Matrix:
    """(I + A_1 (I + A_2 (... (I + A_l)))), от внутреннего множителя к внешнему."""
    A = [np.asarray(a, dtype=DTYPE) for a in A]
    return suffixes(A)[0]


def excess_risk(inst: LinearInstance) -> float:
    """f(A) - C = |(N - R) Sigma^{1/2}|_F^2."""
    _check_layers(inst.A, inst.d)
    e = (nested_product(inst.A) - inst.R) @ _sigma_sqrt(inst)
    return float(np.sum(e * e))


def population_risk(inst: LinearInstance) -> float:
    return excess_risk(inst) + inst.C


def risk_gradient(inst: LinearInstance) -> List[Matrix]:
    """
    df/dA_j = 2 Q_j^T (N - R) Sigma S_{j+1}^T.

    Следует из N = I + A_1 + ... + A_1...A_{j-1} + Q_j A_j S_{j+1}.
    """
    _check_layers(inst.A, inst.d)
    _sigma_sqrt(inst)
    suf = suffixes(inst.A)
    pre = prefixes(inst.A)
    m = (suf[0] - inst.R) @ inst.Sigma
    return [2.0 * pre[j].T @ m @ suf[j + 1].T for j in range(inst.l)]


def monte_carlo_risk(inst: LinearInstance, n: int, rng: RngState, chunk: int = 200_000) -> Tuple[float, float]:
    """Оценка E|y_hat - y|^2 по n примерам: (среднее, стандартная ошибка)."""
    if n < 2:
        raise ContractViolation("Monte-Carlo risk needs at least 2 samples")
    root = _sigma_sqrt(inst)
    n_mat = nested_product(inst.A)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n:
        size = min(chunk, n - done)
        x = rng.generator.standard_normal((size, inst.d)) @ root
        xi = rng.generator.standard_normal((size, inst.d))
        resid = x @ (n_mat - inst.R).T - xi
        loss = np.sum(resid * resid, axis=1)
        total += float(loss.sum())
        total_sq += float((loss * loss).sum())
        done += size
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0) * n / (n - 1)
    return mean, math.sqrt(var / n)


# =====================================================================
# 3. СПЕКТР, ТЕОРЕМА, ЛЕММА
# =====================================================================

def spectral_extremes(m: Matrix) -> Tuple[float, float]:
    """(sigma_max, sigma_min) через полное SVD (LAPACK, точность ~1e-10 и лучше)."""
    m = np.asarray(m, dtype=DTYPE)
    if m.ndim != 2:
        raise ContractViolation(f"expected a matrix, got shape {m.shape}")
    bad = np.argwhere(~np.isfinite(m))
    if bad.size:
        raise NonFiniteError("matrix has non-finite entries", index=tuple(int(i) for i in bad[0]))
    try:
        s = np.linalg.svd(m, compute_uv=False)
    except np.linalg.LinAlgError as e:
        raise SpectralError(f"SVD did not converge for {m.shape} matrix: {e}") from e
    return float(s[0]), float(s[-1])


@dataclass
class Theorem1Report:
    lhs: float
    rhs: float
    slack: float
    gammas: List[float]
    valid: bool
    excess: float
    sigma_min: float
    sqrt_sigma_slack: float
    suffix_only_slack: float
    suffix_only_gammas: List[float] = field(default_factory=list)

    def holds(self, tolerance: float = 1e-8) -> bool:
        """Неравенство выполняется или не применимо (valid = False)."""
        return (not self.valid) or self.slack >= -tolerance * (1.0 + self.lhs)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _clamp_gamma(g: float) -> float:
    return min(max(g, 0.0), 1.0)


def theorem1_check(inst: LinearInstance, c_opt: Optional[float] = None) -> Theorem1Report:
    """
    |grad f|_F^2 >= 4 sum_i (1 - gamma_i)^2 sigma_min(Sigma) (f(A) - C_opt).

    gamma_i = 1 - sigma_min(Q_i) sigma_min(S_{i+1}): наименьшее сингулярное
    число отображения Delta -> Q_i Delta S_{i+1}, через которое проходит
    градиент слоя i. gamma_i = 1 означает, что граница для слоя вырождена.
    """
    c_opt = inst.C if c_opt is None else c_opt
    grads = risk_gradient(inst)
    lhs = float(sum(np.sum(g * g) for g in grads))
    excess = excess_risk(inst) + (inst.C - c_opt)

    suf = suffixes(inst.A)
    pre = prefixes(inst.A)
    gammas: List[float] = []
    suffix_gammas: List[float] = []
    for i in range(inst.l):
        _, s_suf = spectral_extremes(suf[i + 1])
        _, s_pre = spectral_extremes(pre[i])
        gammas.append(_clamp_gamma(1.0 - s_pre * s_suf))
        suffix_gammas.append(_clamp_gamma(1.0 - s_suf))

    _, sigma_min = spectral_extremes(inst.Sigma)
    valid = all(g < 1.0 for g in gammas)

    def bound(gs: Sequence[float], sig: float) -> float:
        return 4.0 * sum((1.0 - g) ** 2 for g in gs) * sig * excess

    rhs = bound(gammas, sigma_min)
    return Theorem1Report(
        lhs=lhs,
        rhs=rhs,
        slack=lhs - rhs,
        gammas=gammas,
        valid=valid,
        excess=excess,
        sigma_min=sigma_min,
        sqrt_sigma_slack=lhs - bound(gammas, math.sqrt(sigma_min)),
        suffix_only_slack=lhs - bound(suffix_gammas, sigma_min),
        suffix_only_gammas=suffix_gammas,
    )


@dataclass
class Lemma1Bound:
    gamma: float
    bound: float
    hypothesis_holds: bool


def lemma1_bound(R: Matrix, l: int) -> Lemma1Bound:
    """(4 pi + 3 gamma) / l, gamma = max(|ln sigma_max(R)|, |ln sigma_min(R)|); флаг l/3 >= gamma."""
    R = np.asarray(R, dtype=DTYPE)
    if l < 1:
        raise ContractViolation(f"l must be >= 1, got {l}")
    det = float(np.linalg.det(R))
    if det <= 0:
        raise LemmaHypothesisError(f"norm bound requires det(R) > 0, got det(R) = {det:.6g}")
    s_max, s_min = spectral_extremes(R)
    gamma = max(abs(math.log(s_max)), abs(math.log(s_min)))
    return Lemma1Bound(gamma=gamma, bound=(4.0 * math.pi + 3.0 * gamma) / l, hypothesis_holds=l / 3.0 >= gamma)


# =====================================================================
# 4. СЛУЧАЙНЫЕ ЭКЗЕМПЛЯРЫ И СПУСК
# =====================================================================

def random_instance(
    rng: RngState,
    d: int,
    l: int,
    a_scale: float = 0.3,
    r_scale: float = 0.5,
) -> LinearInstance:
    """
    Sigma = Q diag(lambda) Q^T, lambda лог-равномерно в [0.1, 10];
    R = expm(S) (det R = exp(tr S) > 0); |A_i|_2 <= a_scale.
    """
    if d < 1 or l < 1:
        raise ContractViolation(f"d and l must be >= 1, got d={d}, l={l}")
    g = rng.generator
    q, _ = np.linalg.qr(g.standard_normal((d, d)))
    lam = np.exp(g.uniform(math.log(0.1), math.log(10.0), size=d))
    sigma = (q * lam) @ q.T
    sigma = 0.5 * (sigma + sigma.T)

    r = expm(r_scale * g.standard_normal((d, d)) / math.sqrt(d))

    layers = []
    for _ in range(l):
        a = g.standard_normal((d, d))
        s_max, _ = spectral_extremes(a)
        layers.append(a * (a_scale * g.uniform(0.0, 1.0) / s_max))
    return LinearInstance(R=r, Sigma=sigma, A=layers)


def _pack(A: Sequence[Matrix]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in A])


def _unpack(theta: np.ndarray, d: int, l: int) -> List[Matrix]:
    return [theta[i * d * d:(i + 1) * d * d].reshape(d, d) for i in range(l)]


@dataclass
class DescentResult:
    instance: LinearInstance
    grad_norm: float
    excess: float
    iterations: int


def descend_to_critical_point(
    inst: LinearInstance,
    gtol: float = 1e-9,
    max_restarts: int = 5,
) -> DescentResult:
    """BFGS по избыточному риску (f - C) с аналитическим градиентом."""
    d, l = inst.d, inst.l

    def objective(theta: np.ndarray) -> Tuple[float, np.ndarray]:
        cur = inst.with_layers(_unpack(theta, d, l))
        return excess_risk(cur), _pack(risk_gradient(cur))

    theta = _pack(inst.A)
    iterations = 0
    grad_norm = float("inf")
    for _ in range(max_restarts):
        res = minimize(objective, theta, jac=True, method="BFGS",
                       options={"gtol": gtol / 10.0, "maxiter": 10_000})
        theta = res.x
        iterations += int(res.nit)
        grad_norm = float(np.linalg.norm(res.jac))
        if grad_norm < gtol:
            break
        logger.debug("BFGS restart: |grad|=%.3e (%s)", grad_norm, res.message)

    final = inst.with_layers(_unpack(theta, d, l))
    return DescentResult(instance=final, grad_norm=grad_norm, excess=excess_risk(final), iterations=iterations)


# =====================================================================
# 5. КАМПАНИИ ПРОВЕРКИ
# =====================================================================

@dataclass
class CheckResult:
    name: str
    passed: bool
    stats: Dict[str, Any] = field(default_factory=dict)
    failures: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _instance_shape(rng: RngState, max_d: int, max_l: int, min_d: int = 1) -> Tuple[int, int]:
    g = rng.generator
    return int(g.integers(min_d, max_d + 1)), int(g.integers(1, max_l + 1))


def _summary(values: Sequence[float]) -> Dict[str, float]:
    if not values:
        return {}
    arr = np.asarray(values, dtype=DTYPE)
    return {
        "min": float(arr.min()),
        "median": float(np.median(arr)),
        "max": float(arr.max()),
    }


def family_z(instances: int, z_single: float = 3.0) -> float:
    """
    Порог в стандартных ошибках на один экземпляр, при котором вероятность
    ложного срабатывания всей кампании равна вероятности выхода за z_single
    для одного экземпляра.
    """
    alpha = 2.0 * norm.sf(z_single)
    return float(norm.isf(alpha / (2.0 * max(instances, 1))))


def _claim1_job(seed: int, index: int, samples: int) -> Dict[str, Any]:
    rng = RngState(seed).derive(1, index)
    d, l = _instance_shape(rng.derive(0), 5, 4)
    inst = random_instance(rng.derive(1), d, l)
    mean, se = monte_carlo_risk(inst, samples, rng.derive(2))
    closed = population_risk(inst)
    return {"index": index, "closed": closed, "mc": mean, "se": se, "z": abs(closed - mean) / se, "instance": inst}


def claim1_campaign(seed: int, instances: int = 50, samples: int = 1_000_000,
                    z_single: float = 3.0, jobs: int = 1) -> CheckResult:
    """Риск в замкнутой форме против Монте-Карло."""
    z_crit = family_z(instances, z_single)
    rows = run_jobs(_claim1_job, [(seed, i, samples) for i in range(instances)], jobs)
    failures = [
        {"index": r["index"], "z": r["z"], "closed": r["closed"], "mc": r["mc"], "instance": r["instance"].to_dict()}
        for r in rows if r["z"] > z_crit
    ]
    return CheckResult(
        name="claim1_monte_carlo",
        passed=not failures,
        stats={
            "instances": instances,
            "samples": samples,
            "z_threshold": z_crit,
            "z_single": z_single,
            "beyond_z_single": sum(1 for r in rows if r["z"] > z_single),
            "z": _summary([r["z"] for r in rows]),
        },
        failures=failures,
    )


def gradient_campaign(seed: int, instances: int = 100, tolerance: float = 1e-6) -> CheckResult:
    """Аналитический градиент риска против центральных разностей."""
    errors: List[float] = []
    failures: List[Dict[str, Any]] = []
    for i in range(instances):
        rng = RngState(seed).derive(2, i)
        d, l = _instance_shape(rng.derive(0), 5, 4)
        inst = random_instance(rng.derive(1), d, l)
        analytic = risk_gradient(inst)
        worst = 0.0
        for j in range(l):
            def f(a: np.ndarray, j: int = j) -> float:
                layers = list(inst.A)
                layers[j] = a
                return population_risk(inst.with_layers(layers))
            worst = max(worst, relative_error(analytic[j], finite_diff_grad(f, inst.A[j])))
        errors.append(worst)
        if worst >= tolerance:
            failures.append({"index": i, "relative_error": worst, "instance": inst.to_dict()})
    return CheckResult("risk_gradient", not failures, {"instances": instances, "relative_error": _summary(errors)}, failures)


def theorem1_campaign(seed: int, instances: int = 1000, tolerance: float = 1e-8) -> CheckResult:
    """Нижняя граница нормы градиента на случайных экземплярах (|A_i| <= 0.3, d 2..5, l 1..4)."""
    slacks: List[float] = []
    sqrt_slacks: List[float] = []
    suffix_slacks: List[float] = []
    invalid = 0
    failures: List[Dict[str, Any]] = []
    for i in range(instances):
        rng = RngState(seed).derive(3, i)
        d, l = _instance_shape(rng.derive(0), 5, 4, min_d=2)
        inst = random_instance(rng.derive(1), d, l)
        report = theorem1_check(inst)
        if not report.valid:
            invalid += 1
            continue
        slacks.append(report.slack / (1.0 + report.lhs))
        sqrt_slacks.append(report.sqrt_sigma_slack / (1.0 + report.lhs))
        suffix_slacks.append(report.suffix_only_slack / (1.0 + report.lhs))
        if not report.holds(tolerance):
            failures.append({"index": i, "report": report.to_dict(), "instance": inst.to_dict()})
    stats = {
        "instances": instances,
        "invalid": invalid,
        "relative_slack": _summary(slacks),
        "sqrt_sigma_relative_slack": _summary(sqrt_slacks),
        "suffix_only_relative_slack": _summary(suffix_slacks),
        "suffix_only_violations": int(sum(s < -tolerance for s in suffix_slacks)),
        "sqrt_sigma_violations": int(sum(s < -tolerance for s in sqrt_slacks)),
    }
    return CheckResult("theorem1_bound", not failures, stats, failures)


def descent_campaign(seed: int, instances: int = 20, gtol: float = 1e-9, excess_tol: float = 1e-6) -> CheckResult:
    """Точка с нулевым градиентом (найденная спуском) является глобальным минимумом."""
    converged = 0
    excesses: List[float] = []
    failures: List[Dict[str, Any]] = []
    for i in range(instances):
        rng = RngState(seed).derive(4, i)
        d, l = _instance_shape(rng.derive(0), 5, 4, min_d=2)
        result = descend_to_critical_point(random_instance(rng.derive(1), d, l), gtol=gtol)
        if result.grad_norm >= gtol:
            logger.warning("Descent instance %d stopped at |grad|=%.3e", i, result.grad_norm)
            continue
        converged += 1
        excesses.append(result.excess)
        if result.excess >= excess_tol:
            failures.append({"index": i, "excess": result.excess, "grad_norm": result.grad_norm,
                             "instance": result.instance.to_dict()})
    return CheckResult(
        "critical_point_optimality",
        not failures,
        {"instances": instances, "converged": converged, "excess": _summary(excesses)},
        failures,
    )


def lemma1_monotonicity(seed: int, instances: int = 20, max_l: int = 12) -> CheckResult:
    failures: List[Dict[str, Any]] = []
    for i in range(instances):
        rng = RngState(seed).derive(5, i)
        d = int(rng.generator.integers(1, 6))
        r = expm(rng.generator.standard_normal((d, d)) / math.sqrt(d))
        bounds = [lemma1_bound(r, l).bound for l in range(1, max_l + 1)]
        if any(b2 >= b1 for b1, b2 in zip(bounds, bounds[1:])):
            failures.append({"index": i, "bounds": bounds, "R": r.tolist()})
    return CheckResult("lemma1_monotone", not failures, {"instances": instances, "max_l": max_l}, failures)
