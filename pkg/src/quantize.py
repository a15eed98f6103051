"""低精度（bf16 / fp16）舍入模拟以及比值偏差、截断不对称、softmax 梯度下溢的审计。"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .utils import make_generator

logger = logging.getLogger(__name__)

# bias_mc_oracle 每块样本数，按块顺序归约保证结果与并行方式无关
MC_CHUNK_SIZE = 1 << 18
MIN_MC_SAMPLES = 10_000


@dataclass(frozen=True)
class FloatFormat:
    name: str
    exponent_bits: int
    mantissa_bits: int

    @property
    def bias(self) -> int:
        return (1 << (self.exponent_bits - 1)) - 1

    @property
    def emax(self) -> int:
        return self.bias

    @property
    def emin(self) -> int:
        return 1 - self.bias

    @property
    def max_finite(self) -> float:
        return math.ldexp(2.0 - math.ldexp(1.0, -self.mantissa_bits), self.emax)

    @property
    def min_subnormal(self) -> float:
        return math.ldexp(1.0, self.emin - self.mantissa_bits)


BF16 = FloatFormat("bf16", 8, 7)
FP16 = FloatFormat("fp16", 5, 10)


class QuantMode(str, Enum):
    OFF = "off"
    BF16 = "bf16-cast"
    FP16 = "fp16-cast"


def format_for(mode: QuantMode) -> Optional[FloatFormat]:
    return {QuantMode.OFF: None, QuantMode.BF16: BF16, QuantMode.FP16: FP16}[QuantMode(mode)]


def format_by_name(name: str) -> FloatFormat:
    formats = {BF16.name: BF16, FP16.name: FP16}
    if name not in formats:
        raise ValueError(f"未知的浮点格式: {name}，可选 {list(formats)}")
    return formats[name]


def _binade_exponent(values: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    # frexp: v = m·2^e, 0.5 ≤ |m| < 1，所在 binade 为 2^(e-1)；次正规数固定在 emin
    _, exponent = np.frexp(values)
    return np.maximum(exponent - 1, fmt.emin)


def cast(x, fmt: FloatFormat):
    """
    把 float64 舍入到 fmt 可表示的最近值（就近偶数），并模拟次正规数与溢出为 ±inf。
    零、inf、NaN 原样保留；标量输入返回 float。
    """
    values = np.asarray(x, dtype=np.float64)
    result = np.array(values, copy=True)
    mask = np.isfinite(values) & (values != 0)
    finite = values[mask]
    quantum = np.ldexp(1.0, _binade_exponent(finite, fmt) - fmt.mantissa_bits)
    rounded = np.rint(finite / quantum) * quantum
    overflow = np.abs(rounded) > fmt.max_finite
    rounded[overflow] = np.copysign(np.inf, finite[overflow])
    result[mask] = rounded
    if result.ndim == 0:
        return float(result)
    return result


def ulp(x, fmt: FloatFormat):
    """x 所在 binade 的 ulp；x = 0 时返回最小次正规间距"""
    values = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("ulp 的输入必须为有限值")
    exponent = np.where(values == 0, fmt.emin, _binade_exponent(np.where(values == 0, 1.0, values), fmt))
    result = np.ldexp(1.0, exponent - fmt.mantissa_bits)
    if result.ndim == 0:
        return float(result)
    return result


def next_down(x: float, fmt: FloatFormat) -> float:
    """正的可表示值 x 的下一个更小的可表示值"""
    step = ulp(x, fmt)
    mantissa, _ = math.frexp(x)
    if mantissa == 0.5 and x > fmt.min_subnormal * (1 << fmt.mantissa_bits):
        step /= 2
    return x - step


def observed_ratio(logp_new, logp_old, mode: QuantMode = QuantMode.OFF):
    """
    观测到的重要性比值 exp(logp_new - logp_old)。

    参数:
    mode: 量化模式；非 off 时先把两个 log 概率舍入到对应格式，差值与指数在全精度下计算

    返回:
    与输入形状一致的比值；标量输入返回 float
    """
    new = np.asarray(logp_new, dtype=np.float64)
    old = np.asarray(logp_old, dtype=np.float64)
    fmt = format_for(mode)
    if fmt is None:
        ratio = np.exp(new - old)
    else:
        ratio = np.exp(cast(new, fmt) - cast(old, fmt))
    ratio = np.asarray(ratio, dtype=np.float64)
    if ratio.ndim == 0:
        return float(ratio)
    return ratio


def exact_ratio_bias(r_true: float, ulp_new: float, ulp_old: float) -> float:
    """舍入误差均匀分布时 E[r_obs] 的闭式解：r · sinhc(u_new/2) · sinhc(u_old/2)"""

    def sinhc(x: float) -> float:
        return 1.0 if x == 0 else math.sinh(x) / x

    return r_true * sinhc(ulp_new / 2) * sinhc(ulp_old / 2)


@dataclass(frozen=True)
class RatioBiasReport:
    r_true: float
    ulp_new: float
    ulp_old: float
    mean_r_observed: float
    mc_std_error: float
    taylor_prediction: float
    exact_expectation: float
    raw_mean: float
    raw_std_error: float
    sample_count: int

    @property
    def bias(self) -> float:
        return self.mean_r_observed - self.r_true

    @property
    def significance(self) -> float:
        """偏差相对 MC 标准误的倍数"""
        if self.mc_std_error == 0:
            return 0.0 if self.bias == 0 else math.inf
        return self.bias / self.mc_std_error


def bias_mc_oracle(r_true: float, ulp_new: float, ulp_old: float, n_samples: int = 1_000_000, seed: int = 0) -> RatioBiasReport:
    """
    蒙特卡洛估计舍入后比值的期望。

    舍入误差 ε ~ U(-u/2, u/2)，δ = ε_new - ε_old，r_obs = r·exp(-δ)。
    主估计量使用控制变量 r·(exp(-δ) + δ)（E[δ] = 0），同时给出原始均值。
    样本按块生成，每块使用独立子流，按块序号顺序累加。
    """
    if n_samples < MIN_MC_SAMPLES:
        raise ValueError(f"样本数至少为 {MIN_MC_SAMPLES}: {n_samples}")
    if r_true <= 0 or ulp_new < 0 or ulp_old < 0:
        raise ValueError(f"参数非法: r_true={r_true}, ulp_new={ulp_new}, ulp_old={ulp_old}")

    # 分别累加 exp(-δ)-1 与 exp(-δ)-1+δ 的一阶、二阶矩
    raw_sum = raw_sq = cv_sum = cv_sq = 0.0
    for chunk, start in enumerate(range(0, n_samples, MC_CHUNK_SIZE)):
        size = min(MC_CHUNK_SIZE, n_samples - start)
        rng = make_generator(seed, chunk)
        eps_new = rng.uniform(-ulp_new / 2, ulp_new / 2, size)
        eps_old = rng.uniform(-ulp_old / 2, ulp_old / 2, size)
        delta = eps_new - eps_old
        raw = np.expm1(-delta)
        controlled = raw + delta
        raw_sum += float(np.sum(raw))
        raw_sq += float(np.sum(raw * raw))
        cv_sum += float(np.sum(controlled))
        cv_sq += float(np.sum(controlled * controlled))

    def moments(total: float, total_sq: float):
        mean = total / n_samples
        variance = max(total_sq / n_samples - mean * mean, 0.0) * n_samples / (n_samples - 1)
        return mean, math.sqrt(variance / n_samples)

    raw_mean, raw_se = moments(raw_sum, raw_sq)
    cv_mean, cv_se = moments(cv_sum, cv_sq)
    report = RatioBiasReport(
        r_true=r_true,
        ulp_new=ulp_new,
        ulp_old=ulp_old,
        mean_r_observed=r_true * (1.0 + cv_mean),
        mc_std_error=r_true * cv_se,
        taylor_prediction=r_true * (1.0 + (ulp_new**2 + ulp_old**2) / 24.0),
        exact_expectation=exact_ratio_bias(r_true, ulp_new, ulp_old),
        raw_mean=r_true * (1.0 + raw_mean),
        raw_std_error=r_true * raw_se,
        sample_count=n_samples,
    )
    logger.debug(f"比值偏差: r={r_true}, 观测均值={report.mean_r_observed:.10f}, {report.significance:.1f}σ")
    return report


@dataclass(frozen=True)
class EffectiveClipBounds:
    eps_low: float
    eps_high: float


def effective_clip_bounds(eps_low: float, eps_high: float, fmt: FloatFormat) -> EffectiveClipBounds:
    """
    比值保持在 fmt 中时，实际起作用的截断阈值。
    返回的 eps_high 满足：真实比值 ≥ 1 + eps_high 时舍入后严格超过 1 + ε_high；eps_low 同理。
    """
    upper = 1.0 + eps_high
    grid_up = cast(upper, fmt)
    if grid_up <= upper:
        grid_up += ulp(grid_up, fmt)
    upper_threshold = (grid_up + next_down(grid_up, fmt)) / 2

    lower = 1.0 - eps_low
    grid_low = cast(lower, fmt)
    if grid_low >= lower:
        grid_low = next_down(grid_low, fmt)
    lower_threshold = (grid_low + grid_low + ulp(grid_low, fmt)) / 2
    return EffectiveClipBounds(eps_low=1.0 - lower_threshold, eps_high=upper_threshold - 1.0)


@dataclass(frozen=True)
class ClipAsymmetryReport:
    format_name: str
    n_tokens: int
    upper_off: int
    lower_off: int
    upper_cast: int
    lower_cast: int
    upper_discordant: int
    lower_discordant: int

    @property
    def upper_fraction_off(self) -> float:
        return self.upper_off / self.n_tokens

    @property
    def lower_fraction_off(self) -> float:
        return self.lower_off / self.n_tokens

    @property
    def upper_fraction_cast(self) -> float:
        return self.upper_cast / self.n_tokens

    @property
    def lower_fraction_cast(self) -> float:
        return self.lower_cast / self.n_tokens

    @property
    def upper_shift_sigma(self) -> float:
        """成对（McNemar）检验下上截断数变化的显著性"""
        if self.upper_discordant == 0:
            return 0.0
        return (self.upper_cast - self.upper_off) / math.sqrt(self.upper_discordant)

    @property
    def lower_shift_sigma(self) -> float:
        if self.lower_discordant == 0:
            return 0.0
        return (self.lower_cast - self.lower_off) / math.sqrt(self.lower_discordant)


def clip_flags(ratio, advantage, eps_low: float, eps_high: float):
    """截断分支生效的 token：A>0 且 r>1+ε_high 为上截断，A<0 且 r<1-ε_low 为下截断"""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    upper = (advantage > 0) & (ratio > 1.0 + eps_high)
    lower = (advantage < 0) & (ratio < 1.0 - eps_low)
    return upper, lower


def clip_asymmetry_audit(
    n_tokens: int = 1_000_000,
    fmt: FloatFormat = BF16,
    eps_low: float = 0.2,
    eps_high: float = 0.2,
    seed: int = 0,
    logratio_std: float = 0.15,
) -> ClipAsymmetryReport:
    """
    在同一批合成 token 上分别以全精度与低精度计算比值，统计上/下截断数。

    旧 log 概率 ~ U(-1, -0.3)，真实 log 比值 ~ N(0, logratio_std)，优势符号随机。
    """
    if n_tokens < 1:
        raise ValueError(f"n_tokens 必须为正: {n_tokens}")
    rng = make_generator(seed, 0xC11B)
    old = rng.uniform(-1.0, -0.3, n_tokens)
    new = np.minimum(old + logratio_std * rng.standard_normal(n_tokens), 0.0)
    advantage = np.where(rng.random(n_tokens) < 0.5, 1.0, -1.0)

    mode = QuantMode.BF16 if fmt == BF16 else QuantMode.FP16
    upper_off, lower_off = clip_flags(observed_ratio(new, old), advantage, eps_low, eps_high)
    upper_cast, lower_cast = clip_flags(observed_ratio(new, old, mode), advantage, eps_low, eps_high)

    report = ClipAsymmetryReport(
        format_name=fmt.name,
        n_tokens=n_tokens,
        upper_off=int(np.sum(upper_off)),
        lower_off=int(np.sum(lower_off)),
        upper_cast=int(np.sum(upper_cast)),
        lower_cast=int(np.sum(lower_cast)),
        upper_discordant=int(np.sum(upper_off != upper_cast)),
        lower_discordant=int(np.sum(lower_off != lower_cast)),
    )
    logger.info(
        f"截断审计({fmt.name}): 上截断 {report.upper_off} -> {report.upper_cast} ({report.upper_shift_sigma:+.1f}σ), "
        f"下截断 {report.lower_off} -> {report.lower_cast} ({report.lower_shift_sigma:+.1f}σ)"
    )
    return report


PRECISIONS = {"half": np.float16, "single": np.float32, "double": np.float64}


@dataclass(frozen=True)
class SoftmaxGradAudit:
    precision: str
    prob_p: float
    sampled_term: float
    other_term: float
    fixed: bool

    @property
    def total(self) -> float:
        return self.sampled_term + self.other_term

    @property
    def sampled_vanished(self) -> bool:
        return self.sampled_term == 0.0


def softmax_grad_underflow_audit(prob_p: float, precision: str = "single", fix: bool = False, advantage: float = 1.0) -> SoftmaxGradAudit:
    """
    两 token softmax，采样 token 概率为 p。以给定精度计算 A·score 的两个分量：
    采样 token 为 -A(1-p)，另一个为 A(1-p)。p 在该精度下舍入到 1 时前者消失。
    fix=True 时采样 token 的分量改用 float64 重算。
    """
    if precision not in PRECISIONS:
        raise ValueError(f"未知精度: {precision}，可选 {list(PRECISIONS)}")
    if not 0.0 < prob_p < 1.0:
        raise ValueError(f"p 必须位于 (0, 1): {prob_p}")
    dtype = PRECISIONS[precision]
    p = dtype(prob_p)
    q = dtype(1.0 - prob_p)
    a = dtype(advantage)
    if fix:
        sampled = -advantage * (1.0 - prob_p)
    else:
        sampled = float(-a * (dtype(1.0) - p))
    other = float(a * q)
    return SoftmaxGradAudit(precision, prob_p, float(sampled), other, fix)


@dataclass(frozen=True)
class UnderflowThreshold:
    precision: str
    exponent: int

    @property
    def probability(self) -> float:
        return 1.0 - math.ldexp(1.0, -self.exponent)


def underflow_threshold(precision: str = "single") -> UnderflowThreshold:
    """实测：最小的 k 使得 1 - 2^-k 在该精度下舍入为 1"""
    if precision not in PRECISIONS:
        raise ValueError(f"未知精度: {precision}，可选 {list(PRECISIONS)}")
    dtype = PRECISIONS[precision]
    for k in range(1, 64):
        if dtype(1.0 - math.ldexp(1.0, -k)) == dtype(1.0):
            return UnderflowThreshold(precision, k)
    raise ValueError(f"{precision} 精度下未找到下溢阈值")
