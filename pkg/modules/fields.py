"""
波场模块
波速模型、源项、边界数据、解析参考场（平面波、Hankel 点源）及特殊函数
"""

import math
import os
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import FieldError
from .utils import Logger


EULER_GAMMA = 0.5772156649015329

# 级数与渐近展开的切换点
HANKEL_SWITCH = 12.0
SERIES_TERMS = 80
ASYMPTOTIC_TERMS = 24


# ---------------------------------------------------------------------------
# 特殊函数
# ---------------------------------------------------------------------------

def _as_positive(z, name: str) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if np.any(~(z > 0)):
        raise FieldError(f"{name} 需要 z > 0（z=0 处为对数奇点）")
    return z


def _bessel_series(z: np.ndarray, order: int) -> Tuple[np.ndarray, np.ndarray]:
    """小宗量幂级数求 J_order, Y_order（order ∈ {0, 1}）"""
    q = 0.25 * z * z
    log_half = np.log(0.5 * z)
    j = np.zeros_like(z)
    tail = np.zeros_like(z)
    if order == 0:
        term = np.ones_like(z)
        harmonic = 0.0
        for k in range(SERIES_TERMS):
            if k > 0:
                term = term * (-q) / (k * k)
                harmonic += 1.0 / k
            j += term
            # (-1)^{k+1} H_k q^k/(k!)^2 = -H_k * term
            tail -= harmonic * term
        y = (2.0 / np.pi) * ((log_half + EULER_GAMMA) * j + tail)
        return j, y

    half = 0.5 * z
    term = half.copy()
    psi_k1 = -EULER_GAMMA          # ψ(k+1)
    psi_k2 = 1.0 - EULER_GAMMA     # ψ(k+2)
    for k in range(SERIES_TERMS):
        if k > 0:
            term = term * (-q) / (k * (k + 1))
            psi_k1 += 1.0 / k
            psi_k2 += 1.0 / (k + 1)
        j += term
        tail += (psi_k1 + psi_k2) * term
    y = (2.0 / np.pi) * log_half * j - 2.0 / (np.pi * z) - tail / np.pi
    return j, y


def _hankel_asymptotic(z: np.ndarray, order: int) -> np.ndarray:
    """大宗量 Hankel 渐近展开"""
    mu = 4.0 * order * order
    chi = z - (0.5 * order + 0.25) * np.pi
    total = np.zeros_like(z, dtype=complex)
    coeff = 1.0
    for k in range(ASYMPTOTIC_TERMS + 1):
        if k > 0:
            coeff *= (mu - (2 * k - 1) ** 2) / (k * 8.0)
        total += coeff * (1j ** k) / z ** k
    return np.sqrt(2.0 / (np.pi * z)) * np.exp(1j * chi) * total


def _hankel(z, order: int, name: str):
    scalar = np.isscalar(z)
    z = np.atleast_1d(_as_positive(z, name))
    out = np.empty(z.shape, dtype=complex)
    small = z <= HANKEL_SWITCH
    if np.any(small):
        j, y = _bessel_series(z[small], order)
        out[small] = j + 1j * y
    if np.any(~small):
        out[~small] = _hankel_asymptotic(z[~small], order)
    return complex(out[0]) if scalar else out


def hankel0_first_kind(z):
    """
    第一类零阶 Hankel 函数 H0^(1)(z) = J0(z) + iY0(z)

    Args:
        z: 正实数或数组

    Returns:
        复数值
    """
    return _hankel(z, 0, "hankel0_first_kind")


def hankel1_first_kind(z):
    """第一类一阶 Hankel 函数 H1^(1)(z)"""
    return _hankel(z, 1, "hankel1_first_kind")


# ---------------------------------------------------------------------------
# 波速模型
# ---------------------------------------------------------------------------

class WaveSpeed:
    """波速模型基类；__call__ 接受 (..., d) 点数组"""

    c_min: float = 1.0
    c_max: float = 1.0

    def __call__(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> str:
        return self.__class__.__name__


class ConstantSpeed(WaveSpeed):
    """常数波速"""

    def __init__(self, value: float = 1.0):
        if not value > 0:
            raise FieldError(f"波速必须为正，得到 {value}")
        self.value = float(value)
        self.c_min = self.c_max = self.value

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        return np.full(points.shape[:-1], self.value)

    def describe(self):
        return f"constant({self.value})"


class GaussianLensSpeed(WaveSpeed):
    """
    高斯透镜波速 c = 1 - 0.5 exp(-100[(y-0.4)^2 + (x+0.5y-0.7)^2])
    """

    def __init__(self, depth: float = 0.5, width: float = 100.0,
                 center_y: float = 0.4, offset: float = 0.7, tilt: float = 0.5):
        self.depth = depth
        self.width = width
        self.center_y = center_y
        self.offset = offset
        self.tilt = tilt
        self.c_min = 1.0 - depth
        self.c_max = 1.0

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        x = points[..., 0]
        y = points[..., 1]
        exponent = -self.width * ((y - self.center_y) ** 2 + (x + self.tilt * y - self.offset) ** 2)
        return 1.0 - self.depth * np.exp(exponent)

    def describe(self):
        return "gaussian_lens"


class GriddedSpeed(WaveSpeed):
    """节点采样的网格波速，多线性插值"""

    def __init__(self, lower: Sequence[float], upper: Sequence[float], samples: np.ndarray,
                 source: str = ''):
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != len(lower):
            raise FieldError(f"采样数组维数 {samples.ndim} 与区域维数 {len(lower)} 不一致")
        if np.any(~np.isfinite(samples)) or np.any(samples <= 0):
            raise FieldError("波速采样必须为有限正数")
        if any(n < 2 for n in samples.shape):
            raise FieldError(f"每个方向至少需要 2 个采样点: {samples.shape}")
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.samples = samples
        self.source = source
        axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(self.lower, self.upper, samples.shape)]
        self._interp = RegularGridInterpolator(axes, samples, method='linear', bounds_error=True)
        self.c_min = float(samples.min())
        self.c_max = float(samples.max())

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        flat = points.reshape(-1, points.shape[-1])
        tol = 1e-12 * (self.upper - self.lower)
        if np.any(flat < self.lower - tol) or np.any(flat > self.upper + tol):
            raise FieldError(f"点超出波速网格覆盖范围 {tuple(self.lower)}-{tuple(self.upper)}")
        flat = np.clip(flat, self.lower, self.upper)
        return self._interp(flat).reshape(points.shape[:-1])

    def describe(self):
        return f"grid({os.path.basename(self.source) or 'memory'})"


class ClampedSpeed(WaveSpeed):
    """在物理盒子外把点投影回盒子再求波速（PML 层使用）"""

    def __init__(self, inner: WaveSpeed, lower: Sequence[float], upper: Sequence[float]):
        self.inner = inner
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.c_min = inner.c_min
        self.c_max = inner.c_max

    def __call__(self, points):
        return self.inner(np.clip(np.asarray(points, dtype=float), self.lower, self.upper))

    def describe(self):
        return self.inner.describe()


def eval_speed(ws: WaveSpeed, x: Sequence[float]) -> float:
    """单点波速"""
    return float(ws(np.asarray(x, dtype=float)[None, :])[0])


def load_speed_grid(path: str) -> GriddedSpeed:
    """
    读取波速网格文件

    格式: 'd nx [ny [nz]] x_lo... x_hi...' 后接 x 最快变化的采样值，空白分隔

    Args:
        path: 文件路径

    Returns:
        GriddedSpeed
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            tokens = f.read().split()
    except OSError as e:
        raise FieldError(f"无法读取波速文件 {path}: {e}")
    try:
        dim = int(tokens[0])
        shape = tuple(int(t) for t in tokens[1:1 + dim])
        lower = [float(t) for t in tokens[1 + dim:1 + 2 * dim]]
        upper = [float(t) for t in tokens[1 + 2 * dim:1 + 3 * dim]]
        values = np.array([float(t) for t in tokens[1 + 3 * dim:]])
    except (IndexError, ValueError) as e:
        raise FieldError(f"波速文件头格式错误 {path}: {e}")
    if values.size != int(np.prod(shape)):
        raise FieldError(f"波速文件 {path} 采样数 {values.size} 与网格 {shape} 不符")
    samples = values.reshape(shape, order='F')
    return GriddedSpeed(lower, upper, samples, source=path)


def save_speed_grid(path: str, speed: GriddedSpeed):
    """按 load_speed_grid 的格式写出波速网格"""
    dim = speed.samples.ndim
    header = [str(dim)] + [str(n) for n in speed.samples.shape]
    header += [repr(float(v)) for v in speed.lower] + [repr(float(v)) for v in speed.upper]
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(' '.join(header) + '\n')
        np.savetxt(f, speed.samples.ravel(order='F'), fmt='%.17g')


# ---------------------------------------------------------------------------
# 源项
# ---------------------------------------------------------------------------

def gaussian_source(x, x0, amplitude: float = 1e4, width: float = 1e4):
    """
    高斯源 f = 1e4 exp(-1e4 |x - x0|^2)

    远离 x0 时下溢为 0
    """
    x = np.asarray(x, dtype=float)
    r2 = np.sum((x - np.asarray(x0, dtype=float)) ** 2, axis=-1)
    with np.errstate(under='ignore'):
        return amplitude * np.exp(-width * r2)


class GaussianSource:
    """可调用的高斯源项"""

    def __init__(self, center: Sequence[float], amplitude: float = 1e4, width: float = 1e4):
        self.center = np.asarray(center, dtype=float)
        self.amplitude = amplitude
        self.width = width

    def __call__(self, points):
        return gaussian_source(points, self.center, self.amplitude, self.width).astype(complex)


# ---------------------------------------------------------------------------
# 参考场
# ---------------------------------------------------------------------------

class ReferenceField:
    """解析参考场基类"""

    omega: float

    def value(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def laplacian(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def with_frequency(self, omega: float) -> 'ReferenceField':
        raise NotImplementedError

    def ray_directions(self, point: np.ndarray) -> np.ndarray:
        """point 处的射线方向 (n, d)"""
        raise NotImplementedError

    def __call__(self, points):
        return self.value(points)

    def source(self, points: np.ndarray, ws: WaveSpeed) -> np.ndarray:
        """人工源项 f = -Δu - (ω/c)^2 u"""
        points = np.asarray(points, dtype=float)
        return -self.laplacian(points) - (self.omega / ws(points)) ** 2 * self.value(points)

    def impedance(self, points: np.ndarray, normals: np.ndarray, ws: WaveSpeed) -> np.ndarray:
        """阻抗边界数据 g = ∇u·n + i(ω/c)u"""
        points = np.asarray(points, dtype=float)
        grad = self.gradient(points)
        return np.sum(grad * normals, axis=-1) + 1j * (self.omega / ws(points)) * self.value(points)

    def normal_derivative(self, points: np.ndarray, normals: np.ndarray) -> np.ndarray:
        return np.sum(self.gradient(np.asarray(points, dtype=float)) * normals, axis=-1)


class PlaneWaveSum(ReferenceField):
    """
    平面波叠加 u = Σ a_j exp(i (ω/c0) d_j·x)
    """

    def __init__(self, terms: List[Tuple[complex, Sequence[float]]], omega: float, c0: float = 1.0):
        if not terms:
            raise FieldError("平面波叠加至少需要一项")
        self.amplitudes = np.array([complex(a) for a, _ in terms])
        directions = np.array([np.asarray(d, dtype=float) for _, d in terms])
        norms = np.linalg.norm(directions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise FieldError(f"平面波方向必须为单位向量: {directions.tolist()}")
        self.directions = directions
        self.omega = float(omega)
        self.c0 = float(c0)

    @property
    def wavenumber(self) -> float:
        return self.omega / self.c0

    @property
    def dim(self) -> int:
        return self.directions.shape[1]

    def _phases(self, points):
        points = np.asarray(points, dtype=float)
        return np.exp(1j * self.wavenumber * (points @ self.directions.T))

    def value(self, points):
        return self._phases(points) @ self.amplitudes

    def gradient(self, points):
        weighted = self._phases(points) * self.amplitudes
        return 1j * self.wavenumber * (weighted @ self.directions)

    def laplacian(self, points):
        return -self.wavenumber ** 2 * self.value(points)

    def with_frequency(self, omega):
        return PlaneWaveSum(list(zip(self.amplitudes, self.directions)), omega, self.c0)

    def ray_directions(self, point):
        return self.directions.copy()

    def __repr__(self):
        return f"PlaneWaveSum(n={len(self.amplitudes)}, omega={self.omega:.6g})"


class HankelSum(ReferenceField):
    """
    点源叠加 u = Σ a_j √ω H0^(1)((ω/c0)|x - x_j|)

    3D 中使用同一个二维核，相应的源项由 source() 给出
    """

    def __init__(self, terms: List[Tuple[complex, Sequence[float]]], omega: float, c0: float = 1.0):
        if not terms:
            raise FieldError("点源叠加至少需要一项")
        self.amplitudes = np.array([complex(a) for a, _ in terms])
        self.sources = np.array([np.asarray(p, dtype=float) for _, p in terms])
        self.omega = float(omega)
        self.c0 = float(c0)

    @property
    def wavenumber(self) -> float:
        return self.omega / self.c0

    @property
    def dim(self) -> int:
        return self.sources.shape[1]

    def _radii(self, points):
        points = np.asarray(points, dtype=float)
        diff = points[..., None, :] - self.sources
        r = np.linalg.norm(diff, axis=-1)
        if np.any(r == 0):
            raise FieldError("求值点与点源重合")
        return diff, r

    def value(self, points):
        _, r = self._radii(points)
        h0 = hankel0_first_kind(self.wavenumber * r)
        return np.sqrt(self.omega) * (h0 @ self.amplitudes)

    def gradient(self, points):
        diff, r = self._radii(points)
        h1 = hankel1_first_kind(self.wavenumber * r)
        factor = -np.sqrt(self.omega) * self.wavenumber * self.amplitudes * h1 / r
        return np.sum(factor[..., None] * diff, axis=-2)

    def laplacian(self, points):
        # Δ g(κr) = κ²[g'' + (d-1) g'/z] 且 H0'' = -H0 - H0'/z，H0' = -H1
        _, r = self._radii(points)
        z = self.wavenumber * r
        h0 = hankel0_first_kind(z)
        h1 = hankel1_first_kind(z)
        radial = -h0 - (self.dim - 2) * h1 / z
        return np.sqrt(self.omega) * self.wavenumber ** 2 * (radial @ self.amplitudes)

    def with_frequency(self, omega):
        return HankelSum(list(zip(self.amplitudes, self.sources)), omega, self.c0)

    def ray_directions(self, point):
        diff = np.asarray(point, dtype=float) - self.sources
        return diff / np.linalg.norm(diff, axis=1, keepdims=True)

    def __repr__(self):
        return f"HankelSum(n={len(self.amplitudes)}, omega={self.omega:.6g})"


def eval_reference(rf: ReferenceField, x: Sequence[float]) -> complex:
    """单点参考场值"""
    return complex(rf.value(np.asarray(x, dtype=float)[None, :])[0])


def impedance_data(rf: ReferenceField, ws: WaveSpeed, x: Sequence[float], n: Sequence[float]) -> complex:
    """单点阻抗数据 g = ∇u·n + i(ω/c)u"""
    x = np.asarray(x, dtype=float)[None, :]
    return complex(rf.impedance(x, np.asarray(n, dtype=float)[None, :], ws)[0])


def make_source_term(reference: Optional[ReferenceField], ws: WaveSpeed,
                     gaussian_center: Optional[Sequence[float]] = None) -> Optional[Callable]:
    """
    组合体源项

    Args:
        reference: 参考场，非空时加入人工源项（平面波常速 2D 情形恒为 0）
        ws: 波速
        gaussian_center: 高斯源中心

    Returns:
        可调用对象 points -> complex，或 None 表示 f = 0
    """
    parts = []
    if gaussian_center is not None:
        parts.append(GaussianSource(gaussian_center))
    if reference is not None:
        if isinstance(reference, PlaneWaveSum) and isinstance(ws, ConstantSpeed) \
                and math.isclose(ws.value, reference.c0):
            pass
        elif isinstance(reference, HankelSum) and reference.dim == 2 and isinstance(ws, ConstantSpeed) \
                and math.isclose(ws.value, reference.c0):
            pass
        else:
            parts.append(lambda points: reference.source(points, ws))
    if not parts:
        return None
    if len(parts) == 1:
        return parts[0]
    return lambda points: sum(part(points) for part in parts)


def describe_reference(reference: Optional[ReferenceField]) -> str:
    if reference is None:
        return 'none'
    return repr(reference)


def log_field_summary(reference: Optional[ReferenceField], ws: WaveSpeed):
    logger = Logger().get_logger()
    logger.debug(f"参考场: {describe_reference(reference)}, 波速: {ws.describe()} "
                 f"[{ws.c_min:.4g}, {ws.c_max:.4g}]")
