"""
求积模块
张量积 Gauss-Legendre 求积（单元内部与面），以及振荡积分所需的求积点数选择
"""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np


@lru_cache(maxsize=64)
def gauss_legendre_unit(n: int):
    """
    [0,1] 上的 n 点 Gauss-Legendre 规则

    Returns:
        (points, weights)，权重之和为 1
    """
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def tensor_rule(dim: int, n: int):
    """
    [0,1]^dim 上的张量积规则，x 最快变化

    dim=0 时返回单点（用于 1D 的“面”）
    """
    if dim == 0:
        return np.zeros((1, 0)), np.ones(1)
    x, w = gauss_legendre_unit(n)
    grids = np.meshgrid(*([x] * dim), indexing='ij')
    wgrids = np.meshgrid(*([w] * dim), indexing='ij')
    points = np.stack([g.ravel(order='F') for g in grids], axis=-1)
    weights = np.prod(np.stack([g.ravel(order='F') for g in wgrids], axis=-1), axis=-1)
    return points, weights


@dataclass(frozen=True)
class QuadratureRule:
    """
    单元和面上的求积规则

    points_per_axis = q 时对每个方向上次数 <= 2q-1 的多项式精确
    """

    dim: int
    points_per_axis: int

    @property
    def order(self) -> int:
        return self.points_per_axis

    @property
    def exactness(self) -> int:
        return 2 * self.points_per_axis - 1

    def element(self):
        """参考单元上的点 (Q, d) 和权重 (Q,)，权重之和为 1"""
        return tensor_rule(self.dim, self.points_per_axis)

    def face(self, axis: int, side: int):
        """
        参考单元上垂直于 axis 的面（side=0 低侧，1 高侧）

        Returns:
            (points (Qf, d), weights (Qf,))，权重之和为 1
        """
        sub_points, weights = tensor_rule(self.dim - 1, self.points_per_axis)
        points = np.insert(sub_points, axis, float(side), axis=1)
        return points, weights


def points_per_axis(omega: float, h: float, c_min: float, override: Optional[int] = None,
                    minimum: int = 4) -> int:
    """
    振荡被积函数所需的每轴求积点数

    被积函数按 e^{i2ω·} 振荡，点数随 ωh/c_min 线性增长

    Args:
        omega: 频率
        h: 单元尺寸
        c_min: 最小波速
        override: 用户指定的点数（优先）
        minimum: 下限

    Returns:
        每轴点数
    """
    if override:
        return int(override)
    kh = omega * h / c_min
    return int(max(minimum, math.ceil(1.5 * kh / math.pi) + 3, math.ceil(1.4 * kh) + 2))
