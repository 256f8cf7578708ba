"""
稀疏求解模块
复数稀疏直接求解（SuperLU）、条件数估计、小矩阵 SVD、Matrix Market 读写
"""

import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, onenormest, splu

from .errors import IllConditionedWarning, SingularSystemError
from .utils import Logger


PIVOT_TOLERANCE = 1e-14
CONDITION_LIMIT = 1e12


@dataclass
class ComplexSparseSystem:
    """
    组装好的线性系统 A x = b

    active 非空时系统只作用在这些自由度上（PML 的 Ṽ°），
    expand() 把解扩回完整空间
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    active: Optional[np.ndarray] = None
    n_full: Optional[int] = None
    parts: Dict[str, sp.csr_matrix] = field(default_factory=dict)

    def __post_init__(self):
        self.finalize()

    def finalize(self):
        matrix = sp.csr_matrix(self.matrix, dtype=complex)
        matrix.sum_duplicates()
        matrix.sort_indices()
        self.matrix = matrix
        self.rhs = np.asarray(self.rhs, dtype=complex)
        if matrix.shape[0] != matrix.shape[1] or matrix.shape[0] < 1:
            raise SingularSystemError(f"系统矩阵必须是非空方阵，得到 {matrix.shape}")
        if self.rhs.shape != (matrix.shape[0],):
            raise SingularSystemError(f"右端长度 {self.rhs.shape} 与矩阵 {matrix.shape} 不符")
        if self.n_full is None:
            self.n_full = matrix.shape[0]

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def expand(self, x: np.ndarray) -> np.ndarray:
        if self.active is None:
            return x
        full = np.zeros(self.n_full, dtype=complex)
        full[self.active] = x
        return full


@dataclass
class SolveInfo:
    """求解诊断信息"""

    residual: float
    condition: Optional[float] = None
    ill_conditioned: bool = False


def _check_structure(matrix: sp.csr_matrix):
    magnitude = abs(matrix)
    row_sum = np.asarray(magnitude.sum(axis=1)).ravel()
    col_sum = np.asarray(magnitude.sum(axis=0)).ravel()
    if np.any(row_sum == 0) or np.any(col_sum == 0):
        which = f"行 {int(np.argmin(row_sum))}" if np.any(row_sum == 0) else f"列 {int(np.argmin(col_sum))}"
        raise SingularSystemError(f"矩阵结构奇异: {which} 全为零")


def factorize(matrix: sp.spmatrix):
    """
    SuperLU 分解（部分选主元）

    Raises:
        SingularSystemError: 结构奇异，或主元小于 1e-14·max|A|
    """
    matrix = sp.csc_matrix(matrix, dtype=complex)
    _check_structure(sp.csr_matrix(matrix))
    try:
        lu = splu(matrix, permc_spec='COLAMD')
    except RuntimeError as e:
        raise SingularSystemError(f"矩阵数值奇异: {e}")
    scale = np.abs(matrix.data).max()
    pivots = np.abs(lu.U.diagonal())
    if pivots.min() < PIVOT_TOLERANCE * scale:
        raise SingularSystemError(
            f"矩阵数值奇异: 最小主元 {pivots.min():.3e} < {PIVOT_TOLERANCE:g}·max|A| ({scale:.3e})"
        )
    return lu


def relative_residual(matrix: sp.spmatrix, x: np.ndarray, rhs: np.ndarray) -> float:
    norm_b = np.linalg.norm(rhs)
    r = np.linalg.norm(matrix @ x - rhs)
    return float(r / norm_b) if norm_b > 0 else float(r)


def estimate_condition(matrix: sp.spmatrix, lu=None) -> float:
    """
    1-范数条件数估计 ‖A‖₁‖A⁻¹‖₁

    ‖A⁻¹‖₁ 通过 LU 回代算子用 onenormest 估计
    """
    matrix = sp.csc_matrix(matrix, dtype=complex)
    if lu is None:
        lu = factorize(matrix)
    n = matrix.shape[0]
    inverse = LinearOperator(
        (n, n), dtype=complex,
        matvec=lambda v: lu.solve(np.asarray(v, dtype=complex).ravel()),
        rmatvec=lambda v: lu.solve(np.asarray(v, dtype=complex).ravel(), trans='H'),
    )
    if n <= 4:
        norm_inv = np.abs(lu.solve(np.eye(n, dtype=complex))).sum(axis=0).max()
        norm_a = np.abs(matrix.toarray()).sum(axis=0).max()
        return float(norm_a * norm_inv)
    # t=1 不抽随机列，估计值可复现
    return float(onenormest(matrix, t=1) * onenormest(inverse, t=1))


def solve(system: ComplexSparseSystem, check_condition: bool = False) -> np.ndarray:
    """
    直接求解 A x = b

    Args:
        system: 线性系统
        check_condition: 是否估计条件数（> 1e12 时告警）

    Returns:
        完整空间上的解向量（受限系统会被扩回）
    """
    x, _ = solve_with_info(system, check_condition)
    return x


def solve_with_info(system: ComplexSparseSystem, check_condition: bool = False) -> Tuple[np.ndarray, SolveInfo]:
    logger = Logger().get_logger()
    lu = factorize(system.matrix)
    x = lu.solve(system.rhs)
    residual = relative_residual(system.matrix, x, system.rhs)
    info = SolveInfo(residual=residual)
    logger.debug(f"稀疏直接求解: n={system.n}, nnz={system.nnz}, 相对残差 {residual:.3e}")
    if residual > 1e-8:
        logger.warning(f"⚠️ 求解相对残差偏大: {residual:.3e}")
    if check_condition:
        info.condition = estimate_condition(system.matrix, lu)
        if info.condition > CONDITION_LIMIT:
            info.ill_conditioned = True
            message = f"系统病态: 估计条件数 {info.condition:.3e} > {CONDITION_LIMIT:g}（可能有重复方向）"
            logger.warning(f"⚠️ {message}")
            warnings.warn(message, IllConditionedWarning)
    return system.expand(x), info


def dense_svd(matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    小矩阵奇异值分解

    Returns:
        (降序奇异值, 右奇异向量按行排列)
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    _, s, vt = np.linalg.svd(matrix, full_matrices=False)
    return s, vt


def singular_energies(singular_values: np.ndarray) -> np.ndarray:
    """能量占比 σ_i² / Σσ_j²"""
    s2 = np.asarray(singular_values, dtype=float) ** 2
    total = s2.sum()
    if total == 0:
        return np.zeros_like(s2)
    return s2 / total


def write_matrix_market(path: str, matrix: sp.spmatrix, comment: str = ''):
    """写复数一般型 Matrix Market 坐标文件"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    scipy.io.mmwrite(path, sp.coo_matrix(matrix, dtype=complex), comment=comment,
                     field='complex', symmetry='general')


def read_matrix_market(path: str) -> sp.csr_matrix:
    return sp.csr_matrix(scipy.io.mmread(path), dtype=complex)
