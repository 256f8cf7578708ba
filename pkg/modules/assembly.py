"""
IPDG 组装模块
阻抗、Cauchy、PML 三种边界形式的半双线性型与右端组装，以及 DG 范数
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import RayIPDGError
from .fields import ClampedSpeed, ConstantSpeed, WaveSpeed
from .mesh import DIRICHLET, IMPEDANCE, NEUMANN, Mesh, vertex_bits
from .quadrature import QuadratureRule, points_per_axis
from .ray_basis import BasisTable, interior_subspace_mask
from .solver import ComplexSparseSystem, write_matrix_market
from .utils import Logger, chunk_ranges, parallel_map


IMPEDANCE_MODE = 'impedance'
CAUCHY_MODE = 'cauchy'
PML_MODE = 'pml'
MODES = (IMPEDANCE_MODE, CAUCHY_MODE, PML_MODE)

# 单个组装块内 (Q × nb × d) 数组元素数的上限
CHUNK_BUDGET = 4_000_000


def default_penalty(dim: int) -> float:
    return 10.0 * dim


def default_pml_delta(omega: float, h: float, c_max: float = 1.0, wavelengths: float = 2.0) -> float:
    """不小于 wavelengths 个波长的最小 h 整数倍"""
    wavelength = 2.0 * math.pi * c_max / omega
    return h * max(1, math.ceil(wavelengths * wavelength / h - 1e-9))


def default_pml_strength(omega: float) -> float:
    return 40.0 * omega


@dataclass
class AssemblyConfig:
    """组装参数"""

    omega: float
    penalty: Optional[float] = None
    mode: str = IMPEDANCE_MODE
    pml_delta: float = 0.0
    pml_strength: Optional[float] = None
    quad_points: Optional[int] = None
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise RayIPDGError(f"未知边界模式: {self.mode}，可选: {', '.join(MODES)}")
        if self.penalty is not None and not self.penalty > 0:
            raise RayIPDGError(f"罚参数必须为正: {self.penalty}")


def pml_stretch(x, omega: float, delta: float, strength: float, lower: float = 0.0, upper: float = 1.0):
    """
    PML 伸缩函数 s(x) = 1/(1 + iγ(x)/ω)

    γ(x) = A/δ² ((lower-x)² [x<lower] + (x-upper)² [x>upper])，物理区间内 s ≡ 1
    """
    x = np.asarray(x, dtype=float)
    if delta <= 0 or strength == 0:
        return np.ones(x.shape, dtype=complex)
    below = np.where(x < lower, (lower - x) ** 2, 0.0)
    above = np.where(x > upper, (x - upper) ** 2, 0.0)
    gamma = strength / delta ** 2 * (below + above)
    return 1.0 / (1.0 + 1j * gamma / omega)


def jump_average(u_plus, u_minus, grad_plus, grad_minus, n_plus, n_minus):
    """
    DG 平均与跳跃

    Returns:
        ({∇u} = ½(∇u⁺ + ∇u⁻), ⟦u⟧ = u⁺n⁺ + u⁻n⁻)
    """
    average = 0.5 * (np.asarray(grad_plus) + np.asarray(grad_minus))
    jump = u_plus * np.asarray(n_plus, dtype=float) + u_minus * np.asarray(n_minus, dtype=float)
    return average, jump


def _weighted_gram(test: np.ndarray, trial: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """
    local[m, i, j] = Σ_q w_q Σ_a test[m,q,i,a] · trial[m,q,j,a]

    test/trial 形状 (m, Q, nb) 或 (m, Q, nb, d)；weights 形状 (Q,) 或 (m, Q)
    """
    if test.ndim == 3:
        test = test[..., None]
        trial = trial[..., None]
    m, q, nb_i, d = test.shape
    nb_j = trial.shape[2]
    w = weights[None, :, None, None] if weights.ndim == 1 else weights[:, :, None, None]
    left = test.transpose(0, 2, 1, 3).reshape(m, nb_i, q * d)
    right = (trial * w).transpose(0, 1, 3, 2).reshape(m, q * d, nb_j)
    return left @ right


def _to_coo(ids_test: np.ndarray, ids_trial: np.ndarray, local: np.ndarray):
    rows = np.broadcast_to(ids_test[:, :, None], local.shape)
    cols = np.broadcast_to(ids_trial[:, None, :], local.shape)
    valid = (rows >= 0) & (cols >= 0)
    return rows[valid], cols[valid], local[valid]


def _to_vector(ids: np.ndarray, local: np.ndarray):
    valid = ids >= 0
    return ids[valid], local[valid]


def _merge_matrix(pieces, n: int) -> sp.csr_matrix:
    if not pieces:
        return sp.csr_matrix((n, n), dtype=complex)
    rows = np.concatenate([p[0] for p in pieces])
    cols = np.concatenate([p[1] for p in pieces])
    vals = np.concatenate([p[2] for p in pieces])
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def _merge_vector(pieces, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=complex)
    for ids, vals in pieces:
        np.add.at(out, ids, vals)
    return out


class Assembler:
    """
    在给定空间上组装各项

    组装按固定大小的单元块进行，块的结果按块顺序合并，
    与 worker 数无关
    """

    def __init__(self, table: BasisTable, ws: WaveSpeed, cfg: AssemblyConfig,
                 quadrature: Optional[QuadratureRule] = None):
        self.logger = Logger().get_logger()
        self.table = table
        self.mesh: Mesh = table.mesh
        self.cfg = cfg
        self.omega = cfg.omega
        mesh = self.mesh
        self.ws = ClampedSpeed(ws, mesh.physical_lower, mesh.physical_upper) if mesh.is_extended() else ws
        self.penalty = cfg.penalty if cfg.penalty is not None else default_penalty(mesh.dim)

        k_basis = float(table.pair_k.max()) if table.pair_k.size else 0.0
        k_data = cfg.omega / ws.c_min
        k_eff = max(k_basis, k_data)
        auto = points_per_axis(k_eff, mesh.H, 1.0)
        if cfg.quad_points and cfg.quad_points < auto:
            self.logger.warning(f"⚠️ 求积点数 {cfg.quad_points} 低于振荡积分建议值 {auto}（ωH 偏大）")
        self.quadrature = quadrature or QuadratureRule(mesh.dim, points_per_axis(k_eff, mesh.H, 1.0, cfg.quad_points))

        if k_basis == 0 and cfg.omega * mesh.H / ws.c_min > 1.0:
            self.logger.warning(
                f"⚠️ 多项式空间分辨率不足: ωh/c_min = {cfg.omega * mesh.H / ws.c_min:.3f} > 1"
            )

        self.elem_ref, self.elem_w = self.quadrature.element()
        per_element = len(self.elem_w) * table.local_size * (mesh.dim + 1)
        self.chunk_size = max(1, CHUNK_BUDGET // max(1, per_element))
        self.workers = max(1, int(cfg.workers))

        if cfg.mode == PML_MODE:
            delta = cfg.pml_delta if cfg.pml_delta > 0 else float(np.max(mesh.physical_lower - mesh.lower))
            strength = cfg.pml_strength if cfg.pml_strength is not None else default_pml_strength(cfg.omega)
            self.pml = (delta, strength)
        else:
            self.pml = None
        self.logger.debug(
            f"组装: n_dof={table.n_dof}, 每轴求积点 {self.quadrature.points_per_axis}, "
            f"罚参数 {self.penalty:g}, 块大小 {self.chunk_size}"
        )

    # ------------------------------------------------------------------
    def stretch(self, points: np.ndarray) -> np.ndarray:
        """各轴伸缩因子 (..., d)"""
        if self.pml is None:
            return np.ones(points.shape, dtype=complex)
        delta, strength = self.pml
        mesh = self.mesh
        return np.stack([
            pml_stretch(points[..., a], self.omega, delta, strength, mesh.physical_lower[a], mesh.physical_upper[a])
            for a in range(mesh.dim)
        ], axis=-1)

    def _chunks(self, elements: np.ndarray):
        return [elements[r.start:r.stop] for r in chunk_ranges(len(elements), self.chunk_size)]

    def _map(self, func, chunks):
        return parallel_map(func, chunks, self.workers)

    # ------------------------------------------------------------------
    def volume(self, source: Optional[Callable] = None, stretched: bool = True):
        """
        体积分：刚度 Σ_a s_a² ∂_aψ_j ∂_aψ̄_i，质量 c⁻² ψ_j ψ̄_i，右端 (f, ψ_i)

        Returns:
            (stiffness, mass, rhs)
        """
        table = self.table
        n = table.n_dof
        weights = self.elem_w * self.mesh.element_volume

        def work(elements):
            values, grads, points = table.evaluate(elements, self.elem_ref)
            ids = table.dof_ids[elements]
            if stretched:
                s = self.stretch(points)[:, :, None, :]
                trial = grads * s
                test = np.conj(grads) * s
            else:
                trial = grads
                test = np.conj(grads)
            stiff = _weighted_gram(test, trial, weights)
            c = self.ws(points)
            mass = _weighted_gram(np.conj(values), values, weights[None, :] / c ** 2)
            out = [_to_coo(ids, ids, stiff), _to_coo(ids, ids, mass)]
            if source is not None:
                f = source(points)
                rhs = np.einsum('q,mq,mqi->mi', weights, f, np.conj(values))
                out.append(_to_vector(ids, rhs))
            return out

        results = self._map(work, self._chunks(np.arange(self.mesh.n_elements)))
        stiffness = _merge_matrix([r[0] for r in results], n)
        mass = _merge_matrix([r[1] for r in results], n)
        rhs = _merge_vector([r[2] for r in results], n) if source is not None else np.zeros(n, dtype=complex)
        return stiffness, mass, rhs

    def interior_faces(self, stretched: bool = True, penalty_only: bool = False) -> sp.csr_matrix:
        """
        内部面项 -{∇̃u}·⟦v̄⟧ - ⟦u⟧·{∇̃v̄} + (a_p/H)⟦u⟧·⟦v̄⟧
        """
        table = self.table
        mesh = self.mesh
        pieces = []
        for group in mesh.interior_faces:
            if len(group) == 0:
                continue
            axis = group.axis
            ref_plus, w = self.quadrature.face(axis, 1)
            ref_minus, _ = self.quadrature.face(axis, 0)
            weights = w * mesh.face_measure(axis)
            coef = self.penalty / mesh.h[axis]

            def work(index, group=group, axis=axis, ref_plus=ref_plus, ref_minus=ref_minus,
                     weights=weights, coef=coef):
                plus = group.plus[index]
                minus = group.minus[index]
                v_p, g_p, points = table.evaluate(plus, ref_plus)
                v_m, g_m, _ = table.evaluate(minus, ref_minus)
                jump = np.concatenate([v_p, -v_m], axis=2)
                normal_grad = np.concatenate([g_p[..., axis], g_m[..., axis]], axis=2)
                ids = np.concatenate([table.dof_ids[plus], table.dof_ids[minus]], axis=1)
                if penalty_only:
                    local = _weighted_gram(np.conj(jump), coef * jump, weights)
                    return _to_coo(ids, ids, local)
                s = self.stretch(points)[..., axis][..., None] if stretched else 1.0
                avg_trial = 0.5 * s * normal_grad
                avg_test = 0.5 * s * np.conj(normal_grad)
                local = (_weighted_gram(np.conj(jump), coef * jump - avg_trial, weights)
                         - _weighted_gram(avg_test, jump, weights))
                return _to_coo(ids, ids, local)

            indices = np.arange(len(group))
            pieces.extend(self._map(work, self._chunks(indices)))
        return _merge_matrix(pieces, table.n_dof)

    def boundary(self, kind: str, tags=None, data: Optional[Callable] = None, scale: float = 1.0):
        """
        边界面项

        Args:
            kind: 'impedance'  iωc⁻¹ ψ_j ψ̄_i，右端 (g, ψ_i)
                  'mass'       scale·ψ_j ψ̄_i（Dirichlet 矩方程 / DG 范数）
                  'neumann'    (∇ψ_j·n) ψ̄_i
            tags: 参与的边界标签集合，None 表示全部
            data: 右端数据 (points, normals) -> complex
            scale: 'mass' 的系数

        Returns:
            (matrix, rhs)
        """
        table = self.table
        mesh = self.mesh
        pieces_m, pieces_v = [], []
        for group in mesh.boundary_faces:
            if len(group) == 0:
                continue
            if tags is not None and group.tags[0] not in tags:
                continue
            ref, w = self.quadrature.face(group.axis, group.side)
            weights = w * mesh.face_measure(group.axis)
            normal = group.normal

            def work(index, ref=ref, weights=weights, normal=normal, group=group):
                elements = group.elements[index]
                values, grads, points = table.evaluate(elements, ref)
                ids = table.dof_ids[elements]
                test = np.conj(values)
                if kind == 'impedance':
                    trial = 1j * self.omega / self.ws(points)[..., None] * values
                elif kind == 'mass':
                    trial = scale * values
                elif kind == 'neumann':
                    trial = grads @ normal
                else:
                    raise RayIPDGError(f"未知边界项: {kind}")
                out = [_to_coo(ids, ids, _weighted_gram(test, trial, weights))]
                if data is not None:
                    normals = np.broadcast_to(normal, points.shape)
                    rhs = np.einsum('q,mq,mqi->mi', weights, data(points, normals), test)
                    out.append(_to_vector(ids, rhs))
                return out

            results = self._map(work, self._chunks(np.arange(len(group))))
            pieces_m.extend(r[0] for r in results)
            if data is not None:
                pieces_v.extend(r[1] for r in results)
        return _merge_matrix(pieces_m, table.n_dof), _merge_vector(pieces_v, table.n_dof)

    def dirichlet_row_flags(self) -> np.ndarray:
        """每个自由度的顶点是否落在本单元的某个 Γ_D 面上"""
        mesh = self.mesh
        table = self.table
        bits = vertex_bits(mesh.dim)
        flags = np.zeros((mesh.n_elements, table.n_vertices), dtype=bool)
        for group in mesh.boundary_faces:
            if len(group) and group.tags[0] == DIRICHLET:
                on_face = bits[:, group.axis] == group.side
                flags[group.elements] |= on_face[None, :]
        elem_of_dof, local_of_dof = np.nonzero(table.local_mask)
        return flags[elem_of_dof, table.local_vertex[local_of_dof]]

    def norm_matrix(self) -> sp.csr_matrix:
        """DG 范数的 Gram 矩阵 G：‖v‖²_DG = cᴴ G c"""
        grad, _, _ = self.volume(stretched=False)
        jumps = self.interior_faces(stretched=False, penalty_only=True)
        trace, _ = self.boundary('mass', scale=self.omega)
        l2 = self.l2_gram()
        return (grad + jumps + trace + self.omega ** 2 * l2).tocsr()

    def l2_gram(self) -> sp.csr_matrix:
        """不带波速权的 L² Gram 矩阵"""
        table = self.table
        weights = self.elem_w * self.mesh.element_volume

        def work(elements):
            values, _, _ = table.evaluate(elements, self.elem_ref)
            ids = table.dof_ids[elements]
            return _to_coo(ids, ids, _weighted_gram(np.conj(values), values, weights))

        return _merge_matrix(self._map(work, self._chunks(np.arange(self.mesh.n_elements))), table.n_dof)


def _log_system(system: ComplexSparseSystem, label: str):
    Logger().get_logger().debug(f"{label}: n={system.n}, nnz={system.nnz}")


def assemble_impedance(mesh: Mesh, table: BasisTable, ws: WaveSpeed, cfg: AssemblyConfig,
                       f: Optional[Callable], g: Optional[Callable]) -> ComplexSparseSystem:
    """
    阻抗边界 IPDG 系统 a_H(u, v) - ω²(c⁻²u, v) = (f, v) + (g, v)_∂Ω

    Args:
        mesh: 网格（须与 table 一致）
        table: 基函数空间
        ws: 波速
        cfg: 组装参数
        f: 体源 points -> complex，None 表示 0
        g: 阻抗数据 (points, normals) -> complex，None 表示 0

    Returns:
        ComplexSparseSystem，parts 含 stiffness / mass / boundary
    """
    _check_table(mesh, table)
    asm = Assembler(table, ws, cfg)
    stiffness, mass, rhs = asm.volume(f)
    stiffness = stiffness + asm.interior_faces()
    boundary, rhs_g = asm.boundary('impedance', tags={IMPEDANCE}, data=g)
    matrix = stiffness + boundary - cfg.omega ** 2 * mass
    system = ComplexSparseSystem(matrix, rhs + rhs_g,
                                 parts={'stiffness': stiffness.tocsr(), 'mass': mass, 'boundary': boundary})
    _log_system(system, "阻抗系统")
    return system


def assemble_cauchy(mesh: Mesh, table: BasisTable, ws: WaveSpeed, cfg: AssemblyConfig,
                    f: Optional[Callable], g1: Optional[Callable], g2: Optional[Callable]) -> ComplexSparseSystem:
    """
    Cauchy 边界系统

    V_H° 的自由度取 a_H^C 行；边界自由度在其顶点位于 Γ_D 面上时取 Dirichlet 矩方程行，
    否则取 Neumann 矩方程行

    Args:
        g1: Dirichlet 数据 (points, normals) -> complex
        g2: Neumann 数据 (points, normals) -> complex
    """
    _check_table(mesh, table)
    tags = {group.tags[0] for group in mesh.boundary_faces if len(group)}
    if not tags <= {DIRICHLET, NEUMANN}:
        raise RayIPDGError(f"Cauchy 模式要求边界标签只有 dirichlet/neumann，得到 {sorted(tags)}")
    asm = Assembler(table, ws, cfg)
    stiffness, mass, rhs_f = asm.volume(f)
    stiffness = stiffness + asm.interior_faces()
    interior_rows = stiffness - cfg.omega ** 2 * mass
    dirichlet, rhs_d = asm.boundary('mass', tags={DIRICHLET}, data=g1)
    neumann, rhs_n = asm.boundary('neumann', tags={NEUMANN}, data=g2)

    interior = interior_subspace_mask(table)
    dirichlet_rows = ~interior & asm.dirichlet_row_flags()
    neumann_rows = ~interior & ~dirichlet_rows
    pick = lambda mask: sp.diags(mask.astype(float))
    matrix = pick(interior) @ interior_rows + pick(dirichlet_rows) @ dirichlet + pick(neumann_rows) @ neumann
    rhs = np.where(interior, rhs_f, 0) + np.where(dirichlet_rows, rhs_d, 0) + np.where(neumann_rows, rhs_n, 0)
    system = ComplexSparseSystem(matrix, rhs, parts={'stiffness': stiffness.tocsr(), 'mass': mass,
                                                      'dirichlet': dirichlet, 'neumann': neumann})
    Logger().get_logger().debug(
        f"Cauchy 系统: 内部行 {int(interior.sum())}, Dirichlet 行 {int(dirichlet_rows.sum())}, "
        f"Neumann 行 {int(neumann_rows.sum())}"
    )
    return system


def assemble_pml(mesh: Mesh, table: BasisTable, ws: WaveSpeed, cfg: AssemblyConfig,
                 f: Optional[Callable]) -> ComplexSparseSystem:
    """
    PML 系统：扩展网格上 ã_H(u, v) - ω²(c⁻²u, v) = (f, v)，u, v ∈ Ṽ_H°

    扩展区的波速取投影回物理区域的值
    """
    _check_table(mesh, table)
    if cfg.mode != PML_MODE:
        cfg = AssemblyConfig(**{**cfg.__dict__, 'mode': PML_MODE})
    asm = Assembler(table, ws, cfg)
    stiffness, mass, rhs = asm.volume(f)
    stiffness = stiffness + asm.interior_faces()
    full = (stiffness - cfg.omega ** 2 * mass).tocsr()
    active = np.nonzero(interior_subspace_mask(table))[0]
    matrix = full[active][:, active]
    system = ComplexSparseSystem(matrix, rhs[active], active=active, n_full=table.n_dof,
                                 parts={'stiffness': stiffness.tocsr(), 'mass': mass})
    _log_system(system, "PML 系统")
    return system


def assemble(mesh: Mesh, table: BasisTable, ws: WaveSpeed, cfg: AssemblyConfig,
             f: Optional[Callable] = None, g: Optional[Callable] = None,
             g1: Optional[Callable] = None, g2: Optional[Callable] = None) -> ComplexSparseSystem:
    """按 cfg.mode 分派"""
    if cfg.mode == IMPEDANCE_MODE:
        return assemble_impedance(mesh, table, ws, cfg, f, g)
    if cfg.mode == CAUCHY_MODE:
        return assemble_cauchy(mesh, table, ws, cfg, f, g1, g2)
    return assemble_pml(mesh, table, ws, cfg, f)


def _check_table(mesh: Mesh, table: BasisTable):
    if table.mesh is not mesh and table.mesh.n_elements != mesh.n_elements:
        raise RayIPDGError("基函数空间与网格不一致")


def dg_norm_matrix(table: BasisTable, omega: float, penalty: Optional[float] = None,
                   quadrature: Optional[QuadratureRule] = None) -> sp.csr_matrix:
    """
    DG 范数 Gram 矩阵

    ‖v‖²_DG = Σ‖∇v‖² + (a_p/H)‖⟦v⟧‖²_{F^I} + ω‖v‖²_{∂Ω} + ω²‖v‖²
    """
    cfg = AssemblyConfig(omega=omega, penalty=penalty)
    asm = Assembler(table, ConstantSpeed(1.0), cfg, quadrature)
    return asm.norm_matrix()


def dg_norm_terms(table: BasisTable, coefficients: np.ndarray, omega: float,
                  penalty: Optional[float] = None, reference=None,
                  quadrature: Optional[QuadratureRule] = None) -> Dict[str, float]:
    """
    DG 范数的四项（reference 非空时为 u_H - u_ref 的范数）

    reference 需提供 value(points) 与 gradient(points)，视为连续函数（跳跃为 0）

    Returns:
        {'gradient', 'jump', 'boundary', 'l2'}
    """
    from .ray_basis import DGSolution
    mesh = table.mesh
    asm = Assembler(table, ConstantSpeed(1.0), AssemblyConfig(omega=max(omega, 1e-30), penalty=penalty), quadrature)
    quad = asm.quadrature
    solution = DGSolution(table, coefficients)
    elements = np.arange(mesh.n_elements)
    ref, w = quad.element()
    weights = w * mesh.element_volume

    grad_sq = 0.0
    l2_sq = 0.0
    for chunk in asm._chunks(elements):
        values, grads, points = solution.on_elements(chunk, ref)
        if reference is not None:
            values = values - reference.value(points)
            grads = grads - reference.gradient(points)
        grad_sq += float(np.einsum('q,mqd->', weights, np.abs(grads) ** 2))
        l2_sq += float(np.einsum('q,mq->', weights, np.abs(values) ** 2))

    jump_sq = 0.0
    for group in mesh.interior_faces:
        if len(group) == 0:
            continue
        ref_p, wf = quad.face(group.axis, 1)
        ref_m, _ = quad.face(group.axis, 0)
        fw = wf * mesh.face_measure(group.axis)
        for index in asm._chunks(np.arange(len(group))):
            v_p, _, _ = solution.on_elements(group.plus[index], ref_p)
            v_m, _, _ = solution.on_elements(group.minus[index], ref_m)
            jump_sq += asm.penalty / mesh.h[group.axis] * float(np.einsum('q,mq->', fw, np.abs(v_p - v_m) ** 2))

    boundary_sq = 0.0
    for group in mesh.boundary_faces:
        if len(group) == 0:
            continue
        ref_b, wf = quad.face(group.axis, group.side)
        fw = wf * mesh.face_measure(group.axis)
        for index in asm._chunks(np.arange(len(group))):
            values, _, points = solution.on_elements(group.elements[index], ref_b)
            if reference is not None:
                values = values - reference.value(points)
            boundary_sq += float(np.einsum('q,mq->', fw, np.abs(values) ** 2))

    return {
        'gradient': grad_sq,
        'jump': jump_sq,
        'boundary': omega * boundary_sq,
        'l2': omega ** 2 * l2_sq,
    }


def dg_norm(table: BasisTable, coefficients: np.ndarray, omega: float, penalty: Optional[float] = None,
            reference=None, quadrature: Optional[QuadratureRule] = None) -> float:
    """DG 范数（四项之和的平方根）"""
    terms = dg_norm_terms(table, coefficients, omega, penalty, reference, quadrature)
    return math.sqrt(sum(terms.values()))


def export_system(system: ComplexSparseSystem, path: str):
    """导出矩阵（Matrix Market 复数一般型），右端写到同名 .rhs.mtx"""
    write_matrix_market(path, system.matrix, comment='ray-ipdg system matrix')
    rhs_path = path[:-4] + '.rhs.mtx' if path.endswith('.mtx') else path + '.rhs.mtx'
    write_matrix_market(rhs_path, sp.csr_matrix(system.rhs.reshape(-1, 1)), comment='ray-ipdg right-hand side')
    Logger().get_logger().info(f"✅ 系统已导出: {path}")
