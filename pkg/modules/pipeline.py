"""
流水线模块
低频标准 IPDG → 射线方向学习 → 高频射线 IPDG，以及误差指标与结果输出
"""

import json
import os
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .assembly import AssemblyConfig, assemble, default_pml_delta, dg_norm
from .config import PipelineConfig
from .errors import ConfigError, FieldError, PipelineStageError, RayIPDGError
from .fields import (ConstantSpeed, GaussianLensSpeed, HankelSum, PlaneWaveSum, ReferenceField, WaveSpeed,
                     load_speed_grid, log_field_summary, make_source_term)
from .mesh import Mesh, MeshSpec, NodalRule, build_mesh, extend_for_pml, refine, tag_boundary
from .neural_net import Network, load_weights, save_weights
from .quadrature import QuadratureRule, points_per_axis
from .ray_basis import DGSolution, DirectionSet, build_space, polynomial_space, save_directions
from .ray_learning import (DirectionExtractor, ExtractionResult, TrainingConfig, TrainingHistory, direction_error,
                           exact_directions, generate_samples, perturb_directions, train)
from .solver import SolveInfo, solve_with_info
from .utils import Logger, format_datetime, memory_usage_mb, stage_timer


FIELD_MAGIC = b"HRFD1"
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def resolve_path(path: str) -> str:
    """相对路径先按当前目录，再按项目根目录查找"""
    if not path or os.path.isabs(path) or os.path.exists(path):
        return path
    candidate = os.path.join(PROJECT_ROOT, path)
    return candidate if os.path.exists(candidate) else path


@dataclass
class Problem:
    """由配置构建出的具体问题"""

    cfg: PipelineConfig
    dim: int
    omega: float
    omega_tilde: float
    ws: WaveSpeed
    reference: Optional[ReferenceField]
    mesh: Mesh
    mode: str
    pml_delta: float
    window_lower: np.ndarray
    window_upper: np.ndarray
    gaussian_center: Optional[np.ndarray] = None

    def reference_at(self, omega: float) -> Optional[ReferenceField]:
        return None if self.reference is None else self.reference.with_frequency(omega)

    def source(self, omega: float) -> Optional[Callable]:
        kind = self.cfg.problem.source_term
        if kind == 'none':
            return None
        if kind == 'gaussian':
            return make_source_term(None, self.ws, self.gaussian_center)
        return make_source_term(self.reference_at(omega), self.ws)

    def boundary_data(self, omega: float) -> Dict[str, Optional[Callable]]:
        """阻抗 g、Dirichlet g1、Neumann g2（无参考场时为齐次）"""
        ref = self.reference_at(omega)
        if ref is None:
            return {'g': None, 'g1': None, 'g2': None}
        ws = self.ws
        return {
            'g': lambda points, normals: ref.impedance(points, normals, ws),
            'g1': lambda points, normals: ref.value(points),
            'g2': lambda points, normals: ref.normal_derivative(points, normals),
        }

    def assembly_config(self, omega: float, workers: int = 1, quad_points: Optional[int] = None) -> AssemblyConfig:
        return AssemblyConfig(omega=omega, penalty=self.cfg.mesh.penalty, mode=self.mode,
                              pml_delta=self.pml_delta, pml_strength=self.cfg.pml.strength,
                              quad_points=quad_points, workers=workers)


def build_speed(cfg: PipelineConfig) -> WaveSpeed:
    p = cfg.problem
    if p.speed == 'constant':
        return ConstantSpeed(p.speed_value)
    if p.speed == 'lens':
        return GaussianLensSpeed()
    return load_speed_grid(resolve_path(p.speed_file))


def build_reference(cfg: PipelineConfig) -> Optional[ReferenceField]:
    p = cfg.problem
    amplitudes = p.amplitudes or [1 + 0j] * max(len(p.directions), len(p.sources))
    if p.reference == 'plane':
        directions = [np.asarray(d, dtype=float) / np.linalg.norm(d) for d in p.directions]
        return PlaneWaveSum(list(zip(amplitudes, directions)), p.omega, p.speed_value)
    if p.reference == 'hankel':
        return HankelSum(list(zip(amplitudes, p.sources)), p.omega, p.speed_value)
    return None


def build_problem(cfg: PipelineConfig) -> Problem:
    """
    根据配置构建网格、波速、参考场与边界模式

    Args:
        cfg: 运行配置

    Returns:
        Problem
    """
    p = cfg.problem
    ws = build_speed(cfg)
    reference = build_reference(cfg)
    log_field_summary(reference, ws)

    spec = MeshSpec(p.dim, tuple(cfg.mesh.lower), tuple(cfg.mesh.upper), tuple(cfg.mesh.cells))
    mesh = build_mesh(spec, NodalRule(cfg.mesh.nodal_points))
    pml_delta = 0.0
    if p.boundary == 'cauchy':
        mesh = tag_boundary(mesh, p.dirichlet_sides)
    elif p.boundary == 'pml':
        pml_delta = cfg.pml.delta if cfg.pml.delta else default_pml_delta(p.omega, float(np.min(mesh.h)), ws.c_max)
        mesh = extend_for_pml(mesh, pml_delta)

    window_lower = np.array(p.window_lower or cfg.mesh.lower, dtype=float)
    window_upper = np.array(p.window_upper or cfg.mesh.upper, dtype=float)
    center = np.array(p.source_point, dtype=float) if p.source_term == 'gaussian' else None
    return Problem(cfg, p.dim, p.omega, cfg.omega_tilde, ws, reference, mesh, p.boundary, pml_delta,
                   window_lower, window_upper, center)


# ---------------------------------------------------------------------------
# 求解
# ---------------------------------------------------------------------------

@dataclass
class SolveResult:
    mesh: Mesh
    solution: DGSolution
    info: SolveInfo
    n_dof: int
    n_system: int


def _solve(problem: Problem, mesh: Mesh, table, omega: float, workers: int, quad_points: Optional[int],
           check_condition: bool) -> SolveResult:
    data = problem.boundary_data(omega)
    system = assemble(mesh, table, problem.ws, problem.assembly_config(omega, workers, quad_points),
                      f=problem.source(omega), **data)
    coefficients, info = solve_with_info(system, check_condition)
    return SolveResult(mesh, DGSolution(table, coefficients), info, table.n_dof, system.n)


def standard_ipdg_solve(problem: Problem, omega: float, refinement: Optional[int] = None,
                        workers: int = 1) -> SolveResult:
    """
    细网格 h = H/refinement 上的零相位（纯双/三线性）IPDG 求解

    Args:
        problem: 问题
        omega: 频率（通常为 ω̃）
        refinement: 每个粗单元每轴细分数，默认 mesh.fine_cells
        workers: 线程数
    """
    logger = Logger().get_logger()
    refinement = refinement or problem.cfg.mesh.fine_cells
    fine = refine(problem.mesh, refinement)
    result = _solve(problem, fine, polynomial_space(fine), omega, workers, None, False)
    logger.info(f"✅ 标准 IPDG 求解完成: ω={omega:.6g}, h={fine.H:.4g}, 自由度 {result.n_dof}")
    return result


def ray_ipdg_solve(problem: Problem, directions: DirectionSet, workers: int = 1,
                   check_condition: bool = True) -> SolveResult:
    """
    粗网格上的射线 IPDG 求解

    Args:
        problem: 问题
        directions: 覆盖全部粗单元的方向集
        workers: 线程数
        check_condition: 是否估计条件数
    """
    table = build_space(problem.mesh, directions, problem.omega)
    result = _solve(problem, problem.mesh, table, problem.omega, workers, problem.cfg.mesh.quad_points,
                    check_condition)
    Logger().get_logger().info(f"✅ 射线 IPDG 求解完成: ω={problem.omega:.6g}, H={problem.mesh.H:.4g}, "
                               f"自由度 {result.n_dof}")
    return result


# ---------------------------------------------------------------------------
# 误差
# ---------------------------------------------------------------------------

def _window_elements(mesh: Mesh, lower: Optional[np.ndarray], upper: Optional[np.ndarray]) -> np.ndarray:
    lower = mesh.physical_lower if lower is None else np.asarray(lower, dtype=float)
    upper = mesh.physical_upper if upper is None else np.asarray(upper, dtype=float)
    tol = 1e-9 * mesh.h
    inside = np.all((mesh.element_center > lower - tol) & (mesh.element_center < upper + tol), axis=1)
    return np.nonzero(inside)[0]


def l2_relative_error(numeric, reference: Callable, mesh: Mesh, quadrature: Optional[QuadratureRule] = None,
                      window: Optional[Tuple[np.ndarray, np.ndarray]] = None, omega: float = 0.0) -> float:
    """
    ‖u_H - u_ref‖_{L²} / ‖u_ref‖_{L²}，按单元求积

    Args:
        numeric: DGSolution 或可调用对象 points -> values
        reference: 可调用对象 points -> values
        mesh: 积分网格
        quadrature: 求积规则，默认按 ωH 选取
        window: 只统计单元中心落在 [lower, upper] 内的单元，默认物理区域
        omega: 选取求积阶数用的频率

    Raises:
        RayIPDGError: 参考解范数为零
    """
    if quadrature is None:
        quadrature = QuadratureRule(mesh.dim, points_per_axis(omega, mesh.H, 1.0))
    ref, w = quadrature.element()
    weights = w * mesh.element_volume
    lower, upper = window if window is not None else (None, None)
    elements = _window_elements(mesh, lower, upper)
    if len(elements) == 0:
        raise RayIPDGError("误差窗口内没有单元")

    diff_sq = 0.0
    ref_sq = 0.0
    for start in range(0, len(elements), 2048):
        chunk = elements[start:start + 2048]
        points = mesh.element_lower[chunk][:, None, :] + ref[None, :, :] * mesh.h
        if isinstance(numeric, DGSolution):
            values, _, _ = numeric.on_elements(chunk, ref)
        else:
            values = numeric(points)
        exact = reference(points)
        diff_sq += float(np.einsum('q,mq->', weights, np.abs(values - exact) ** 2))
        ref_sq += float(np.einsum('q,mq->', weights, np.abs(exact) ** 2))
    if ref_sq == 0:
        raise RayIPDGError("参考解的 L2 范数为零，无法计算相对误差")
    return float(np.sqrt(diff_sq / ref_sq))


# ---------------------------------------------------------------------------
# 网络
# ---------------------------------------------------------------------------

def training_config(cfg: PipelineConfig) -> TrainingConfig:
    return TrainingConfig(epochs=cfg.nn.epochs, batch_size=cfg.nn.batch_size, learning_rate=cfg.nn.learning_rate,
                          patience=cfg.nn.patience, loss=cfg.nn.loss, seed=cfg.problem.seed)


def train_network(cfg: PipelineConfig) -> Tuple[Network, TrainingHistory]:
    """按配置生成样本、构建并训练网络"""
    samples = generate_samples(cfg.problem.seed, cfg.nn.samples, cfg.nn.max_directions, cfg.omega_tilde,
                               cfg.delta_freq, cfg.H, cfg.mesh.fine_cells, cfg.problem.dim, cfg.nn.min_distinct)
    net = Network.build(cfg.problem.dim, cfg.mesh.fine_cells, cfg.nn.max_directions, cfg.nn.channels,
                        cfg.nn.hidden, seed=cfg.problem.seed)
    return train(net, samples, training_config(cfg))


def obtain_network(cfg: PipelineConfig, weights: Optional[str] = None) -> Tuple[Network, Optional[TrainingHistory]]:
    """
    读取权重文件；文件不存在时训练并（若给了路径）保存
    """
    path = resolve_path(weights or cfg.nn.weights)
    if path and os.path.isfile(path):
        net = load_weights(path)
        if (net.dim, net.n_fine, net.n_directions) != (cfg.problem.dim, cfg.mesh.fine_cells, cfg.nn.max_directions):
            raise ConfigError(
                f"权重 {path} 的结构 (d={net.dim}, n_f={net.n_fine}, N={net.n_directions}) 与配置不符"
            )
        return net, None
    net, history = train_network(cfg)
    if path:
        save_weights(path, net)
    return net, history


# ---------------------------------------------------------------------------
# 报告
# ---------------------------------------------------------------------------

def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, complex):
        return [value.real, value.imag]
    raise TypeError(f"无法序列化 {type(value)}")


@dataclass
class RunReport:
    """
    一次运行的结果摘要

    timings 与 resources 不参与确定性比较
    """

    name: str
    metrics: Dict[str, Optional[float]] = field(default_factory=dict)
    dofs: Dict[str, int] = field(default_factory=dict)
    directions: Dict[str, Any] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    resources: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    training: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name, 'metrics': self.metrics, 'dofs': self.dofs, 'directions': self.directions,
            'timings': self.timings, 'resources': self.resources, 'config': self.config, 'training': self.training,
        }

    def deterministic_dict(self) -> Dict[str, Any]:
        out = self.to_dict()
        out.pop('timings')
        out.pop('resources')
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False, default=_json_default)

    def save(self, path: str):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> 'RunReport':
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise RayIPDGError(f"无法读取报告 {path}: {e}")
        return cls(**data)


@dataclass
class PipelineResult:
    report: RunReport
    problem: Problem
    reduced: Optional[SolveResult]
    extraction: ExtractionResult
    ray: SolveResult
    reference_solution: Optional[SolveResult] = None


@contextmanager
def pipeline_stage(timings: Dict[str, float], name: str):
    """阶段计时，并把失败包装为带阶段标签的异常"""
    Logger().get_logger().info(f"▶ 阶段: {name}")
    try:
        with stage_timer(timings, name):
            yield
    except PipelineStageError:
        raise
    except Exception as e:
        raise PipelineStageError(name, e) from e


def run_pipeline(cfg: PipelineConfig, net: Optional[Network] = None, workers: int = 1,
                 perturbation: float = 0.0) -> PipelineResult:
    """
    完整流程

    Args:
        cfg: 运行配置
        net: 已训练网络（nn 后端；为空时按配置读取或训练）
        workers: 线程数
        perturbation: 对提取方向施加的旋转角（弧度），用于灵敏度研究

    Returns:
        PipelineResult
    """
    logger = Logger().get_logger()
    timings: Dict[str, float] = {}
    backend = cfg.nn.backend
    logger.info("=" * 60)
    logger.info(f"深度射线 IPDG: {cfg.problem.name} (ω={cfg.problem.omega:.6g}, ω̃={cfg.omega_tilde:.6g}, "
                f"后端 {backend})")
    logger.info("=" * 60)

    with pipeline_stage(timings, 'setup'):
        problem = build_problem(cfg)

    reduced = None
    if backend != 'exact':
        with pipeline_stage(timings, 'reduced'):
            reduced = standard_ipdg_solve(problem, problem.omega_tilde, workers=workers)

    history = None
    with pipeline_stage(timings, 'learning'):
        if backend == 'nn' and net is None:
            net, history = obtain_network(cfg)
        extractor = DirectionExtractor(
            backend, cfg.nn.max_directions, problem.ws, problem.omega_tilde, cfg.mesh.fine_cells,
            net=net, reference=problem.reference, svd_threshold=cfg.nn.svd_threshold, prune=cfg.nn.prune,
            oracle_resolution=cfg.nn.oracle_resolution, workers=workers,
        )
        extraction = extractor.extract(problem.mesh, reduced.solution if reduced else None)
        directions = extraction.directions
        if perturbation:
            directions = perturb_directions(directions, perturbation)
            extraction.directions = directions

    with pipeline_stage(timings, 'high_frequency'):
        ray = ray_ipdg_solve(problem, extraction.to_direction_set(problem.mesh, problem.ws), workers)

    reference_solution = None
    with pipeline_stage(timings, 'metrics'):
        metrics, reference_solution = compute_metrics(problem, reduced, extraction, ray, workers)

    report = RunReport(
        name=cfg.problem.name,
        metrics=metrics,
        dofs={'reduced': reduced.n_dof if reduced else 0, 'ray': ray.n_dof, 'ray_system': ray.n_system,
              'elements': problem.mesh.n_elements},
        directions=extraction.summary(),
        timings=timings,
        resources={'memory_mb': round(memory_usage_mb(), 1), 'workers': workers, 'finished': format_datetime()},
        config=cfg.to_dict(),
        training=history.to_dict() if history else {},
    )
    logger.info("=" * 60)
    for key, value in metrics.items():
        if value is not None:
            logger.info(f"  {key}: {value:.6g}")
    logger.info("✅ 流程完成")
    return PipelineResult(report, problem, reduced, extraction, ray, reference_solution)


def compute_metrics(problem: Problem, reduced: Optional[SolveResult], extraction: ExtractionResult,
                    ray: SolveResult, workers: int = 1) -> Tuple[Dict[str, Optional[float]], Optional[SolveResult]]:
    """解误差、DG 范数误差、方向误差与求解诊断"""
    window = (problem.window_lower, problem.window_upper)
    metrics: Dict[str, Optional[float]] = {
        'l2_relative_error': None,
        'dg_norm_error': None,
        'direction_rmse': None,
        'reduced_l2_relative_error': None,
        'residual': ray.info.residual,
        'condition': ray.info.condition,
    }
    reference_solution = None
    if problem.reference is not None:
        ref = problem.reference
        metrics['l2_relative_error'] = l2_relative_error(ray.solution, ref.value, problem.mesh, window=window,
                                                         omega=problem.omega)
        if problem.mode != 'pml':
            metrics['dg_norm_error'] = dg_norm(ray.solution.table, ray.solution.coefficients, problem.omega,
                                               problem.cfg.mesh.penalty, reference=ref)
        truth = exact_directions(ref, problem.mesh)
        metrics['direction_rmse'] = direction_error(extraction.directions, truth, problem.dim)
        if reduced is not None:
            low = problem.reference_at(problem.omega_tilde)
            metrics['reduced_l2_relative_error'] = l2_relative_error(reduced.solution, low.value, reduced.mesh,
                                                                     window=window, omega=problem.omega_tilde)
    elif problem.cfg.mesh.reference_refinement > 0:
        reference_solution = standard_ipdg_solve(problem, problem.omega, problem.cfg.mesh.reference_refinement,
                                                 workers)
        metrics['l2_relative_error'] = l2_relative_error(ray.solution, reference_solution.solution.evaluate,
                                                         problem.mesh, window=window, omega=problem.omega)
    return metrics, reference_solution


def deep_ray_ipdg(cfg: PipelineConfig, net: Optional[Network] = None, workers: int = 1) -> RunReport:
    return run_pipeline(cfg, net, workers).report


def exact_direction_error(cfg: PipelineConfig, angle: float = 0.0, workers: int = 1) -> float:
    """解析方向（可加旋转扰动）下射线 IPDG 的 L2 相对误差"""
    cfg = cfg.copy()
    cfg.nn.backend = 'exact'
    result = run_pipeline(cfg, workers=workers, perturbation=angle)
    value = result.report.metrics['l2_relative_error']
    if value is None:
        raise FieldError(f"{cfg.problem.name} 没有解析参考解")
    return value


# ---------------------------------------------------------------------------
# 结果文件
# ---------------------------------------------------------------------------

def plot_grid(problem: Problem, per_element: int = 2) -> Tuple[np.ndarray, List[int]]:
    """窗口内的规则采样网格 (n_points, d)，x 最快变化"""
    h = problem.mesh.h / per_element
    counts = [int(round((hi - lo) / step)) + 1 for lo, hi, step in zip(problem.window_lower, problem.window_upper, h)]
    axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(problem.window_lower, problem.window_upper, counts)]
    grids = np.meshgrid(*axes, indexing='ij')
    return np.stack([g.ravel(order='F') for g in grids], axis=-1), counts


def write_field_dump(path: str, counts: List[int], lower: np.ndarray, upper: np.ndarray, omega: float,
                     values: np.ndarray):
    """
    二进制场文件：'HRFD1' | d | 各轴点数 | lower | upper | ω | 交错的 re/im float64（x 最快）
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    dim = len(counts)
    values = np.asarray(values, dtype=complex).ravel()
    with open(path, 'wb') as f:
        f.write(FIELD_MAGIC)
        f.write(struct.pack('<I', dim))
        f.write(struct.pack(f'<{dim}I', *counts))
        f.write(struct.pack(f'<{dim}d', *lower))
        f.write(struct.pack(f'<{dim}d', *upper))
        f.write(struct.pack('<d', omega))
        f.write(np.stack([values.real, values.imag], axis=-1).astype('<f8').tobytes())


def read_field_dump(path: str) -> Dict[str, Any]:
    with open(path, 'rb') as f:
        data = f.read()
    if not data.startswith(FIELD_MAGIC):
        raise RayIPDGError(f"{path} 不是场文件")
    offset = len(FIELD_MAGIC)
    (dim,) = struct.unpack_from('<I', data, offset)
    offset += 4
    counts = list(struct.unpack_from(f'<{dim}I', data, offset))
    offset += 4 * dim
    lower = np.array(struct.unpack_from(f'<{dim}d', data, offset))
    offset += 8 * dim
    upper = np.array(struct.unpack_from(f'<{dim}d', data, offset))
    offset += 8 * dim
    (omega,) = struct.unpack_from('<d', data, offset)
    offset += 8
    pairs = np.frombuffer(data, dtype='<f8', offset=offset).reshape(-1, 2)
    return {'counts': counts, 'lower': lower, 'upper': upper, 'omega': omega,
            'values': pairs[:, 0] + 1j * pairs[:, 1]}


def write_plot_csv(path: str, points: np.ndarray, values: np.ndarray):
    """逐点 CSV：坐标、实部、虚部、模"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    names = ['x', 'y', 'z'][:points.shape[1]]
    values = np.asarray(values, dtype=complex)
    table = np.column_stack([points, values.real, values.imag, np.abs(values)])
    np.savetxt(path, table, delimiter=',', header=','.join(names + ['re', 'im', 'abs']), comments='', fmt='%.10e')


def write_artifacts(result: PipelineResult, out_dir: str) -> Dict[str, str]:
    """
    输出报告、方向文件、场文件与绘图 CSV

    Returns:
        {名称: 路径}
    """
    logger = Logger().get_logger()
    os.makedirs(out_dir, exist_ok=True)
    problem = result.problem
    paths = {'report': os.path.join(out_dir, 'report.json'),
             'directions': os.path.join(out_dir, 'directions.txt')}
    result.report.save(paths['report'])
    save_directions(paths['directions'], result.extraction.to_direction_set(problem.mesh, problem.ws))

    points, counts = plot_grid(problem)
    fields_to_write = [('solution', result.ray.solution, problem.omega)]
    if result.reduced is not None:
        fields_to_write.append(('reduced', result.reduced.solution, problem.omega_tilde))
    if result.reference_solution is not None:
        fields_to_write.append(('reference', result.reference_solution.solution, problem.omega))
    elif problem.reference is not None:
        fields_to_write.append(('exact', problem.reference, problem.omega))
    for name, source, omega in fields_to_write:
        values = source.evaluate(points) if isinstance(source, DGSolution) else source.value(points)
        paths[f'{name}_field'] = os.path.join(out_dir, f'{name}.hrfd')
        paths[f'{name}_csv'] = os.path.join(out_dir, f'{name}.csv')
        write_field_dump(paths[f'{name}_field'], counts, problem.window_lower, problem.window_upper, omega, values)
        write_plot_csv(paths[f'{name}_csv'], points, values)
    logger.info(f"✅ 结果已写入 {out_dir}")
    return paths
