"""
Ray IPDG - 基于深度学习射线方向的高频 Helmholtz 求解器
核心模块包
"""

__version__ = "1.0.0"
__author__ = "Ray IPDG Team"

from .errors import (
    RayIPDGError, ConfigError, UsageError, NumericalError, SingularSystemError,
    NonFiniteError, TrainingDivergedError, PipelineStageError, IllConditionedWarning, exit_code_for,
)
from .utils import Logger, get_config, load_env, default_workers
from .mesh import Mesh, MeshSpec, NodalRule, build_mesh, extend_for_pml, refine, locate
from .fields import (
    ConstantSpeed, GaussianLensSpeed, GriddedSpeed, PlaneWaveSum, HankelSum,
    hankel0_first_kind, eval_speed, eval_reference, impedance_data,
)
from .ray_basis import DirectionSet, DGSolution, build_space, polynomial_space, load_directions, save_directions
from .assembly import AssemblyConfig, assemble, dg_norm
from .solver import ComplexSparseSystem, solve, dense_svd
from .neural_net import Network, AdaMax, load_weights, save_weights
from .ray_learning import (
    DirectionExtractor, generate_samples, train, oracle_directions, svd_prune, direction_error,
)
from .config import PipelineConfig, load_config, dump_config, apply_overrides, preset
from .pipeline import (
    RunReport, build_problem, standard_ipdg_solve, ray_ipdg_solve, deep_ray_ipdg, run_pipeline,
    l2_relative_error, write_artifacts,
)

__all__ = [
    'RayIPDGError', 'ConfigError', 'UsageError', 'NumericalError', 'SingularSystemError',
    'NonFiniteError', 'TrainingDivergedError', 'PipelineStageError', 'IllConditionedWarning', 'exit_code_for',
    'Logger', 'get_config', 'load_env', 'default_workers',
    'Mesh', 'MeshSpec', 'NodalRule', 'build_mesh', 'extend_for_pml', 'refine', 'locate',
    'ConstantSpeed', 'GaussianLensSpeed', 'GriddedSpeed', 'PlaneWaveSum', 'HankelSum',
    'hankel0_first_kind', 'eval_speed', 'eval_reference', 'impedance_data',
    'DirectionSet', 'DGSolution', 'build_space', 'polynomial_space', 'load_directions', 'save_directions',
    'AssemblyConfig', 'assemble', 'dg_norm',
    'ComplexSparseSystem', 'solve', 'dense_svd',
    'Network', 'AdaMax', 'load_weights', 'save_weights',
    'DirectionExtractor', 'generate_samples', 'train', 'oracle_directions', 'svd_prune', 'direction_error',
    'PipelineConfig', 'load_config', 'dump_config', 'apply_overrides', 'preset',
    'RunReport', 'build_problem', 'standard_ipdg_solve', 'ray_ipdg_solve', 'deep_ray_ipdg', 'run_pipeline',
    'l2_relative_error', 'write_artifacts',
]
