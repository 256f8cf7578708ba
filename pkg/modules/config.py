"""
运行配置模块
分节 key=value 配置文件（[problem] / [mesh] / [nn] / [pml]）的解析、校验、覆盖与输出，
以及各算例的内置预设
"""

import copy
import math
import os
from dataclasses import dataclass, field, fields
from io import StringIO
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from dotenv import dotenv_values

from .errors import ConfigError
from .utils import Logger


SECTIONS = ('problem', 'mesh', 'nn', 'pml')
REFERENCE_KINDS = ('plane', 'hankel', 'none')
SPEED_KINDS = ('constant', 'lens', 'grid')
SOURCE_KINDS = ('reference', 'gaussian', 'none')
BOUNDARY_KINDS = ('impedance', 'cauchy', 'pml')
BACKEND_KINDS = ('nn', 'oracle', 'exact')
LOSS_KINDS = ('mse', 'mse_norm1')

TEN_PI = 10.0 * math.pi


@dataclass
class ProblemConfig:
    name: str = 'example1'
    dim: int = 2
    omega: float = 8 * TEN_PI
    omega_tilde: Optional[float] = None
    reference: str = 'plane'
    directions: List[List[float]] = field(default_factory=lambda: [[1.0, 0.0]])
    amplitudes: List[complex] = field(default_factory=lambda: [1 + 0j])
    sources: List[List[float]] = field(default_factory=list)
    speed: str = 'constant'
    speed_value: float = 1.0
    speed_file: str = ''
    boundary: str = 'impedance'
    dirichlet_sides: List[str] = field(default_factory=list)
    source_term: str = 'reference'
    source_point: List[float] = field(default_factory=list)
    window_lower: List[float] = field(default_factory=list)
    window_upper: List[float] = field(default_factory=list)
    seed: int = 0


@dataclass
class MeshConfig:
    lower: List[float] = field(default_factory=lambda: [0.0, 0.0])
    upper: List[float] = field(default_factory=lambda: [1.0, 1.0])
    cells: List[int] = field(default_factory=lambda: [40, 40])
    nodal_points: int = 1
    fine_cells: int = 4
    penalty: Optional[float] = None
    quad_points: Optional[int] = None
    reference_refinement: int = 0


@dataclass
class NNConfig:
    backend: str = 'nn'
    max_directions: int = 1
    min_distinct: Optional[int] = None
    loss: str = 'mse_norm1'
    samples: int = 10000
    epochs: int = 100
    batch_size: int = 64
    patience: int = 20
    learning_rate: float = 0.002
    delta_freq: Optional[float] = None
    channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    hidden: int = 128
    weights: str = ''
    svd_threshold: float = 0.95
    prune: bool = True
    oracle_resolution: float = 1.0


@dataclass
class PMLConfig:
    delta: Optional[float] = None
    strength: Optional[float] = None


@dataclass
class PipelineConfig:
    """一次完整运行的全部参数"""

    problem: ProblemConfig = field(default_factory=ProblemConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    nn: NNConfig = field(default_factory=NNConfig)
    pml: PMLConfig = field(default_factory=PMLConfig)

    @property
    def omega_tilde(self) -> float:
        """低频 ω̃，未指定时取 √(ω·10π)"""
        if self.problem.omega_tilde is not None:
            return self.problem.omega_tilde
        return math.sqrt(self.problem.omega * TEN_PI)

    @property
    def delta_freq(self) -> float:
        if self.nn.delta_freq is not None:
            return self.nn.delta_freq
        return 0.3 * self.omega_tilde

    @property
    def h(self) -> np.ndarray:
        """粗网格单元尺寸"""
        return (np.asarray(self.mesh.upper, dtype=float) - np.asarray(self.mesh.lower, dtype=float)) \
            / np.asarray(self.mesh.cells, dtype=float)

    @property
    def H(self) -> float:
        return float(np.max(self.h))

    def copy(self) -> 'PipelineConfig':
        return copy.deepcopy(self)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        out = {}
        for section in SECTIONS:
            values = {}
            for f in fields(getattr(self, section)):
                value = getattr(getattr(self, section), f.name)
                if isinstance(value, complex):
                    value = [value.real, value.imag]
                elif isinstance(value, list) and value and isinstance(value[0], complex):
                    value = [[v.real, v.imag] for v in value]
                values[f.name] = value
            out[section] = values
        return out


# ---------------------------------------------------------------------------
# 键类型表
# ---------------------------------------------------------------------------

KEY_TYPES = {
    'problem.name': 'str', 'problem.dim': 'int', 'problem.omega': 'float',
    'problem.omega_tilde': 'opt_float', 'problem.reference': 'str', 'problem.directions': 'vectors',
    'problem.amplitudes': 'complexes', 'problem.sources': 'vectors', 'problem.speed': 'str',
    'problem.speed_value': 'float', 'problem.speed_file': 'str', 'problem.boundary': 'str',
    'problem.dirichlet_sides': 'strs', 'problem.source_term': 'str', 'problem.source_point': 'floats',
    'problem.window_lower': 'floats', 'problem.window_upper': 'floats', 'problem.seed': 'int',
    'mesh.lower': 'floats', 'mesh.upper': 'floats', 'mesh.cells': 'ints', 'mesh.nodal_points': 'int',
    'mesh.fine_cells': 'int', 'mesh.penalty': 'opt_float', 'mesh.quad_points': 'opt_int',
    'mesh.reference_refinement': 'int',
    'nn.backend': 'str', 'nn.max_directions': 'int', 'nn.min_distinct': 'opt_int', 'nn.loss': 'str',
    'nn.samples': 'int', 'nn.epochs': 'int', 'nn.batch_size': 'int', 'nn.patience': 'int',
    'nn.learning_rate': 'float', 'nn.delta_freq': 'opt_float', 'nn.channels': 'ints', 'nn.hidden': 'int',
    'nn.weights': 'str', 'nn.svd_threshold': 'float', 'nn.prune': 'bool', 'nn.oracle_resolution': 'float',
    'pml.delta': 'opt_float', 'pml.strength': 'opt_float',
}

TYPE_NAMES = {
    'str': '字符串', 'int': '整数', 'float': '浮点数', 'bool': '布尔值 (true/false)',
    'opt_float': '浮点数或留空', 'opt_int': '整数或留空', 'floats': '逗号分隔的浮点数',
    'ints': '逗号分隔的整数', 'strs': '逗号分隔的字符串', 'vectors': '分号分隔的向量 (如 1,0;0,1)',
    'complexes': '逗号分隔的复数 (如 1,0.5+1j)',
}

TRUE_VALUES = ('1', 'true', 'yes', 'on')
FALSE_VALUES = ('0', 'false', 'no', 'off')


def _split(text: str, sep: str) -> List[str]:
    return [part.strip() for part in text.split(sep) if part.strip()]


def parse_value(key: str, raw: Optional[str]) -> Any:
    """
    按键类型表转换字符串

    Raises:
        ConfigError: 未知键或类型错误（消息中包含键名与期望类型）
    """
    if key not in KEY_TYPES:
        raise ConfigError(f"未知配置键: {key}")
    kind = KEY_TYPES[key]
    text = '' if raw is None else str(raw).strip()
    try:
        if kind == 'str':
            return text
        if kind == 'int':
            return int(text)
        if kind == 'float':
            return float(text)
        if kind == 'opt_float':
            return float(text) if text else None
        if kind == 'opt_int':
            return int(text) if text else None
        if kind == 'bool':
            lowered = text.lower()
            if lowered in TRUE_VALUES:
                return True
            if lowered in FALSE_VALUES:
                return False
            raise ValueError(text)
        if kind == 'floats':
            return [float(v) for v in _split(text, ',')]
        if kind == 'ints':
            return [int(v) for v in _split(text, ',')]
        if kind == 'strs':
            return _split(text, ',')
        if kind == 'vectors':
            return [[float(v) for v in _split(vector, ',')] for vector in _split(text, ';')]
        if kind == 'complexes':
            return [complex(v.replace(' ', '')) for v in _split(text, ',')]
    except ValueError:
        raise ConfigError(f"配置键 {key} 的值 '{text}' 无效，期望{TYPE_NAMES[kind]}")
    raise ConfigError(f"配置键 {key} 的类型 {kind} 未实现")


def format_value(key: str, value: Any) -> str:
    kind = KEY_TYPES[key]
    if value is None:
        return ''
    if kind == 'bool':
        return 'true' if value else 'false'
    if kind in ('float', 'opt_float'):
        return repr(float(value))
    if kind in ('floats',):
        return ','.join(repr(float(v)) for v in value)
    if kind in ('ints', 'strs'):
        return ','.join(str(v) for v in value)
    if kind == 'vectors':
        return ';'.join(','.join(repr(float(v)) for v in vector) for vector in value)
    if kind == 'complexes':
        return ','.join(repr(complex(v)).strip('()') for v in value)
    return str(value)


def set_value(cfg: PipelineConfig, key: str, raw: Optional[str]):
    value = parse_value(key, raw)
    section, name = key.split('.', 1)
    setattr(getattr(cfg, section), name, value)


# ---------------------------------------------------------------------------
# 读写
# ---------------------------------------------------------------------------

def parse_config_text(text: str, base: Optional[PipelineConfig] = None, source: str = '<string>') -> PipelineConfig:
    """
    解析分节配置文本，覆盖到 base（默认 example1 预设）上

    每节内容交给 python-dotenv 解析（引号、注释、${VAR} 插值）
    """
    cfg = (base or preset('example1')).copy()
    bodies: Dict[str, List[str]] = {}
    current = None
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith('[') and stripped.endswith(']'):
            current = stripped[1:-1].strip()
            if current not in SECTIONS:
                raise ConfigError(f"{source}:{line_no} 未知配置节 [{current}]，可选: {', '.join(SECTIONS)}")
            bodies.setdefault(current, [])
            continue
        if not stripped or stripped.startswith('#'):
            continue
        if current is None:
            raise ConfigError(f"{source}:{line_no} 配置项必须位于某个 [节] 之下")
        bodies[current].append(line)

    for section, lines in bodies.items():
        values = dotenv_values(stream=StringIO('\n'.join(lines)), interpolate=True)
        for name, raw in values.items():
            set_value(cfg, f"{section}.{name}", raw)
    validate_config(cfg)
    return cfg


def load_config(path: str, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    """
    读取配置文件

    Args:
        path: 配置文件路径
        base: 基础配置（默认 example1 预设）

    Returns:
        PipelineConfig
    """
    if not os.path.isfile(path):
        raise ConfigError(f"配置文件不存在: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        text = f.read()
    cfg = parse_config_text(text, base, source=path)
    Logger().get_logger().debug(f"已加载配置: {path} ({cfg.problem.name})")
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    """输出为可重新加载的配置文本"""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for f in fields(getattr(cfg, section)):
            key = f"{section}.{f.name}"
            lines.append(f"{f.name}={format_value(key, getattr(getattr(cfg, section), f.name))}")
        lines.append('')
    return '\n'.join(lines)


def save_config(path: str, cfg: PipelineConfig):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(dump_config(cfg))


def apply_overrides(cfg: PipelineConfig, overrides: Sequence[str]) -> PipelineConfig:
    """
    应用 section.key=value 形式的覆盖项，返回新配置
    """
    cfg = cfg.copy()
    for item in overrides or ():
        if '=' not in item:
            raise ConfigError(f"覆盖项格式错误（应为 section.key=value）: {item}")
        key, raw = item.split('=', 1)
        key = key.strip()
        if '.' not in key:
            raise ConfigError(f"覆盖项缺少节名（应为 section.key=value）: {item}")
        set_value(cfg, key, raw)
    validate_config(cfg)
    return cfg


def validate_config(cfg: PipelineConfig):
    """
    配置一致性检查

    Raises:
        ConfigError: 维数、取值范围、PML 宽度与网格不匹配等
    """
    p, m, nn = cfg.problem, cfg.mesh, cfg.nn
    if p.dim not in (2, 3):
        raise ConfigError(f"problem.dim 必须为 2 或 3，得到 {p.dim}")
    for key, value in (('mesh.lower', m.lower), ('mesh.upper', m.upper), ('mesh.cells', m.cells)):
        if len(value) != p.dim:
            raise ConfigError(f"{key} 需要 {p.dim} 个分量，得到 {len(value)}")
    if any(hi <= lo for lo, hi in zip(m.lower, m.upper)):
        raise ConfigError("mesh.upper 必须逐分量大于 mesh.lower")
    if any(c < 1 for c in m.cells):
        raise ConfigError("mesh.cells 必须为正整数")
    if p.omega <= 0:
        raise ConfigError(f"problem.omega 必须为正，得到 {p.omega}")
    if not 0 < cfg.omega_tilde < p.omega:
        raise ConfigError(f"需要 0 < omega_tilde < omega，得到 {cfg.omega_tilde} / {p.omega}")

    choices = (
        ('problem.reference', p.reference, REFERENCE_KINDS),
        ('problem.speed', p.speed, SPEED_KINDS),
        ('problem.source_term', p.source_term, SOURCE_KINDS),
        ('problem.boundary', p.boundary, BOUNDARY_KINDS),
        ('nn.backend', nn.backend, BACKEND_KINDS),
        ('nn.loss', nn.loss, LOSS_KINDS),
    )
    for key, value, allowed in choices:
        if value not in allowed:
            raise ConfigError(f"{key} 取值 '{value}' 无效，可选: {', '.join(allowed)}")

    if p.reference == 'plane':
        if not p.directions or any(len(d) != p.dim for d in p.directions):
            raise ConfigError(f"problem.directions 需要若干 {p.dim} 维向量")
        if any(np.linalg.norm(d) == 0 for d in p.directions):
            raise ConfigError("problem.directions 含零向量")
    if p.reference == 'hankel':
        if not p.sources or any(len(s) != p.dim for s in p.sources):
            raise ConfigError(f"problem.sources 需要若干 {p.dim} 维点")
    terms = len(p.directions) if p.reference == 'plane' else len(p.sources)
    if p.reference != 'none' and p.amplitudes and len(p.amplitudes) != terms:
        raise ConfigError(f"problem.amplitudes 个数 {len(p.amplitudes)} 与项数 {terms} 不符")
    if p.reference == 'none' and p.source_term == 'reference':
        raise ConfigError("无参考场时 problem.source_term 不能为 reference")
    if p.source_term == 'gaussian' and len(p.source_point) != p.dim:
        raise ConfigError(f"problem.source_point 需要 {p.dim} 个分量")
    if p.speed == 'grid' and not p.speed_file:
        raise ConfigError("problem.speed=grid 需要 problem.speed_file")
    if p.speed == 'constant' and p.speed_value <= 0:
        raise ConfigError("problem.speed_value 必须为正")
    if p.boundary == 'cauchy' and not p.dirichlet_sides:
        raise ConfigError("cauchy 边界需要 problem.dirichlet_sides")
    for window in (p.window_lower, p.window_upper):
        if window and len(window) != p.dim:
            raise ConfigError(f"problem.window_lower/upper 需要 {p.dim} 个分量")
    if p.speed == 'lens' and p.dim != 2:
        raise ConfigError("lens 波速仅支持 2D")

    if m.nodal_points < 1 or m.fine_cells < 1:
        raise ConfigError("mesh.nodal_points 与 mesh.fine_cells 必须 >= 1")
    if m.reference_refinement < 0:
        raise ConfigError("mesh.reference_refinement 不能为负")
    if not 1 <= nn.max_directions <= 8:
        raise ConfigError(f"nn.max_directions 必须在 [1, 8] 内，得到 {nn.max_directions}")
    if nn.min_distinct is not None and not 1 <= nn.min_distinct <= nn.max_directions:
        raise ConfigError("nn.min_distinct 必须在 [1, nn.max_directions] 内")
    if nn.samples < 1 or nn.batch_size < 1 or nn.epochs < 0:
        raise ConfigError("nn.samples / nn.batch_size 必须 >= 1，nn.epochs 不能为负")
    if not 0 < nn.svd_threshold <= 1:
        raise ConfigError("nn.svd_threshold 必须在 (0, 1] 内")
    if not 0 <= cfg.delta_freq < cfg.omega_tilde:
        raise ConfigError(f"需要 0 <= delta_freq < omega_tilde，得到 {cfg.delta_freq}")

    if cfg.pml.delta is not None and cfg.pml.delta > 0:
        layers = cfg.pml.delta / cfg.h
        if np.any(np.abs(layers - np.round(layers)) > 1e-8 * np.maximum(1.0, np.round(layers))):
            raise ConfigError(f"pml.delta={cfg.pml.delta} 不是网格尺寸 {tuple(cfg.h)} 的整数倍")
    if cfg.pml.delta is not None and cfg.pml.delta < 0:
        raise ConfigError("pml.delta 不能为负")


# ---------------------------------------------------------------------------
# 预设
# ---------------------------------------------------------------------------

def _preset_3d(name: str) -> PipelineConfig:
    cfg = PipelineConfig()
    cfg.problem = ProblemConfig(name=name, dim=3, omega=4 * TEN_PI, omega_tilde=2 * TEN_PI,
                                directions=[[1.0, 0.0, 0.0]])
    cfg.mesh = MeshConfig(lower=[0.0, 0.0, 0.0], upper=[1.0, 0.2, 0.2], cells=[20, 4, 4])
    return cfg


def _build_presets() -> Dict[str, PipelineConfig]:
    presets = {}
    omega_tilde = math.sqrt(8) * TEN_PI

    cfg = PipelineConfig()
    cfg.problem.omega_tilde = omega_tilde
    presets['example1'] = cfg

    cfg = presets['example1'].copy()
    cfg.problem.name = 'example2'
    cfg.problem.directions = [[1.0, 0.0], [0.0, 1.0]]
    cfg.problem.amplitudes = [1 + 0j, 1 + 0j]
    cfg.nn.max_directions = 2
    cfg.nn.prune = False
    presets['example2'] = cfg

    cfg = presets['example1'].copy()
    cfg.problem.name = 'example3'
    cfg.problem.reference = 'hankel'
    cfg.problem.directions = []
    cfg.problem.sources = [[2.0, 2.0]]
    presets['example3'] = cfg

    cfg = presets['example3'].copy()
    cfg.problem.name = 'example4'
    cfg.problem.sources = [[2.0, 2.0], [-0.5, 2.0]]
    cfg.problem.amplitudes = [1 + 0j, 0.5 + 0j]
    cfg.nn.max_directions = 2
    cfg.nn.prune = False
    presets['example4'] = cfg

    cfg = presets['example1'].copy()
    cfg.problem.name = 'example5'
    cfg.nn.max_directions = 2
    cfg.nn.min_distinct = 1
    presets['example5'] = cfg

    cfg = presets['example1'].copy()
    cfg.problem.name = 'example6'
    cfg.problem.reference = 'none'
    cfg.problem.directions = []
    cfg.problem.amplitudes = []
    cfg.problem.speed = 'lens'
    cfg.problem.boundary = 'pml'
    cfg.problem.source_term = 'gaussian'
    cfg.problem.source_point = [0.5, 0.1]
    cfg.problem.window_lower = [0.25, 0.25]
    cfg.problem.window_upper = [0.75, 0.75]
    cfg.mesh.fine_cells = 8
    cfg.mesh.reference_refinement = 4
    cfg.nn.max_directions = 4
    cfg.nn.min_distinct = 1
    cfg.nn.prune = True
    presets['example6'] = cfg

    cfg = presets['example6'].copy()
    cfg.problem.name = 'example7'
    cfg.problem.speed = 'grid'
    cfg.problem.speed_file = 'data/layered_speed.txt'
    presets['example7'] = cfg

    presets['example8'] = _preset_3d('example8')

    cfg = _preset_3d('example8b')
    cfg.problem.directions = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    cfg.problem.amplitudes = [1 + 0j] * 3
    cfg.mesh.nodal_points = 2
    cfg.nn.max_directions = 3
    cfg.nn.prune = False
    presets['example8b'] = cfg

    cfg = _preset_3d('example8c')
    cfg.problem.reference = 'hankel'
    cfg.problem.directions = []
    cfg.problem.sources = [[2.0, 2.0, 2.0]]
    cfg.mesh.nodal_points = 2
    presets['example8c'] = cfg

    cfg = _preset_3d('example8d')
    cfg.problem.reference = 'hankel'
    cfg.problem.directions = []
    cfg.problem.sources = [[2.0, 2.0, 2.0], [-0.5, -0.5, 2.0]]
    cfg.problem.amplitudes = [1 + 0j, 0.5 + 0j]
    cfg.mesh.nodal_points = 2
    cfg.nn.max_directions = 2
    cfg.nn.prune = False
    presets['example8d'] = cfg
    return presets


PRESETS = _build_presets()


def preset(name: str) -> PipelineConfig:
    """内置算例配置（返回副本）"""
    if name not in PRESETS:
        raise ConfigError(f"未知预设: {name}，可选: {', '.join(PRESETS)}")
    return PRESETS[name].copy()


def preset_names() -> List[str]:
    return list(PRESETS)
