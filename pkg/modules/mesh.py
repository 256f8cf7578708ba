"""
网格模块
轴对齐长方体上的均匀笛卡尔剖分：单元编号、面分类、单元内节点、点定位
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import MeshError
from .utils import Logger


IMPEDANCE = 'impedance'
DIRICHLET = 'dirichlet'
NEUMANN = 'neumann'
PML = 'pml'

SIDE_NAMES = ('x-', 'x+', 'y-', 'y+', 'z-', 'z+')

# 点定位的容差（相对单元尺寸）
LOCATE_TOL = 1e-12


def side_name(axis: int, side: int) -> str:
    """(axis, side) -> 'x-' 这类名称"""
    return SIDE_NAMES[2 * axis + side]


def parse_side(name: str) -> Tuple[int, int]:
    """'y+' -> (1, 1)"""
    if name not in SIDE_NAMES:
        raise MeshError(f"未知边界名称: {name}，可选: {', '.join(SIDE_NAMES)}")
    index = SIDE_NAMES.index(name)
    return index // 2, index % 2


@dataclass(frozen=True)
class MeshSpec:
    """网格规格：维数、盒子角点、每轴单元数"""

    dim: int
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    cells: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, 'lower', tuple(float(v) for v in self.lower))
        object.__setattr__(self, 'upper', tuple(float(v) for v in self.upper))
        object.__setattr__(self, 'cells', tuple(int(v) for v in self.cells))

    def validate(self):
        if self.dim not in (2, 3):
            raise MeshError(f"维数必须是 2 或 3，得到 {self.dim}")
        for name, values in (('lower', self.lower), ('upper', self.upper), ('cells', self.cells)):
            if len(values) != self.dim:
                raise MeshError(f"{name} 长度 {len(values)} 与维数 {self.dim} 不一致")
        if any(n <= 0 for n in self.cells):
            raise MeshError(f"每个方向的单元数必须为正: {self.cells}")
        if any(not hi > lo for lo, hi in zip(self.lower, self.upper)):
            raise MeshError(f"退化的计算区域: lower={self.lower}, upper={self.upper}")

    @property
    def size(self) -> np.ndarray:
        """每轴单元尺寸"""
        return (np.array(self.upper) - np.array(self.lower)) / np.array(self.cells)


class NodalRule:
    """
    单元内节点的放置规则

    L=1 取单元中心；L=m^d 取张量积 Chebyshev 点；
    其它 L 沿单元对角线放置 L 个 Chebyshev 位置
    """

    def __init__(self, count: int = 1):
        if count < 1:
            raise MeshError(f"节点数必须 >= 1，得到 {count}")
        self.count = int(count)

    @staticmethod
    def chebyshev(m: int) -> np.ndarray:
        """[0,1] 上的 m 个第一类 Chebyshev 点（升序）"""
        i = np.arange(m)
        return 0.5 - 0.5 * np.cos((2 * i + 1) * np.pi / (2 * m))

    def reference_points(self, dim: int) -> np.ndarray:
        """参考单元 [0,1]^d 上的节点，形状 (L, d)"""
        if self.count == 1:
            return np.full((1, dim), 0.5)
        m = int(round(self.count ** (1.0 / dim)))
        if m ** dim == self.count:
            t = self.chebyshev(m)
            grids = np.meshgrid(*([t] * dim), indexing='ij')
            # x 最快变化
            return np.stack([g.ravel(order='F') for g in grids], axis=-1)
        t = self.chebyshev(self.count)
        return np.repeat(t[:, None], dim, axis=1)

    def __eq__(self, other):
        return isinstance(other, NodalRule) and other.count == self.count

    def __repr__(self):
        return f"NodalRule({self.count})"


@dataclass(frozen=True)
class InteriorFaces:
    """一个方向上的全部内部面：plus 为低侧单元（n+ = +e_axis），minus 为高侧单元"""

    axis: int
    plus: np.ndarray
    minus: np.ndarray

    def __len__(self):
        return len(self.plus)


@dataclass(frozen=True)
class BoundaryFaces:
    """一个边界侧上的全部边界面"""

    axis: int
    side: int
    elements: np.ndarray
    tags: np.ndarray
    dim: int = 2

    @property
    def name(self) -> str:
        return side_name(self.axis, self.side)

    @property
    def normal(self) -> np.ndarray:
        return (2.0 * self.side - 1.0) * np.eye(self.dim)[self.axis]

    def __len__(self):
        return len(self.elements)


@dataclass(frozen=True)
class Element:
    """单个单元的几何信息"""

    index: int
    lower: np.ndarray
    h: np.ndarray
    vertices: np.ndarray
    nodal_points: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.lower)

    def contains(self, x, tol: float = 1e-12) -> bool:
        t = (np.asarray(x, dtype=float) - self.lower) / self.h
        return bool(np.all((t >= -tol) & (t <= 1 + tol)))


@dataclass(frozen=True)
class Face:
    """单个面的描述（逐个查看时使用，组装走向量化的数组）"""

    id: int
    kind: str
    axis: int
    elements: Tuple[int, ...]
    normals: Tuple[Tuple[float, ...], ...]
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    boundary_tag: Optional[str] = None


class Mesh:
    """
    均匀笛卡尔网格（构造后不可变）

    单元按字典序编号，x 方向变化最快
    """

    def __init__(self, spec: MeshSpec, nodal_rule: Optional[NodalRule] = None,
                 physical_lower: Optional[Sequence[float]] = None,
                 physical_upper: Optional[Sequence[float]] = None,
                 side_tags: Optional[Dict[str, str]] = None):
        spec.validate()
        self.spec = spec
        self.dim = spec.dim
        self.nodal_rule = nodal_rule or NodalRule(1)
        self.cells = np.array(spec.cells, dtype=np.int64)
        self.lower = np.array(spec.lower, dtype=float)
        self.upper = np.array(spec.upper, dtype=float)
        self.h = spec.size
        self.n_elements = int(np.prod(self.cells))

        self.physical_lower = self.lower.copy() if physical_lower is None else np.array(physical_lower, dtype=float)
        self.physical_upper = self.upper.copy() if physical_upper is None else np.array(physical_upper, dtype=float)

        self.strides = np.concatenate([[1], np.cumprod(self.cells)[:-1]]).astype(np.int64)
        self.multi_index = np.stack(
            np.unravel_index(np.arange(self.n_elements), tuple(self.cells), order='F'), axis=-1
        ).astype(np.int64)
        self.element_lower = self.lower + self.multi_index * self.h
        self.element_center = self.element_lower + 0.5 * self.h

        ref_nodes = self.nodal_rule.reference_points(self.dim)
        self.nodal_points = self.element_lower[:, None, :] + ref_nodes[None, :, :] * self.h

        tol = 1e-9 * self.h
        self.physical = np.all(
            (self.element_center > self.physical_lower - tol) & (self.element_center < self.physical_upper + tol),
            axis=1,
        )

        default_tag = IMPEDANCE if np.allclose(self.physical_lower, self.lower) else PML
        self.side_tags = {name: default_tag for name in SIDE_NAMES[:2 * self.dim]}
        if side_tags:
            self.side_tags.update(side_tags)

        self.interior_faces = self._build_interior_faces()
        self.boundary_faces = self._build_boundary_faces()

    def _build_interior_faces(self) -> List[InteriorFaces]:
        faces = []
        for axis in range(self.dim):
            plus = np.nonzero(self.multi_index[:, axis] < self.cells[axis] - 1)[0]
            faces.append(InteriorFaces(axis=axis, plus=plus, minus=plus + self.strides[axis]))
        return faces

    def _build_boundary_faces(self) -> List[BoundaryFaces]:
        faces = []
        for axis in range(self.dim):
            for side in (0, 1):
                target = 0 if side == 0 else self.cells[axis] - 1
                elements = np.nonzero(self.multi_index[:, axis] == target)[0]
                tag = self.side_tags[side_name(axis, side)]
                faces.append(BoundaryFaces(axis=axis, side=side, elements=elements,
                                           tags=np.full(len(elements), tag, dtype=object), dim=self.dim))
        return faces

    @property
    def n_interior_faces(self) -> int:
        return int(sum(len(f) for f in self.interior_faces))

    @property
    def n_boundary_faces(self) -> int:
        return int(sum(len(f) for f in self.boundary_faces))

    @property
    def H(self) -> float:
        """最大单元尺寸"""
        return float(np.max(self.h))

    @property
    def element_volume(self) -> float:
        return float(np.prod(self.h))

    def face_measure(self, axis: int) -> float:
        """垂直于 axis 的面的面积（2D 中为边长）"""
        return float(np.prod(np.delete(self.h, axis)))

    def element_index(self, multi) -> int:
        multi = np.asarray(multi, dtype=np.int64)
        return int(np.dot(multi, self.strides))

    def element(self, index: int) -> Element:
        if not 0 <= index < self.n_elements:
            raise MeshError(f"单元编号越界: {index}")
        return Element(int(index), self.element_lower[index].copy(), self.h.copy(),
                       self.vertices(index), self.nodal_points[index].copy())

    def vertices(self, element: int) -> np.ndarray:
        """单元的 2^d 个顶点，顶点 j 的第 a 位给出 a 轴上的高/低侧"""
        bits = vertex_bits(self.dim)
        return self.element_lower[element] + bits * self.h

    def faces(self):
        """按 id 逐个给出 Face 对象（内部面在前）"""
        face_id = 0
        for group in self.interior_faces:
            normal = tuple(np.eye(self.dim)[group.axis])
            for plus, minus in zip(group.plus, group.minus):
                lo = self.element_lower[plus].copy()
                lo[group.axis] += self.h[group.axis]
                hi = lo + self.h
                hi[group.axis] = lo[group.axis]
                yield Face(face_id, 'interior', group.axis, (int(plus), int(minus)),
                           (normal, tuple(-np.array(normal))), tuple(lo), tuple(hi))
                face_id += 1
        for group in self.boundary_faces:
            for element, tag in zip(group.elements, group.tags):
                lo = self.element_lower[element].copy()
                lo[group.axis] += group.side * self.h[group.axis]
                hi = lo + self.h
                hi[group.axis] = lo[group.axis]
                yield Face(face_id, 'boundary', group.axis, (int(element),),
                           (tuple(group.normal),), tuple(lo), tuple(hi), tag)
                face_id += 1

    def locate_points(self, points: np.ndarray) -> np.ndarray:
        """
        批量点定位

        Args:
            points: 形状 (n, d) 的点

        Returns:
            单元编号数组；落在共享面上的点归属编号较小的单元
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        t = (points - self.lower) / self.h
        outside = np.any((t < -LOCATE_TOL * self.cells) | (t > self.cells * (1 + LOCATE_TOL)), axis=1)
        if np.any(outside):
            bad = points[np.argmax(outside)]
            raise MeshError(f"点 {tuple(bad)} 不在计算区域 {tuple(self.lower)}-{tuple(self.upper)} 内")
        multi = np.ceil(t - LOCATE_TOL) - 1
        multi = np.clip(multi, 0, self.cells - 1).astype(np.int64)
        return multi @ self.strides

    def reference_coordinates(self, points: np.ndarray, elements: np.ndarray) -> np.ndarray:
        """点在所属单元参考坐标 [0,1]^d 中的位置"""
        return np.clip((np.atleast_2d(points) - self.element_lower[elements]) / self.h, 0.0, 1.0)

    def with_boundary_tags(self, side_tags: Dict[str, str]) -> 'Mesh':
        """返回换了边界标签的新网格"""
        tags = dict(self.side_tags)
        tags.update(side_tags)
        return Mesh(self.spec, self.nodal_rule, self.physical_lower, self.physical_upper, tags)

    def with_nodal_rule(self, nodal_rule: NodalRule) -> 'Mesh':
        return Mesh(self.spec, nodal_rule, self.physical_lower, self.physical_upper, self.side_tags)

    def is_extended(self) -> bool:
        return not (np.allclose(self.physical_lower, self.lower) and np.allclose(self.physical_upper, self.upper))

    def __repr__(self):
        return (f"Mesh(dim={self.dim}, cells={tuple(self.cells)}, "
                f"box={tuple(self.lower)}-{tuple(self.upper)}, L={self.nodal_rule.count})")


def vertex_bits(dim: int) -> np.ndarray:
    """顶点 j 的二进制位 (2^d, d)，第 a 位表示 a 轴取高侧"""
    return np.array([[(j >> a) & 1 for a in range(dim)] for j in range(2 ** dim)], dtype=float)


def build_mesh(spec: MeshSpec, nodal_rule: Optional[NodalRule] = None) -> Mesh:
    """
    构建均匀网格

    Args:
        spec: 网格规格
        nodal_rule: 单元内节点规则，默认单元中心

    Returns:
        Mesh 对象
    """
    mesh = Mesh(spec, nodal_rule)
    Logger().get_logger().debug(
        f"网格: {mesh.n_elements} 个单元, {mesh.n_interior_faces} 个内部面, {mesh.n_boundary_faces} 个边界面"
    )
    return mesh


def unit_box_mesh(dim: int, n: int, nodal_points: int = 1) -> Mesh:
    """[0,1]^d 上的 n^d 网格"""
    return build_mesh(MeshSpec(dim, (0.0,) * dim, (1.0,) * dim, (n,) * dim), NodalRule(nodal_points))


def extend_for_pml(mesh: Mesh, delta: float) -> Mesh:
    """
    向外各扩展 delta 宽度的 PML 层

    Args:
        mesh: 物理区域上的网格
        delta: PML 宽度，必须是单元尺寸的整数倍

    Returns:
        扩展后的网格，原单元标记为物理单元
    """
    if delta < 0:
        raise MeshError(f"PML 宽度不能为负: {delta}")
    if delta == 0:
        return mesh
    layers = delta / mesh.h
    rounded = np.round(layers)
    if np.any(np.abs(layers - rounded) > 1e-8 * np.maximum(1.0, rounded)) or np.any(rounded < 1):
        raise MeshError(f"PML 宽度 {delta} 不是单元尺寸 {tuple(mesh.h)} 的整数倍")
    rounded = rounded.astype(np.int64)
    spec = MeshSpec(
        mesh.dim,
        tuple(mesh.lower - rounded * mesh.h),
        tuple(mesh.upper + rounded * mesh.h),
        tuple(mesh.cells + 2 * rounded),
    )
    side_tags = {name: PML for name in SIDE_NAMES[:2 * mesh.dim]}
    return Mesh(spec, mesh.nodal_rule, mesh.lower, mesh.upper, side_tags)


def refine(mesh: Mesh, factor: int) -> Mesh:
    """
    每个单元均匀细分为 factor^d 个子单元

    物理区域和边界标签保持不变，细网格使用单元中心节点
    """
    if factor < 1:
        raise MeshError(f"细分倍数必须 >= 1，得到 {factor}")
    spec = MeshSpec(mesh.dim, mesh.spec.lower, mesh.spec.upper, tuple(mesh.cells * int(factor)))
    return Mesh(spec, NodalRule(1), mesh.physical_lower, mesh.physical_upper, mesh.side_tags)


def tag_boundary(mesh: Mesh, dirichlet_sides: Sequence[str]) -> Mesh:
    """Cauchy 模式：给定侧为 Dirichlet，其余为 Neumann"""
    dirichlet = set(dirichlet_sides)
    for name in dirichlet:
        parse_side(name)
    tags = {name: (DIRICHLET if name in dirichlet else NEUMANN) for name in SIDE_NAMES[:2 * mesh.dim]}
    return mesh.with_boundary_tags(tags)


def locate(mesh: Mesh, x: Sequence[float]) -> int:
    """单点定位"""
    return int(mesh.locate_points(np.asarray(x, dtype=float)[None, :])[0])


def node_grid(mesh: Mesh) -> np.ndarray:
    """网格顶点坐标 (prod(cells+1), d)，x 最快变化"""
    axes = [np.linspace(lo, hi, n + 1) for lo, hi, n in zip(mesh.lower, mesh.upper, mesh.cells)]
    grids = np.meshgrid(*axes, indexing='ij')
    return np.stack([g.ravel(order='F') for g in grids], axis=-1)


def cell_center_grid(lower: np.ndarray, size: np.ndarray, n: int) -> np.ndarray:
    """
    盒子 [lower, lower+size] 上 n^d 个小格中心，形状 (n,)*d + (d,)

    数组轴顺序为 (x, y[, z])
    """
    dim = len(lower)
    axes = [lower[a] + (np.arange(n) + 0.5) * size[a] / n for a in range(dim)]
    grids = np.meshgrid(*axes, indexing='ij')
    return np.stack(grids, axis=-1)


def element_fine_points(mesh: Mesh, n_fine: int) -> np.ndarray:
    """每个单元上 n_fine^d 个细格中心，形状 (N_E, n_fine^d, d)，x 最快变化"""
    ref = cell_center_grid(np.zeros(mesh.dim), np.ones(mesh.dim), n_fine)
    ref = np.stack([ref[..., a].ravel(order='F') for a in range(mesh.dim)], axis=-1)
    return mesh.element_lower[:, None, :] + ref[None, :, :] * mesh.h

