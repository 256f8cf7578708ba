"""
射线基函数模块
局部空间 V_H(Θ_K)：双/三线性 Lagrange 函数乘以在节点处线性化的平面波相位
"""

import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import BasisError
from .fields import WaveSpeed
from .mesh import Element, Mesh, cell_center_grid, node_grid, vertex_bits
from .utils import Logger


# 同一单元内方向夹角低于此值时告警
NEAR_PARALLEL_ANGLE = 1e-3


def shape_functions(ref: np.ndarray, h: np.ndarray):
    """
    参考坐标处的 Lagrange 形函数及其物理梯度

    Args:
        ref: 参考坐标 (..., d)，取值 [0,1]
        h: 单元尺寸 (d,)

    Returns:
        (values (..., 2^d), gradients (..., 2^d, d))
    """
    ref = np.asarray(ref, dtype=float)
    dim = ref.shape[-1]
    bits = vertex_bits(dim)
    r = ref[..., None, :]
    factors = np.where(bits > 0, r, 1.0 - r)
    values = np.prod(factors, axis=-1)
    grads = []
    signs = 2.0 * bits - 1.0
    for axis in range(dim):
        others = np.prod(np.delete(factors, axis, axis=-1), axis=-1)
        grads.append(signs[:, axis] * others / h[axis])
    return values, np.stack(grads, axis=-1)


def lagrange_shape(element: Element, j: int, x: Sequence[float]) -> float:
    """
    单元 element 上顶点 j 的 Lagrange 形函数在 x 处的值

    顶点 j 的第 a 位二进制表示 a 轴取高侧
    """
    n_vertices = 2 ** element.dim
    if not 0 <= j < n_vertices:
        raise BasisError(f"顶点编号 {j} 超出范围 [0, {n_vertices})")
    ref = (np.asarray(x, dtype=float) - element.lower) / element.h
    values, _ = shape_functions(ref, element.h)
    return float(values[j])


class DirectionSet:
    """
    每个单元、每个节点上的射线方向集合

    anchors/speeds 给出相位锚点 x̂_{l,K} 与 c(x̂_{l,K})
    """

    def __init__(self, directions: List[List[np.ndarray]], anchors: np.ndarray, speeds: np.ndarray):
        anchors = np.asarray(anchors, dtype=float)
        speeds = np.asarray(speeds, dtype=float)
        if len(directions) != anchors.shape[0]:
            raise BasisError(f"方向集单元数 {len(directions)} 与锚点数 {anchors.shape[0]} 不符")
        self.dim = anchors.shape[-1]
        self.anchors = anchors
        self.speeds = speeds
        self.directions: List[List[np.ndarray]] = []
        for k, per_element in enumerate(directions):
            if len(per_element) != anchors.shape[1]:
                raise BasisError(f"单元 {k} 的节点数 {len(per_element)} 与锚点不符")
            normalized = []
            for vectors in per_element:
                vectors = np.atleast_2d(np.asarray(vectors, dtype=float)).reshape(-1, self.dim)
                norms = np.linalg.norm(vectors, axis=1, keepdims=True)
                if np.any(norms == 0) or np.any(~np.isfinite(norms)):
                    raise BasisError(f"单元 {k} 含零长度或非有限方向")
                normalized.append(vectors / norms)
            self.directions.append(normalized)

    @classmethod
    def from_lists(cls, mesh: Mesh, directions: List[List[np.ndarray]], ws: WaveSpeed) -> 'DirectionSet':
        anchors = mesh.nodal_points
        return cls(directions, anchors, ws(anchors))

    @classmethod
    def uniform(cls, mesh: Mesh, vectors, ws: WaveSpeed) -> 'DirectionSet':
        """所有单元、所有节点使用同一组方向"""
        vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
        L = mesh.nodal_rule.count
        return cls.from_lists(mesh, [[vectors] * L for _ in range(mesh.n_elements)], ws)

    @property
    def n_elements(self) -> int:
        return len(self.directions)

    @property
    def n_nodal(self) -> int:
        return self.anchors.shape[1]

    def pair_count(self, element: int) -> int:
        return int(sum(len(v) for v in self.directions[element]))

    def counts(self) -> np.ndarray:
        return np.array([self.pair_count(k) for k in range(self.n_elements)], dtype=np.int64)

    def flat(self, element: int) -> np.ndarray:
        """单元内所有方向按节点拼接 (n, d)"""
        return np.concatenate(self.directions[element], axis=0)

    def with_directions(self, directions: List[List[np.ndarray]]) -> 'DirectionSet':
        return DirectionSet(directions, self.anchors, self.speeds)

    def __repr__(self):
        counts = self.counts()
        return f"DirectionSet(elements={self.n_elements}, L={self.n_nodal}, pairs={counts.min()}..{counts.max()})"


def save_directions(path: str, dirs: DirectionSet):
    """
    写方向文件：每行 'elem l d_1 ... d_d'
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for k, per_element in enumerate(dirs.directions):
            for l, vectors in enumerate(per_element):
                for d in vectors:
                    f.write(f"{k} {l} " + ' '.join(f"{v:.17g}" for v in d) + '\n')


def load_directions(path: str, mesh: Mesh, ws: WaveSpeed) -> DirectionSet:
    """
    读取方向文件

    Args:
        path: 文件路径
        mesh: 方向对应的网格（决定单元数和节点）
        ws: 波速（锚点处取值）

    Returns:
        DirectionSet
    """
    L = mesh.nodal_rule.count
    buckets = [[[] for _ in range(L)] for _ in range(mesh.n_elements)]
    try:
        with open(path, 'r', encoding='utf-8') as f:
            for line_no, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith('#'):
                    continue
                parts = line.split()
                if len(parts) != 2 + mesh.dim:
                    raise BasisError(f"{path}:{line_no} 字段数应为 {2 + mesh.dim}")
                k, l = int(parts[0]), int(parts[1])
                if not (0 <= k < mesh.n_elements and 0 <= l < L):
                    raise BasisError(f"{path}:{line_no} 单元/节点编号越界: {k} {l}")
                buckets[k][l].append([float(v) for v in parts[2:]])
    except OSError as e:
        raise BasisError(f"无法读取方向文件 {path}: {e}")
    for k, per_element in enumerate(buckets):
        if not any(per_element):
            raise BasisError(f"方向文件 {path} 缺少单元 {k} 的方向")
    lists = []
    for per_element in buckets:
        # 缺方向的节点沿用同单元其它节点的方向
        fallback = next(v for v in per_element if v)
        lists.append([np.array(v if v else fallback) for v in per_element])
    return DirectionSet.from_lists(mesh, lists, ws)


@dataclass(frozen=True)
class RayBasisFunction:
    """单个射线基函数 φ_j(x) exp(i ω/c(x̂) d·(x - x̂))"""

    element: int
    vertex: int
    nodal: int
    direction: np.ndarray
    anchor: np.ndarray
    speed: float
    dof: int
    lower: np.ndarray
    h: np.ndarray


def eval_basis(b: RayBasisFunction, omega: float, x: Sequence[float]) -> Tuple[complex, np.ndarray]:
    """
    基函数值与梯度

    Returns:
        (value, gradient)，gradient = (∇φ_j + i ω/c d φ_j) e^{iωφ̂}
    """
    x = np.asarray(x, dtype=float)
    ref = (x - b.lower) / b.h
    phi, grad_phi = shape_functions(ref, b.h)
    k = omega / b.speed
    phase = np.exp(1j * k * np.dot(b.direction, x - b.anchor))
    value = phi[b.vertex] * phase
    gradient = (grad_phi[b.vertex] + 1j * k * b.direction * phi[b.vertex]) * phase
    return complex(value), gradient


class BasisTable:
    """
    全局射线 DG 空间

    自由度按 单元 → (节点, 方向) 对 → 顶点 的顺序连续编号；
    各单元的对数不同时按最大值填充，空槽位 dof_ids = -1
    """

    def __init__(self, mesh: Mesh, omega: float, pair_dir: np.ndarray, pair_anchor: np.ndarray,
                 pair_k: np.ndarray, pair_mask: np.ndarray, pair_nodal: np.ndarray):
        self.mesh = mesh
        self.omega = float(omega)
        self.dim = mesh.dim
        self.n_vertices = 2 ** mesh.dim
        self.pair_dir = pair_dir
        self.pair_anchor = pair_anchor
        self.pair_k = pair_k
        self.pair_mask = pair_mask
        self.pair_nodal = pair_nodal
        self.max_pairs = pair_dir.shape[1]
        self.local_size = self.max_pairs * self.n_vertices

        self.local_mask = np.repeat(pair_mask, self.n_vertices, axis=1)
        flat_mask = self.local_mask.ravel()
        ids = np.full(flat_mask.shape, -1, dtype=np.int64)
        ids[flat_mask] = np.arange(int(flat_mask.sum()), dtype=np.int64)
        self.dof_ids = ids.reshape(self.local_mask.shape)
        self.n_dof = int(flat_mask.sum())

        local = np.arange(self.local_size)
        self.local_vertex = local % self.n_vertices
        self.local_pair = local // self.n_vertices

    def evaluate(self, elements: np.ndarray, ref: np.ndarray):
        """
        在参考坐标处计算一批单元的全部局部基函数

        Args:
            elements: 单元编号 (m,)
            ref: 参考坐标 (Q, d) 或 (m, Q, d)

        Returns:
            (values (m, Q, nb), gradients (m, Q, nb, d), points (m, Q, d))，空槽位为 0
        """
        mesh = self.mesh
        elements = np.asarray(elements, dtype=np.int64)
        ref = np.asarray(ref, dtype=float)
        if ref.ndim == 2:
            ref = np.broadcast_to(ref, (len(elements),) + ref.shape)
        points = mesh.element_lower[elements][:, None, :] + ref * mesh.h
        phi, grad_phi = shape_functions(ref, mesh.h)

        diff = points[:, :, None, :] - self.pair_anchor[elements][:, None, :, :]
        k = self.pair_k[elements]
        dirs = self.pair_dir[elements]
        theta = k[:, None, :] * np.einsum('mqpd,mpd->mqp', diff, dirs)
        wave = np.exp(1j * theta) * self.pair_mask[elements][:, None, :]

        m, q = points.shape[:2]
        values = wave[..., :, None] * phi[:, :, None, :]
        kd = (k[..., None] * dirs)[:, None, :, None, :]
        gradients = wave[..., None, None] * (grad_phi[:, :, None, :, :] + 1j * kd * phi[:, :, None, :, None])
        return (values.reshape(m, q, self.local_size),
                gradients.reshape(m, q, self.local_size, self.dim),
                points)

    def basis_function(self, dof: int) -> RayBasisFunction:
        hits = np.argwhere(self.dof_ids == dof)
        if len(hits) == 0:
            raise BasisError(f"自由度编号越界: {dof}")
        element, local = hits[0]
        p = local // self.n_vertices
        mesh = self.mesh
        k = self.pair_k[element, p]
        return RayBasisFunction(
            element=int(element), vertex=int(local % self.n_vertices), nodal=int(self.pair_nodal[element, p]),
            direction=self.pair_dir[element, p].copy(), anchor=self.pair_anchor[element, p].copy(),
            speed=float(self.omega / k) if k > 0 else float('inf'), dof=int(dof),
            lower=mesh.element_lower[element].copy(), h=mesh.h.copy(),
        )

    def element_dofs(self, element: int) -> np.ndarray:
        ids = self.dof_ids[element]
        return ids[ids >= 0]

    def dof_vertex_index(self) -> np.ndarray:
        """每个自由度对应的全局顶点多重指标 (n_dof, d)"""
        bits = vertex_bits(self.dim).astype(np.int64)
        multi = self.mesh.multi_index[:, None, :] + bits[self.local_vertex][None, :, :]
        return multi[self.local_mask]

    def __repr__(self):
        return f"BasisTable(n_dof={self.n_dof}, elements={self.mesh.n_elements}, pairs<={self.max_pairs})"


def build_space(mesh: Mesh, dirs: DirectionSet, omega: float) -> BasisTable:
    """
    构建射线 DG 空间

    Args:
        mesh: 网格
        dirs: 每个单元的方向集合（须覆盖全部单元）
        omega: 频率

    Returns:
        BasisTable
    """
    logger = Logger().get_logger()
    if dirs.n_elements != mesh.n_elements:
        raise BasisError(f"方向集覆盖 {dirs.n_elements} 个单元，网格有 {mesh.n_elements} 个")
    counts = dirs.counts()
    if np.any(counts == 0):
        raise BasisError(f"单元 {int(np.argmin(counts))} 没有射线方向")
    P = int(counts.max())
    NE = mesh.n_elements
    d = mesh.dim
    pair_dir = np.zeros((NE, P, d))
    pair_dir[..., 0] = 1.0
    pair_anchor = np.repeat(mesh.element_center[:, None, :], P, axis=1).copy()
    pair_k = np.zeros((NE, P))
    pair_mask = np.zeros((NE, P), dtype=bool)
    pair_nodal = np.zeros((NE, P), dtype=np.int64)

    uniform_count = np.all(counts == P) and all(
        len(v) == len(dirs.directions[0][l]) for per in dirs.directions for l, v in enumerate(per)
    )
    if uniform_count:
        lens = [len(v) for v in dirs.directions[0]]
        nodal_of_pair = np.repeat(np.arange(dirs.n_nodal), lens)
        pair_dir[:] = np.stack([dirs.flat(k) for k in range(NE)])
        pair_anchor[:] = dirs.anchors[:, nodal_of_pair, :]
        pair_k[:] = omega / dirs.speeds[:, nodal_of_pair]
        pair_mask[:] = True
        pair_nodal[:] = nodal_of_pair
    else:
        for k in range(NE):
            p = 0
            for l, vectors in enumerate(dirs.directions[k]):
                n = len(vectors)
                pair_dir[k, p:p + n] = vectors
                pair_anchor[k, p:p + n] = dirs.anchors[k, l]
                pair_k[k, p:p + n] = omega / dirs.speeds[k, l]
                pair_mask[k, p:p + n] = True
                pair_nodal[k, p:p + n] = l
                p += n

    if P > 1:
        gram = np.einsum('kpd,kqd->kpq', pair_dir, pair_dir)
        both = pair_mask[:, :, None] & pair_mask[:, None, :] & ~np.eye(P, dtype=bool)[None]
        close = both & (gram > np.cos(NEAR_PARALLEL_ANGLE))
        n_close = int(np.any(close, axis=(1, 2)).sum())
        if n_close:
            logger.warning(f"⚠️ {n_close} 个单元含近乎平行的射线方向（夹角 < {NEAR_PARALLEL_ANGLE} rad），系统可能病态")

    table = BasisTable(mesh, omega, pair_dir, pair_anchor, pair_k, pair_mask, pair_nodal)
    logger.debug(f"射线空间: {table.n_dof} 个自由度, 每单元最多 {P} 个方向对")
    return table


def polynomial_space(mesh: Mesh) -> BasisTable:
    """标准 IPDG 使用的零相位（纯双/三线性）空间"""
    NE = mesh.n_elements
    pair_dir = np.zeros((NE, 1, mesh.dim))
    pair_dir[..., 0] = 1.0
    table = BasisTable(mesh, 0.0, pair_dir, mesh.element_center[:, None, :].copy(),
                       np.zeros((NE, 1)), np.ones((NE, 1), dtype=bool), np.zeros((NE, 1), dtype=np.int64))
    Logger().get_logger().debug(f"多项式空间: {table.n_dof} 个自由度")
    return table


def interior_subspace_mask(table: BasisTable) -> np.ndarray:
    """
    每个自由度是否属于 V_H°（Lagrange 因子在 ∂Ω 上恒为零）

    顶点落在计算区域边界上的自由度为 False
    """
    multi = table.dof_vertex_index()
    cells = table.mesh.cells
    on_boundary = np.any((multi == 0) | (multi == cells), axis=1)
    return ~on_boundary


class DGSolution:
    """系数向量 + 空间，可在任意点求值"""

    def __init__(self, table: BasisTable, coefficients: np.ndarray):
        coefficients = np.asarray(coefficients, dtype=complex)
        if coefficients.shape != (table.n_dof,):
            raise BasisError(f"系数长度 {coefficients.shape} 与自由度数 {table.n_dof} 不符")
        self.table = table
        self.coefficients = coefficients
        padded = np.concatenate([coefficients, [0.0]])
        self._local = padded[table.dof_ids]

    @property
    def mesh(self) -> Mesh:
        return self.table.mesh

    def local_coefficients(self, elements: np.ndarray) -> np.ndarray:
        return self._local[elements]

    def _evaluate(self, points: np.ndarray, with_gradient: bool):
        points = np.asarray(points, dtype=float)
        shape = points.shape[:-1]
        flat = points.reshape(-1, self.mesh.dim)
        elements = self.mesh.locate_points(flat)
        ref = self.mesh.reference_coordinates(flat, elements)
        values, grads, _ = self.table.evaluate(elements, ref[:, None, :])
        coef = self._local[elements]
        u = np.einsum('mqb,mb->mq', values, coef)[:, 0]
        if not with_gradient:
            return u.reshape(shape)
        g = np.einsum('mqbd,mb->mqd', grads, coef)[:, 0]
        return u.reshape(shape), g.reshape(shape + (self.mesh.dim,))

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """任意点处的值；共享面上的点取编号较小单元的迹"""
        return self._evaluate(points, False)

    def gradient(self, points: np.ndarray) -> np.ndarray:
        return self._evaluate(points, True)[1]

    def __call__(self, points):
        return self.evaluate(points)

    def on_elements(self, elements: np.ndarray, ref: np.ndarray):
        """指定单元、参考坐标处的值与梯度（不做点定位）"""
        values, grads, points = self.table.evaluate(elements, ref)
        coef = self._local[elements]
        return (np.einsum('mqb,mb->mq', values, coef),
                np.einsum('mqbd,mb->mqd', grads, coef), points)

    def nodes(self) -> Tuple[np.ndarray, np.ndarray]:
        """网格顶点上的值 (points, values)"""
        points = node_grid(self.mesh)
        return points, self.evaluate(points)

    def fine_samples(self, n_fine: int) -> np.ndarray:
        """每个单元 n_fine^d 个细格中心处的值 (N_E, n_fine,...)，轴顺序 (x, y[, z])"""
        mesh = self.mesh
        ref = cell_center_grid(np.zeros(mesh.dim), np.ones(mesh.dim), n_fine)
        ref_flat = np.stack([ref[..., a].ravel(order='F') for a in range(mesh.dim)], axis=-1)
        values, _, _ = self.on_elements(np.arange(mesh.n_elements), ref_flat)
        # 扁平顺序 x 最快，C 序 reshape 后轴为 (z, y, x)，再翻转
        out = values.reshape((mesh.n_elements,) + (n_fine,) * mesh.dim)
        return np.transpose(out, (0,) + tuple(range(mesh.dim, 0, -1)))

    def sample_box(self, lower: np.ndarray, size: np.ndarray, n: int) -> np.ndarray:
        """盒子内 n^d 个格心处的值，形状 (n,)*d"""
        return self.evaluate(cell_center_grid(np.asarray(lower, dtype=float), np.asarray(size, dtype=float), n))


def expand_coefficients(values: np.ndarray, active: Optional[np.ndarray], n_dof: int) -> np.ndarray:
    """把受限子空间上的解扩回完整自由度（其余为 0）"""
    if active is None:
        return np.asarray(values, dtype=complex)
    full = np.zeros(n_dof, dtype=complex)
    full[active] = values
    return full
