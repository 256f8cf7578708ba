"""
射线学习模块
合成平面波训练样本、网络训练、逐单元方向提取（网络 / 暴力拟合 / 解析三种后端）、
SVD 方向剪枝与方向误差
"""

import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, NonFiniteError, RayIPDGError, TrainingDivergedError
from .fields import ReferenceField, WaveSpeed
from .mesh import Mesh, cell_center_grid
from .neural_net import AdaMax, Network, loss_gradient, loss_value
from .ray_basis import DGSolution, DirectionSet, shape_functions
from .solver import dense_svd, singular_energies
from .utils import Logger, chunk_ranges, parallel_map


SAMPLES_MAGIC = b"HRSC1"
QUIET_ZONE = 1e-8
MERGE_ANGLE = np.deg2rad(10.0)
ANTIPODAL_TIE = 1e-8
MAX_ORACLE_DIRECTIONS = 8
ORACLE_AMPLITUDE_FLOOR = 0.1
FLAT_SCORE = 1e-3
BACKENDS = ('nn', 'oracle', 'exact')


def normalize_rows(vectors: np.ndarray) -> np.ndarray:
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    return vectors / np.linalg.norm(vectors, axis=-1, keepdims=True)


def sort_directions(vectors: np.ndarray) -> np.ndarray:
    """
    训练目标的确定顺序：2D 按 atan2 升序，3D 按字典序
    """
    vectors = np.atleast_2d(vectors)
    if vectors.shape[1] == 2:
        order = np.argsort(np.arctan2(vectors[:, 1], vectors[:, 0]), kind='stable')
    else:
        order = np.lexsort(vectors.T[::-1])
    return vectors[order]


def random_directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """单位圆/球面上均匀分布的方向"""
    if dim == 2:
        theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
        return np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    return normalize_rows(rng.standard_normal((count, dim)))


def plane_wave_patch(points: np.ndarray, directions: np.ndarray, nodal_amplitudes: np.ndarray,
                     sigma: float, anchor: np.ndarray, H: float) -> np.ndarray:
    """
    单元 [0,H]^d 上的平面波叠加 Σ_j A_j(x) exp(iσ d_j·(x - x̂))

    Args:
        points: 采样点 (..., d)
        directions: (N, d)
        nodal_amplitudes: 每个方向在 2^d 个顶点处的振幅 (N, 2^d)，A_j 为双/三线性插值
        sigma: 波数
        anchor: 相位锚点 x̂
        H: 单元尺寸

    Returns:
        复数场值 (...)
    """
    points = np.asarray(points, dtype=float)
    dim = points.shape[-1]
    phi, _ = shape_functions(points / H, np.full(dim, H))
    amplitude = phi @ np.asarray(nodal_amplitudes, dtype=float).T
    phase = np.exp(1j * sigma * ((points - anchor) @ np.asarray(directions, dtype=float).T))
    return np.sum(amplitude * phase, axis=-1)


def patch_to_input(patches: np.ndarray) -> np.ndarray:
    """
    复数块 (M, n, ...) 按最大模归一化后拆成实部/虚部两个通道 (M, 2, n, ...)

    全零块保持为零
    """
    patches = np.asarray(patches, dtype=complex)
    axes = tuple(range(1, patches.ndim))
    scale = np.max(np.abs(patches), axis=axes, keepdims=True)
    scaled = patches / np.where(scale > 0, scale, 1.0)
    return np.stack([scaled.real, scaled.imag], axis=1)


# ---------------------------------------------------------------------------
# 训练样本
# ---------------------------------------------------------------------------

@dataclass
class SampleSet:
    """
    训练样本集

    inputs (N_s, 2, n_f...)，targets (N_s, d·N) 为排序后的单位方向
    """

    inputs: np.ndarray
    targets: np.ndarray
    anchors: np.ndarray
    wavenumbers: np.ndarray
    amplitudes: np.ndarray
    n_directions: int
    dim: int
    n_fine: int
    omega_tilde: float
    delta_freq: float
    H: float
    seed: int

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, index: np.ndarray) -> 'SampleSet':
        return SampleSet(self.inputs[index], self.targets[index], self.anchors[index],
                         self.wavenumbers[index], self.amplitudes[index], self.n_directions,
                         self.dim, self.n_fine, self.omega_tilde, self.delta_freq, self.H, self.seed)


def generate_samples(seed: int, count: int, n_directions: int, omega_tilde: float, delta_freq: float,
                     H: float, n_fine: int, dim: int = 2, min_distinct: Optional[int] = None) -> SampleSet:
    """
    生成平面波训练样本

    Args:
        seed: 随机种子
        count: 样本数 N_s
        n_directions: 每个样本的目标方向数 N
        omega_tilde: 中心波数 ω̃
        delta_freq: 波数半宽，σ ~ U[ω̃-δ, ω̃+δ)
        H: 单元尺寸
        n_fine: 每轴采样数
        dim: 空间维数
        min_distinct: 最少不同方向数（不足 N 时目标按重复填充），默认等于 N

    Returns:
        SampleSet
    """
    logger = Logger().get_logger()
    if count < 1:
        raise ConfigError(f"样本数必须 >= 1，得到 {count}")
    if not 0 <= delta_freq < omega_tilde:
        raise ConfigError(f"需要 0 <= delta_freq < omega_tilde，得到 {delta_freq} / {omega_tilde}")
    min_distinct = n_directions if min_distinct is None else int(min_distinct)
    if not 1 <= min_distinct <= n_directions:
        raise ConfigError(f"min_distinct 必须在 [1, {n_directions}] 内，得到 {min_distinct}")

    rng = np.random.default_rng(seed)
    nv = 2 ** dim
    sigma = rng.uniform(omega_tilde - delta_freq, omega_tilde + delta_freq, size=count)
    anchors = rng.uniform(0.0, H, size=(count, dim))
    distinct = rng.integers(min_distinct, n_directions + 1, size=count)
    raw = random_directions(rng, count * n_directions, dim).reshape(count, n_directions, dim)
    amplitudes = rng.uniform(0.5, 1.5, size=(count, n_directions, nv))
    amplitudes[np.arange(n_directions)[None, :] >= distinct[:, None]] = 0.0

    targets = np.empty((count, n_directions, dim))
    for s in range(count):
        m = int(distinct[s])
        padded = raw[s, np.arange(n_directions) % m]
        targets[s] = sort_directions(padded)

    grid = cell_center_grid(np.zeros(dim), np.full(dim, H), n_fine)
    points = grid.reshape(-1, dim)
    patches = np.empty((count, points.shape[0]), dtype=complex)
    for s in range(count):
        patches[s] = plane_wave_patch(points, raw[s], amplitudes[s], sigma[s], anchors[s], H)
    patches = patches.reshape((count,) + (n_fine,) * dim)

    samples = SampleSet(
        inputs=patch_to_input(patches),
        targets=targets.reshape(count, -1),
        anchors=anchors,
        wavenumbers=sigma,
        amplitudes=amplitudes,
        n_directions=n_directions,
        dim=dim,
        n_fine=n_fine,
        omega_tilde=float(omega_tilde),
        delta_freq=float(delta_freq),
        H=float(H),
        seed=int(seed),
    )
    logger.info(f"✅ 生成训练样本 {count} 个 (N={n_directions}, σ∈[{omega_tilde - delta_freq:.4g}, "
                f"{omega_tilde + delta_freq:.4g}), n_f={n_fine})")
    return samples


def save_samples(path: str, samples: SampleSet):
    """
    样本缓存文件

    头部 (N_s, N, d, n_f, ω̃, δ, H, seed)，随后依次为 inputs / targets / anchors /
    wavenumbers / amplitudes 的小端 float64 数据
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(SAMPLES_MAGIC)
        f.write(struct.pack('<IIIIdddQ', len(samples), samples.n_directions, samples.dim, samples.n_fine,
                            samples.omega_tilde, samples.delta_freq, samples.H, samples.seed))
        for array in (samples.inputs, samples.targets, samples.anchors, samples.wavenumbers, samples.amplitudes):
            f.write(np.ascontiguousarray(array, dtype='<f8').tobytes())


def load_samples(path: str) -> SampleSet:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise RayIPDGError(f"无法读取样本文件 {path}: {e}")
    if not data.startswith(SAMPLES_MAGIC):
        raise RayIPDGError(f"{path} 不是样本文件（缺少 {SAMPLES_MAGIC!r} 标记）")
    header = struct.Struct('<IIIIdddQ')
    count, n_dirs, dim, n_fine, omega_tilde, delta_freq, H, seed = header.unpack_from(data, len(SAMPLES_MAGIC))
    offset = len(SAMPLES_MAGIC) + header.size
    shapes = [
        (count, 2) + (n_fine,) * dim,
        (count, dim * n_dirs),
        (count, dim),
        (count,),
        (count, n_dirs, 2 ** dim),
    ]
    arrays = []
    for shape in shapes:
        size = int(np.prod(shape))
        if offset + 8 * size > len(data):
            raise RayIPDGError(f"样本文件 {path} 被截断")
        arrays.append(np.frombuffer(data, dtype='<f8', count=size, offset=offset).reshape(shape).copy())
        offset += 8 * size
    return SampleSet(*arrays, n_directions=n_dirs, dim=dim, n_fine=n_fine, omega_tilde=omega_tilde,
                     delta_freq=delta_freq, H=H, seed=seed)


# ---------------------------------------------------------------------------
# 训练
# ---------------------------------------------------------------------------

@dataclass
class TrainingConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.002
    patience: int = 20
    validation_fraction: float = 0.1
    loss: str = 'mse_norm1'
    seed: int = 0


@dataclass
class TrainingHistory:
    """每轮训练/验证损失；best 为截至该轮的最优选择损失（单调不增）"""

    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    best: List[float] = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self) -> Dict:
        return {'train_loss': self.train_loss, 'val_loss': self.val_loss,
                'best': self.best, 'best_epoch': self.best_epoch}


def train(net: Network, samples: SampleSet, cfg: Optional[TrainingConfig] = None) -> Tuple[Network, TrainingHistory]:
    """
    AdaMax 小批量训练，按验证损失保留最优参数

    Args:
        net: 待训练网络（原地更新）
        samples: 训练样本
        cfg: 训练配置

    Returns:
        (训练后的网络, 损失历史)

    Raises:
        TrainingDivergedError: 损失出现 NaN/Inf
    """
    logger = Logger().get_logger()
    cfg = cfg or TrainingConfig()
    history = TrainingHistory()
    if len(samples) == 0:
        raise ConfigError("训练样本为空")
    if samples.dim != net.dim or samples.n_fine != net.n_fine or samples.n_directions != net.n_directions:
        raise ConfigError(
            f"样本 (d={samples.dim}, n_f={samples.n_fine}, N={samples.n_directions}) 与网络 "
            f"(d={net.dim}, n_f={net.n_fine}, N={net.n_directions}) 不匹配"
        )
    if cfg.epochs <= 0:
        return net, history

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(samples))
    n_val = int(round(cfg.validation_fraction * len(samples)))
    n_val = min(n_val, len(samples) - 1)
    val_index, train_index = order[:n_val], order[n_val:]
    x_train, y_train = samples.inputs[train_index], samples.targets[train_index]
    x_val, y_val = samples.inputs[val_index], samples.targets[val_index]

    optimizer = AdaMax(lr=cfg.learning_rate)
    best = np.inf
    best_state = net.snapshot()
    stale = 0
    report_every = max(1, cfg.epochs // 10)

    logger.info(f"开始训练: {len(train_index)} 训练 / {n_val} 验证, {cfg.epochs} 轮, 损失 {cfg.loss}")
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(train_index))
        for batch in chunk_ranges(len(perm), cfg.batch_size):
            idx = perm[batch.start:batch.stop]
            try:
                y_hat = net.forward(x_train[idx], training=True)
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"第 {epoch + 1} 轮前向传播发散 ({exc})，可尝试减小学习率") from exc
            batch_loss = loss_value(cfg.loss, y_train[idx], y_hat, net.dim)
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(f"第 {epoch + 1} 轮训练损失发散 ({batch_loss})，可尝试减小学习率")
            net.backward(loss_gradient(cfg.loss, y_train[idx], y_hat, net.dim))
            optimizer.step(net.parameters(), net.gradients())

        try:
            train_loss = loss_value(cfg.loss, y_train, net.predict(x_train), net.dim)
            val_loss = loss_value(cfg.loss, y_val, net.predict(x_val), net.dim) if n_val else train_loss
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"第 {epoch + 1} 轮损失发散 ({exc})") from exc
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingDivergedError(f"第 {epoch + 1} 轮损失发散 (train={train_loss}, val={val_loss})")
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        if val_loss < best:
            best = val_loss
            best_state = net.snapshot()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
        history.best.append(best)

        if (epoch + 1) % report_every == 0:
            logger.info(f"  轮 {epoch + 1}/{cfg.epochs}: train={train_loss:.4e}, val={val_loss:.4e}, best={best:.4e}")
        if cfg.patience and stale >= cfg.patience:
            logger.info(f"验证损失 {cfg.patience} 轮未改善，提前停止于第 {epoch + 1} 轮")
            break

    net.restore(best_state)
    logger.info(f"✅ 训练完成，最优轮次 {history.best_epoch + 1}，损失 {best:.4e}")
    return net, history


# ---------------------------------------------------------------------------
# 暴力拟合方向（oracle）
# ---------------------------------------------------------------------------

def icosphere(level: int) -> np.ndarray:
    """正二十面体细分 level 次得到的单位球面顶点"""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    vertices = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    vertices = [np.array(v, dtype=float) / np.linalg.norm(v) for v in vertices]
    for _ in range(level):
        midpoints: Dict[Tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoints:
                m = vertices[a] + vertices[b]
                vertices.append(m / np.linalg.norm(m))
                midpoints[key] = len(vertices) - 1
            return midpoints[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = refined
    return np.array(vertices)


def direction_grid(dim: int, resolution_deg: float = 1.0, level: int = 4) -> np.ndarray:
    """候选方向：2D 为等角度网格，3D 为细分二十面体顶点"""
    if dim == 2:
        theta = np.deg2rad(np.arange(0.0, 360.0, resolution_deg))
        return np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    return icosphere(level)


def _local_candidates(direction: np.ndarray, spread: float, count: int = 21) -> np.ndarray:
    offsets = np.linspace(-spread, spread, count)
    if direction.shape[0] == 2:
        theta = np.arctan2(direction[1], direction[0]) + offsets
        return np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    helper = np.eye(3)[np.argmin(np.abs(direction))]
    t1 = np.cross(direction, helper)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(direction, t1)
    small = np.linspace(-spread, spread, 11)
    a, b = np.meshgrid(small, small, indexing='ij')
    return normalize_rows(direction + a.reshape(-1, 1) * t1 + b.reshape(-1, 1) * t2)


@dataclass
class OracleResult:
    directions: np.ndarray
    amplitudes: np.ndarray
    residual: float
    confidence: float
    flat: bool = False


class _PlaneWaveFit:
    """固定采样点上的平面波最小二乘拟合"""

    def __init__(self, points: np.ndarray, anchor: np.ndarray, sigma: float, patch: np.ndarray):
        self.offsets = np.asarray(points, dtype=float) - np.asarray(anchor, dtype=float)
        self.sigma = sigma
        self.patch = np.asarray(patch, dtype=complex).ravel()
        self.norm = np.linalg.norm(self.patch)

    def columns(self, directions: np.ndarray) -> np.ndarray:
        return np.exp(1j * self.sigma * (self.offsets @ np.atleast_2d(directions).T))

    def fit(self, directions: Sequence[np.ndarray]):
        if len(directions) == 0:
            return np.zeros(0, dtype=complex), self.patch.copy()
        E = self.columns(np.array(directions))
        coef, *_ = np.linalg.lstsq(E, self.patch, rcond=None)
        return coef, self.patch - E @ coef

    def residual_norm(self, directions) -> float:
        return float(np.linalg.norm(self.fit(directions)[1]))


def oracle_directions(patch: np.ndarray, points: np.ndarray, anchor: np.ndarray, sigma: float, n: int,
                      resolution_deg: float = 1.0, max_directions: int = MAX_ORACLE_DIRECTIONS) -> OracleResult:
    """
    在方向网格上穷举拟合 Σ_j c_j exp(iσ d_j·(x - x̂))，逐个方向贪心匹配追踪

    Args:
        patch: 采样值 (M,)
        points: 采样点 (M, d)
        anchor: 相位锚点
        sigma: 局部波数
        n: 方向数上限
        resolution_deg: 2D 角度网格分辨率（度）
        max_directions: 允许的最大 n

    Returns:
        OracleResult；残差随方向几乎不变时 flat=True、confidence=0
    """
    if not 1 <= n <= max_directions:
        raise ConfigError(f"oracle 方向数必须在 [1, {max_directions}] 内，得到 {n}")
    points = np.atleast_2d(points)
    dim = points.shape[1]
    fitter = _PlaneWaveFit(points, anchor, sigma, patch)
    if fitter.norm == 0:
        raise RayIPDGError("oracle 输入块全为零")
    candidates = direction_grid(dim, resolution_deg)
    columns = fitter.columns(candidates)
    spread = np.deg2rad(resolution_deg) if dim == 2 else np.deg2rad(4.0)

    def best_candidate(residual, exclude):
        scores = np.abs(columns.conj().T @ residual) ** 2
        scores[list(exclude)] = -np.inf
        return int(np.argmax(scores)), scores

    chosen: List[np.ndarray] = []
    used: List[int] = []
    residual = fitter.patch
    flat = False
    for j in range(n):
        index, scores = best_candidate(residual, used)
        if j == 0:
            finite = scores[np.isfinite(scores)]
            flat = bool(finite.max() - finite.min() <= FLAT_SCORE * finite.max())
        chosen.append(candidates[index])
        used.append(index)
        _, residual = fitter.fit(chosen)
        if np.linalg.norm(residual) <= 1e-10 * fitter.norm:
            break

    if not flat:
        for _ in range(3):
            changed = False
            for j in range(len(chosen)):
                others = chosen[:j] + chosen[j + 1:]
                _, partial = fitter.fit(others)
                index, _ = best_candidate(partial, [])
                current = fitter.residual_norm(chosen)
                best = chosen[j]
                trial = others[:j] + [candidates[index]] + others[j:]
                if fitter.residual_norm(trial) < current:
                    best, current = candidates[index], fitter.residual_norm(trial)
                for width in (spread, spread / 10.0):
                    for candidate in _local_candidates(best, width):
                        trial = others[:j] + [candidate] + others[j:]
                        value = fitter.residual_norm(trial)
                        if value < current:
                            best, current = candidate, value
                if not np.allclose(best, chosen[j]):
                    chosen[j] = best
                    changed = True
            if not changed:
                break

    coef, residual = fitter.fit(chosen)
    magnitude = np.abs(coef)
    keep = magnitude >= ORACLE_AMPLITUDE_FLOOR * magnitude.max()
    directions = normalize_rows(np.array(chosen)[keep])
    coef = coef[keep]
    relative = float(np.linalg.norm(fitter.patch - fitter.columns(directions) @ coef) / fitter.norm)
    confidence = 0.0 if flat else float(np.clip(1.0 - relative, 0.0, 1.0))
    return OracleResult(directions, coef, relative, confidence, flat)


# ---------------------------------------------------------------------------
# SVD 剪枝与误差
# ---------------------------------------------------------------------------

@dataclass
class PruneResult:
    directions: np.ndarray
    energies: np.ndarray
    rank: int


def _merge_close(vectors: np.ndarray, weights: np.ndarray, angle: float) -> Tuple[np.ndarray, np.ndarray]:
    sums = [v * w for v, w in zip(vectors, weights)]
    counts = list(weights)
    while len(sums) > 1:
        reps = normalize_rows(np.array(sums))
        cosines = np.clip(reps @ reps.T, -1.0, 1.0)
        np.fill_diagonal(cosines, -np.inf)
        a, b = np.unravel_index(np.argmax(cosines), cosines.shape)
        if np.arccos(cosines[a, b]) >= angle:
            break
        a, b = min(a, b), max(a, b)
        sums[a] = sums[a] + sums[b]
        counts[a] += counts[b]
        del sums[b], counts[b]
    return normalize_rows(np.array(sums)), np.array(counts)


def svd_prune(directions: np.ndarray, threshold: float = 0.95, merge_angle: float = MERGE_ANGLE) -> PruneResult:
    """
    用奇异值能量去掉冗余方向

    Args:
        directions: 同一节点处的预测方向 (N, d)
        threshold: 累积能量阈值 τ
        merge_angle: 投影后夹角小于此值（弧度）的方向合并为归一化均值

    Returns:
        PruneResult(代表方向, 能量占比, 保留秩 k)
    """
    D = normalize_rows(directions)
    singular, vt = dense_svd(D)
    energies = singular_energies(singular)
    cumulative = np.cumsum(energies)
    rank = int(min(np.searchsorted(cumulative, threshold - 1e-12) + 1, len(energies)))
    if rank == 1:
        # 秩 1：按多数朝向取主轴；±d 完全平衡时两者都保留（驻波）
        lean = float(np.sum(D @ vt[0]))
        if abs(lean) > ANTIPODAL_TIE * len(D):
            return PruneResult(normalize_rows(np.sign(lean) * vt[0]), energies, rank)
    basis = vt[:rank]
    projected = D @ basis.T @ basis
    norms = np.linalg.norm(projected, axis=1)
    keep = norms > 1e-12
    if not np.any(keep):
        keep[:] = True
        projected = D
    representatives, _ = _merge_close(normalize_rows(projected[keep]), np.ones(int(keep.sum())), merge_angle)
    return PruneResult(representatives, energies, rank)


def _as_element_array(entry, dim: int) -> np.ndarray:
    if isinstance(entry, (list, tuple)):
        entry = [np.atleast_2d(v) for v in entry if np.size(v)]
        return np.concatenate(entry, axis=0) if entry else np.zeros((0, dim))
    return np.atleast_2d(np.asarray(entry, dtype=float)).reshape(-1, dim)


def direction_error(predicted: Sequence, reference: Sequence, dim: int = 2) -> float:
    """
    方向误差：单元内按最小代价匹配（欧氏距离），对全部匹配对取均方根

    未匹配的方向按距离 2 计
    """
    if len(predicted) != len(reference):
        raise RayIPDGError(f"单元数不一致: {len(predicted)} vs {len(reference)}")
    total = 0.0
    pairs = 0
    for p_entry, r_entry in zip(predicted, reference):
        p = _as_element_array(p_entry, dim)
        r = _as_element_array(r_entry, dim)
        unmatched = abs(len(p) - len(r))
        if len(p) and len(r):
            cost = np.sum((p[:, None, :] - r[None, :, :]) ** 2, axis=-1)
            rows, cols = linear_sum_assignment(cost)
            total += float(cost[rows, cols].sum())
        total += 4.0 * unmatched
        pairs += max(len(p), len(r))
    return float(np.sqrt(total / pairs)) if pairs else 0.0


def exact_directions(reference: ReferenceField, mesh: Mesh) -> List[List[np.ndarray]]:
    """参考场在每个单元每个节点处的解析射线方向"""
    return [[normalize_rows(reference.ray_directions(mesh.nodal_points[k, l]))
             for l in range(mesh.nodal_points.shape[1])]
            for k in range(mesh.n_elements)]


def rotation(dim: int, angle: float) -> np.ndarray:
    """2D 旋转；3D 为绕 z 轴旋转"""
    c, s = np.cos(angle), np.sin(angle)
    if dim == 2:
        return np.array([[c, -s], [s, c]])
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def perturb_directions(directions: List[List[np.ndarray]], angle: float) -> List[List[np.ndarray]]:
    """所有方向旋转固定角度（弧度）"""
    if not directions:
        return []
    dim = np.atleast_2d(directions[0][0]).shape[1]
    R = rotation(dim, angle)
    return [[np.atleast_2d(v) @ R.T for v in per_element] for per_element in directions]


# ---------------------------------------------------------------------------
# 方向提取
# ---------------------------------------------------------------------------

@dataclass
class ExtractionResult:
    """
    逐单元、逐节点的方向提取结果

    directions[k][l] 为单位方向 (n, d)，confidence 与之对应；
    low_confidence (N_E, L) 标记安静区或拟合退化的节点
    """

    directions: List[List[np.ndarray]]
    confidence: List[List[np.ndarray]]
    raw_counts: np.ndarray
    pruned_counts: np.ndarray
    energies: List[List[np.ndarray]]
    low_confidence: np.ndarray
    backend: str = 'nn'

    @property
    def n_elements(self) -> int:
        return len(self.directions)

    def to_direction_set(self, mesh: Mesh, ws: WaveSpeed) -> DirectionSet:
        return DirectionSet(self.directions, mesh.nodal_points, ws(clamp_to_physical(mesh, mesh.nodal_points)))

    def first_energy(self) -> np.ndarray:
        """每个节点第一奇异向量的能量占比"""
        return np.array([[e[0] if len(e) else 1.0 for e in per] for per in self.energies])

    def summary(self) -> Dict:
        first = self.first_energy()
        return {
            'backend': self.backend,
            'elements': self.n_elements,
            'raw_directions': int(self.raw_counts.sum()),
            'pruned_directions': int(self.pruned_counts.sum()),
            'max_per_node': int(self.pruned_counts.max()) if self.pruned_counts.size else 0,
            'mean_first_energy': float(first.mean()) if first.size else 1.0,
            'low_confidence_nodes': int(self.low_confidence.sum()),
        }


def clamp_to_physical(mesh: Mesh, points: np.ndarray) -> np.ndarray:
    return np.clip(points, mesh.physical_lower, mesh.physical_upper)


def patch_windows(mesh: Mesh) -> np.ndarray:
    """
    每个节点的采样窗口下角 (N_E, L, d)

    窗口大小等于单元尺寸、以节点为中心，平移到物理区域内
    """
    lower = mesh.nodal_points - 0.5 * mesh.h
    upper_bound = np.maximum(mesh.physical_upper - mesh.h, mesh.physical_lower)
    return np.clip(lower, mesh.physical_lower, upper_bound)


def sample_patches(solution: DGSolution, mesh: Mesh, n_fine: int, workers: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    在每个节点的窗口内采样低频解

    Args:
        solution: 低频 DG 解（覆盖整个计算区域）
        mesh: 粗网格（决定窗口与节点）
        n_fine: 每轴采样数
        workers: 线程数

    Returns:
        (patches (N_E, L, n_f...), points (N_E, L, n_f^d, d))
    """
    dim = mesh.dim
    ref = cell_center_grid(np.zeros(dim), np.ones(dim), n_fine).reshape(-1, dim)
    lower = patch_windows(mesh)
    points = lower[:, :, None, :] + ref[None, None, :, :] * mesh.h
    flat = points.reshape(-1, points.shape[2], dim)

    def work(block):
        return solution.evaluate(flat[block.start:block.stop])

    values = np.concatenate(parallel_map(work, chunk_ranges(flat.shape[0], 512), workers), axis=0)
    shape = mesh.nodal_points.shape[:2] + (n_fine,) * dim
    return values.reshape(shape), points


class DirectionExtractor:
    """
    逐单元方向提取

    backend:
        nn     - 网络推理（块按最大模归一化）
        oracle - 方向网格上的平面波拟合
        exact  - 参考场的解析方向
    """

    def __init__(self, backend: str, n_directions: int, ws: WaveSpeed, omega_tilde: float, n_fine: int,
                 net: Optional[Network] = None, reference: Optional[ReferenceField] = None,
                 svd_threshold: float = 0.95, prune: bool = True, oracle_resolution: float = 1.0,
                 workers: int = 1):
        if backend not in BACKENDS:
            raise ConfigError(f"未知方向后端: {backend}，可选: {', '.join(BACKENDS)}")
        if backend == 'nn' and net is None:
            raise ConfigError("nn 后端需要网络权重")
        if backend == 'exact' and reference is None:
            raise ConfigError("exact 后端需要解析参考场")
        if backend == 'nn' and (net.n_fine != n_fine or net.n_directions != n_directions):
            raise ConfigError(f"网络 (n_f={net.n_fine}, N={net.n_directions}) 与配置 "
                              f"(n_f={n_fine}, N={n_directions}) 不一致")
        self.backend = backend
        self.n_directions = n_directions
        self.ws = ws
        self.omega_tilde = omega_tilde
        self.n_fine = n_fine
        self.net = net
        self.reference = reference
        self.svd_threshold = svd_threshold
        self.prune = prune
        self.oracle_resolution = oracle_resolution
        self.workers = workers
        self.logger = Logger().get_logger()

    def extract(self, mesh: Mesh, solution: Optional[DGSolution] = None) -> ExtractionResult:
        """
        对粗网格每个单元每个节点提取方向

        Args:
            mesh: 粗网格
            solution: 低频解（nn / oracle 后端需要）
        """
        NE, L = mesh.nodal_points.shape[:2]
        if self.backend == 'exact':
            raw = exact_directions(self.reference, mesh)
            return self._finish(raw, [[np.ones(len(v)) for v in per] for per in raw],
                                np.zeros((NE, L), dtype=bool), prune=False)
        if solution is None:
            raise ConfigError(f"{self.backend} 后端需要低频解")
        patches, points = sample_patches(solution, mesh, self.n_fine, self.workers)
        return self.extract_patches(mesh, patches, points)

    def extract_patches(self, mesh: Mesh, patches: np.ndarray, points: np.ndarray) -> ExtractionResult:
        NE, L = patches.shape[:2]
        if not np.all(np.isfinite(patches)):
            raise NonFiniteError("低频解采样中出现 NaN/Inf")
        modulus = np.abs(patches).reshape(NE, L, -1).max(axis=-1)
        global_max = modulus.max()
        quiet = modulus < QUIET_ZONE * global_max if global_max > 0 else np.ones((NE, L), dtype=bool)
        if np.any(quiet):
            self.logger.warning(f"⚠️ {int(quiet.sum())} 个节点处于安静区，使用默认方向")

        if self.backend == 'nn':
            raw, conf = self._run_network(patches, mesh.dim)
            low = quiet.copy()
        else:
            raw, conf, low = self._run_oracle(mesh, patches, points, quiet)

        fallback = np.eye(mesh.dim)[:1]
        for k, l in zip(*np.nonzero(quiet)):
            raw[k][l] = fallback.copy()
            conf[k][l] = np.zeros(1)
        return self._finish(raw, conf, low | quiet)

    def _run_network(self, patches: np.ndarray, dim: int):
        NE, L = patches.shape[:2]
        inputs = patch_to_input(patches.reshape((NE * L,) + patches.shape[2:]))

        def work(block):
            return self.net.predict(inputs[block.start:block.stop])

        output = np.concatenate(parallel_map(work, chunk_ranges(NE * L, 256), self.workers), axis=0)
        vectors = output.reshape(NE, L, self.n_directions, dim)
        norms = np.linalg.norm(vectors, axis=-1)
        safe = np.where(norms > 0, norms, 1.0)[..., None]
        unit = np.where(norms[..., None] > 0, vectors / safe, np.eye(dim)[0])
        raw = [[unit[k, l] for l in range(L)] for k in range(NE)]
        conf = [[np.clip(norms[k, l], 0.0, 1.0) for l in range(L)] for k in range(NE)]
        return raw, conf

    def _run_oracle(self, mesh: Mesh, patches: np.ndarray, points: np.ndarray, quiet: np.ndarray):
        NE, L = patches.shape[:2]
        anchors = mesh.nodal_points
        sigma = self.omega_tilde / self.ws(clamp_to_physical(mesh, anchors.reshape(-1, mesh.dim))).reshape(NE, L)
        jobs = [(k, l) for k in range(NE) for l in range(L) if not quiet[k, l]]

        def work(job):
            k, l = job
            return oracle_directions(patches[k, l].ravel(), points[k, l], anchors[k, l], sigma[k, l],
                                     self.n_directions, self.oracle_resolution)

        results = parallel_map(work, jobs, self.workers)
        raw = [[None] * L for _ in range(NE)]
        conf = [[None] * L for _ in range(NE)]
        low = np.zeros((NE, L), dtype=bool)
        for (k, l), result in zip(jobs, results):
            raw[k][l] = result.directions
            conf[k][l] = np.full(len(result.directions), result.confidence)
            low[k, l] = result.flat
        if np.any(low):
            self.logger.warning(f"⚠️ {int(low.sum())} 个节点的拟合残差几乎与方向无关，结果置信度低")
        return raw, conf, low

    def _finish(self, raw, conf, low, prune: Optional[bool] = None) -> ExtractionResult:
        prune = self.prune if prune is None else prune
        NE, L = len(raw), len(raw[0])
        raw_counts = np.array([[len(v) for v in per] for per in raw], dtype=np.int64)
        directions, confidence, energies = [], [], []
        for k in range(NE):
            dk, ck, ek = [], [], []
            for l in range(L):
                vectors = normalize_rows(raw[k][l])
                if prune and len(vectors) > 1:
                    pruned = svd_prune(vectors, self.svd_threshold)
                    dk.append(pruned.directions)
                    ck.append(np.full(len(pruned.directions), float(np.mean(conf[k][l]))))
                    ek.append(pruned.energies)
                else:
                    dk.append(vectors)
                    ck.append(np.asarray(conf[k][l], dtype=float))
                    ek.append(singular_energies(dense_svd(vectors)[0]))
            directions.append(dk)
            confidence.append(ck)
            energies.append(ek)
        pruned_counts = np.array([[len(v) for v in per] for per in directions], dtype=np.int64)
        result = ExtractionResult(directions, confidence, raw_counts, pruned_counts, energies, low, self.backend)
        self.logger.info(f"✅ 方向提取完成 ({self.backend}): {NE} 个单元, "
                         f"{int(raw_counts.sum())} → {int(pruned_counts.sum())} 个方向")
        return result


def extract_directions(net: Network, patches: np.ndarray, mesh: Mesh, ws: WaveSpeed, omega_tilde: float,
                       svd_threshold: float = 0.95, prune: bool = True, workers: int = 1) -> ExtractionResult:
    """网络后端的逐单元提取，patches 为 (N_E, L, n_f...) 的低频解采样"""
    extractor = DirectionExtractor('nn', net.n_directions, ws, omega_tilde, net.n_fine, net=net,
                                   svd_threshold=svd_threshold, prune=prune, workers=workers)
    dummy_points = np.zeros(patches.shape[:2] + (int(np.prod(patches.shape[2:])), mesh.dim))
    return extractor.extract_patches(mesh, patches, dummy_points)
