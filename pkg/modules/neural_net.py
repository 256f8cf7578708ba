"""
神经网络模块
卷积 / 批归一化 / 最大池化 / 展平 / 全连接层及 ReLU，反向传播，AdaMax 优化器，
两种损失函数（MSE 与 MSE+norm1），以及权重文件读写
"""

import os
import struct
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import NetworkStateError, NonFiniteError, RayIPDGError
from .utils import Logger


WEIGHTS_MAGIC = b"HRNN1"
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def _glorot(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """层基类：params/grads 为同名数组字典"""

    tag = b'NONE'

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False, store: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise NetworkStateError(f"{self.__class__.__name__}.backward 在 forward 之前调用")
        return self._cache

    def state_arrays(self) -> List[np.ndarray]:
        """写入权重文件的数组（顺序固定）"""
        return [self.params[k] for k in sorted(self.params)] + [self.buffers[k] for k in sorted(self.buffers)]

    def load_arrays(self, arrays: List[np.ndarray]):
        names = sorted(self.params) + sorted(self.buffers)
        for name, array in zip(names, arrays):
            target = self.params if name in self.params else self.buffers
            if target[name].shape != array.shape:
                raise RayIPDGError(f"{self.__class__.__name__}.{name} 形状不符: {array.shape} vs {target[name].shape}")
            target[name] = array.copy()


class ReLU(Layer):
    tag = b'RELU'

    def forward(self, x, training=False, store=True):
        if store:
            self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad):
        return grad * self._need_cache()


class Conv(Layer):
    """
    k=3、'same' 零填充的卷积，支持 2D/3D 空间维

    输入 (B, C_in, S...)，权重 (C_out, C_in, 3, ...)
    """

    tag = b'CONV'

    def __init__(self, in_channels: int, out_channels: int, dim: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.dim = dim
        kernel = (3,) * dim
        fan_in = in_channels * 3 ** dim
        fan_out = out_channels * 3 ** dim
        rng = rng or np.random.default_rng(0)
        self.params['W'] = _glorot(rng, (out_channels, in_channels) + kernel, fan_in, fan_out)
        self.params['b'] = np.zeros(out_channels)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _offsets(self):
        return list(np.ndindex(*((3,) * self.dim)))

    def _window(self, padded: np.ndarray, offset, spatial):
        return padded[(slice(None), slice(None)) + tuple(slice(o, o + s) for o, s in zip(offset, spatial))]

    def forward(self, x, training=False, store=True):
        spatial = x.shape[2:]
        pad = [(0, 0), (0, 0)] + [(1, 1)] * self.dim
        padded = np.pad(x, pad)
        W = self.params['W']
        out = np.zeros((x.shape[0], W.shape[0]) + spatial)
        for offset in self._offsets():
            out += np.einsum('bc...,oc->bo...', self._window(padded, offset, spatial), W[(slice(None), slice(None)) + offset])
        out += self.params['b'].reshape((1, -1) + (1,) * self.dim)
        if store:
            self._cache = padded
        return out

    def backward(self, grad):
        padded = self._need_cache()
        spatial = grad.shape[2:]
        W = self.params['W']
        d_padded = np.zeros_like(padded)
        dW = np.zeros_like(W)
        for offset in self._offsets():
            index = (slice(None), slice(None)) + offset
            window = self._window(padded, offset, spatial)
            dW[index] = np.einsum('bo...,bc...->oc', grad, window)
            d_window = np.einsum('bo...,oc->bc...', grad, W[index])
            d_padded[(slice(None), slice(None)) + tuple(slice(o, o + s) for o, s in zip(offset, spatial))] += d_window
        self.grads['W'] = dW
        self.grads['b'] = grad.sum(axis=(0,) + tuple(range(2, 2 + self.dim)))
        inner = (slice(None), slice(None)) + tuple(slice(1, -1) for _ in range(self.dim))
        return d_padded[inner]


class MaxPool(Layer):
    """2×(×2) 最大池化；空间尺寸小于 2 时为恒等映射"""

    tag = b'POOL'

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def _blocked(self, x):
        B, C = x.shape[:2]
        spatial = x.shape[2:]
        shape = (B, C) + sum(((s // 2, 2) for s in spatial), ())
        blocked = x[(slice(None), slice(None)) + tuple(slice(0, 2 * (s // 2)) for s in spatial)].reshape(shape)
        order = (0, 1) + tuple(2 + 2 * i for i in range(self.dim)) + tuple(3 + 2 * i for i in range(self.dim))
        blocked = blocked.transpose(order)
        return blocked.reshape(blocked.shape[:2 + self.dim] + (-1,))

    def forward(self, x, training=False, store=True):
        if min(x.shape[2:]) < 2:
            if store:
                self._cache = ('identity', x.shape)
            return x
        blocked = self._blocked(x)
        arg = np.argmax(blocked, axis=-1)
        out = np.take_along_axis(blocked, arg[..., None], axis=-1)[..., 0]
        if store:
            self._cache = ('pool', x.shape, arg)
        return out

    def backward(self, grad):
        cache = self._need_cache()
        if cache[0] == 'identity':
            return grad
        _, shape, arg = cache
        mask = np.zeros(arg.shape + (2 ** self.dim,))
        np.put_along_axis(mask, arg[..., None], 1.0, axis=-1)
        routed = mask * grad[..., None]
        B, C = shape[:2]
        half = tuple(s // 2 for s in shape[2:])
        routed = routed.reshape((B, C) + half + (2,) * self.dim)
        order = [0, 1]
        for i in range(self.dim):
            order += [2 + i, 2 + self.dim + i]
        routed = routed.transpose(order).reshape((B, C) + tuple(2 * h for h in half))
        out = np.zeros(shape)
        out[(slice(None), slice(None)) + tuple(slice(0, 2 * h) for h in half)] = routed
        return out


class BatchNorm(Layer):
    """按通道的批归一化（在 batch 与空间轴上统计）"""

    tag = b'BNRM'

    def __init__(self, channels: int, dim: int):
        super().__init__()
        self.dim = dim
        self.params['gamma'] = np.ones(channels)
        self.params['beta'] = np.zeros(channels)
        self.buffers['running_mean'] = np.zeros(channels)
        self.buffers['running_var'] = np.ones(channels)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _axes(self, x):
        return (0,) + tuple(range(2, x.ndim))

    def _shape(self, x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def forward(self, x, training=False, store=True):
        axes = self._axes(x)
        shape = self._shape(x)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.buffers['running_mean'] = BN_MOMENTUM * self.buffers['running_mean'] + (1 - BN_MOMENTUM) * mean
            self.buffers['running_var'] = BN_MOMENTUM * self.buffers['running_var'] + (1 - BN_MOMENTUM) * var
        else:
            mean = self.buffers['running_mean']
            var = self.buffers['running_var']
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        if store:
            self._cache = (x_hat, inv_std, training)
        return self.params['gamma'].reshape(shape) * x_hat + self.params['beta'].reshape(shape)

    def backward(self, grad):
        x_hat, inv_std, training = self._need_cache()
        axes = self._axes(grad)
        shape = self._shape(grad)
        self.grads['gamma'] = (grad * x_hat).sum(axis=axes)
        self.grads['beta'] = grad.sum(axis=axes)
        g = grad * self.params['gamma'].reshape(shape)
        if not training:
            return g * inv_std.reshape(shape)
        count = grad.size / grad.shape[1]
        mean_g = g.mean(axis=axes).reshape(shape)
        mean_gx = (g * x_hat).mean(axis=axes).reshape(shape)
        return inv_std.reshape(shape) * (g - mean_g - x_hat * mean_gx) if count > 0 else g


class Flatten(Layer):
    tag = b'FLAT'

    def forward(self, x, training=False, store=True):
        if store:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._need_cache())


class Dense(Layer):
    """全连接层 y = x Wᵀ + b"""

    tag = b'DENS'

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.params['W'] = _glorot(rng, (out_features, in_features), in_features, out_features)
        self.params['b'] = np.zeros(out_features)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x, training=False, store=True):
        if store:
            self._cache = x
        return x @ self.params['W'].T + self.params['b']

    def backward(self, grad):
        x = self._need_cache()
        self.grads['W'] = grad.T @ x
        self.grads['b'] = grad.sum(axis=0)
        return grad @ self.params['W']


LAYER_TYPES = {cls.tag: cls for cls in (ReLU, Conv, MaxPool, BatchNorm, Flatten, Dense)}


class Network:
    """
    顺序网络：若干 [BatchNorm → Conv → ReLU → MaxPool] 块，
    Flatten → Dense → ReLU → Dense（输出层无激活）
    """

    def __init__(self, layers: List[Layer], dim: int, n_fine: int, n_directions: int):
        self.layers = layers
        self.dim = dim
        self.n_fine = n_fine
        self.n_directions = n_directions
        self._has_cache = False

    @classmethod
    def build(cls, dim: int, n_fine: int, n_directions: int, channels: Sequence[int] = (16, 32, 64),
              hidden: int = 128, seed: int = 0) -> 'Network':
        """
        构建默认结构

        Args:
            dim: 空间维数
            n_fine: 输入块每轴采样数
            n_directions: 输出方向数 N（输出维 d·N）
            channels: 各卷积块输出通道数
            hidden: 隐藏全连接层宽度
            seed: 初始化随机种子
        """
        rng = np.random.default_rng(seed)
        layers: List[Layer] = []
        in_ch = 2
        size = n_fine
        for out_ch in channels:
            layers += [BatchNorm(in_ch, dim), Conv(in_ch, out_ch, dim, rng), ReLU()]
            if size >= 2:
                layers.append(MaxPool(dim))
                size //= 2
            in_ch = out_ch
        flat = in_ch * size ** dim
        layers += [Flatten(), Dense(flat, hidden, rng), ReLU(), Dense(hidden, dim * n_directions, rng)]
        return cls(layers, dim, n_fine, n_directions)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return (2,) + (self.n_fine,) * self.dim

    @property
    def output_size(self) -> int:
        return self.dim * self.n_directions

    def _check_input(self, x: np.ndarray):
        if x.ndim != 2 + self.dim or tuple(x.shape[1:]) != self.input_shape:
            raise RayIPDGError(f"输入形状 {x.shape[1:]} 与网络期望 {self.input_shape} 不符")

    @staticmethod
    def _trap(x: np.ndarray, where: str) -> np.ndarray:
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"{where} 出现 NaN/Inf")
        return x

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        """前向传播并缓存中间量（供 backward 使用）"""
        self._check_input(x)
        self._trap(x, "网络输入")
        for layer in self.layers:
            x = self._trap(layer.forward(x, training=training, store=True), layer.__class__.__name__)
        self._has_cache = True
        return x

    def predict(self, x: np.ndarray) -> np.ndarray:
        """推理模式前向，不写缓存，可并发调用"""
        self._check_input(x)
        self._trap(x, "网络输入")
        for layer in self.layers:
            x = self._trap(layer.forward(x, training=False, store=False), layer.__class__.__name__)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        """反向传播，参数梯度写入各层 grads"""
        if not self._has_cache:
            raise NetworkStateError("Network.backward 在 forward 之前调用")
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self) -> List[np.ndarray]:
        return [layer.params[k] for layer in self.layers for k in sorted(layer.params)]

    def gradients(self) -> List[np.ndarray]:
        return [layer.grads[k] for layer in self.layers for k in sorted(layer.params)]

    def set_parameters(self, values: List[np.ndarray]):
        i = 0
        for layer in self.layers:
            for k in sorted(layer.params):
                layer.params[k] = values[i]
                i += 1

    def snapshot(self) -> List[List[np.ndarray]]:
        """全部状态（参数 + BN 统计量）的拷贝"""
        return [[a.copy() for a in layer.state_arrays()] for layer in self.layers]

    def restore(self, snapshot: List[List[np.ndarray]]):
        for layer, arrays in zip(self.layers, snapshot):
            layer.load_arrays(arrays)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __repr__(self):
        names = '→'.join(layer.__class__.__name__ for layer in self.layers)
        return f"Network(dim={self.dim}, n_f={self.n_fine}, N={self.n_directions}, {names})"


def forward(net: Network, x: np.ndarray, training: bool = False) -> np.ndarray:
    return net.forward(x, training)


def backward(net: Network, x: np.ndarray, upstream: np.ndarray) -> List[np.ndarray]:
    """
    对输入 x 做前向（训练模式）再反向，返回参数梯度列表
    """
    net.forward(x, training=True)
    net.backward(upstream)
    return [g.copy() for g in net.gradients()]


class AdaMax:
    """
    AdaMax 优化器

    m ← β₁m + (1-β₁)g;  u ← max(β₂u, |g|);  θ ← θ - α/(1-β₁ᵗ) · m/u
    """

    def __init__(self, lr: float = 0.002, beta1: float = 0.9, beta2: float = 0.999, floor: float = 1e-12):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.floor = floor
        self.t = 0
        self.m: Optional[List[np.ndarray]] = None
        self.u: Optional[List[np.ndarray]] = None

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]):
        """原地更新参数"""
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.u = [np.zeros_like(p) for p in params]
        if len(params) != len(self.m):
            raise RayIPDGError("参数个数与优化器状态不符")
        self.t += 1
        scale = self.lr / (1.0 - self.beta1 ** self.t)
        for p, g, m, u in zip(params, grads, self.m, self.u):
            if p.shape != g.shape:
                raise RayIPDGError(f"梯度形状 {g.shape} 与参数 {p.shape} 不符")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            np.maximum(self.beta2 * u, np.abs(g), out=u)
            p -= scale * m / np.maximum(u, self.floor)


def adamax_step(state: AdaMax, params: List[np.ndarray], grads: List[np.ndarray]) -> List[np.ndarray]:
    state.step(params, grads)
    return params


# ---------------------------------------------------------------------------
# 损失函数
# ---------------------------------------------------------------------------

def loss_mse(y: np.ndarray, y_hat: np.ndarray) -> float:
    """批平均的平方欧氏距离"""
    return float(np.mean(np.sum((np.atleast_2d(y_hat) - np.atleast_2d(y)) ** 2, axis=1)))


def loss_mse_grad(y: np.ndarray, y_hat: np.ndarray) -> np.ndarray:
    y = np.atleast_2d(y)
    return 2.0 * (np.atleast_2d(y_hat) - y) / y.shape[0]


def _norm_terms(y, y_hat, dim):
    y = np.atleast_2d(y)
    y_hat = np.atleast_2d(y_hat)
    B = y.shape[0]
    yj = y.reshape(B, -1, dim)
    yhj = y_hat.reshape(B, -1, dim)
    diff = np.sum(yj ** 2, axis=-1) - np.sum(yhj ** 2, axis=-1)
    return diff, yhj, B


def loss_mse_norm1(y: np.ndarray, y_hat: np.ndarray, dim: int) -> float:
    """MSE 加上每个方向平方长度差的绝对值（批平均）"""
    diff, _, B = _norm_terms(y, y_hat, dim)
    return loss_mse(y, y_hat) + float(np.abs(diff).sum() / B)


def loss_mse_norm1_grad(y: np.ndarray, y_hat: np.ndarray, dim: int) -> np.ndarray:
    diff, yhj, B = _norm_terms(y, y_hat, dim)
    extra = -np.sign(diff)[..., None] * 2.0 * yhj / B
    return loss_mse_grad(y, y_hat) + extra.reshape(B, -1)


LOSS_KINDS = ('mse', 'mse_norm1')


def loss_value(kind: str, y: np.ndarray, y_hat: np.ndarray, dim: int) -> float:
    if kind == 'mse':
        return loss_mse(y, y_hat)
    if kind == 'mse_norm1':
        return loss_mse_norm1(y, y_hat, dim)
    raise RayIPDGError(f"未知损失函数: {kind}，可选: {', '.join(LOSS_KINDS)}")


def loss_gradient(kind: str, y: np.ndarray, y_hat: np.ndarray, dim: int) -> np.ndarray:
    if kind == 'mse':
        return loss_mse_grad(y, y_hat)
    if kind == 'mse_norm1':
        return loss_mse_norm1_grad(y, y_hat, dim)
    raise RayIPDGError(f"未知损失函数: {kind}，可选: {', '.join(LOSS_KINDS)}")


# ---------------------------------------------------------------------------
# 权重文件
# ---------------------------------------------------------------------------

def save_weights(path: str, net: Network):
    """
    写权重文件

    格式: 'HRNN1' | 头部 (dim, n_f, N, 层数) | 每层: 4 字节类型标记、数组个数、
    每个数组的维数与各维长度、小端 float64 数据
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack('<IIII', net.dim, net.n_fine, net.n_directions, len(net.layers)))
        for layer in net.layers:
            arrays = layer.state_arrays()
            f.write(layer.tag)
            f.write(struct.pack('<I', len(arrays)))
            for array in arrays:
                f.write(struct.pack('<I', array.ndim))
                f.write(struct.pack(f'<{array.ndim}I', *array.shape))
                f.write(np.ascontiguousarray(array, dtype='<f8').tobytes())
    Logger().get_logger().info(f"✅ 网络权重已保存: {path}")


def load_weights(path: str) -> Network:
    """读权重文件，重建网络结构"""
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise RayIPDGError(f"无法读取权重文件 {path}: {e}")
    if not data.startswith(WEIGHTS_MAGIC):
        raise RayIPDGError(f"{path} 不是权重文件（缺少 {WEIGHTS_MAGIC!r} 标记）")
    offset = len(WEIGHTS_MAGIC)

    def read(fmt):
        nonlocal offset
        values = struct.unpack_from(fmt, data, offset)
        offset += struct.calcsize(fmt)
        return values

    try:
        dim, n_fine, n_dirs, n_layers = read('<IIII')
        layers: List[Layer] = []
        for _ in range(n_layers):
            tag = data[offset:offset + 4]
            offset += 4
            (count,) = read('<I')
            arrays = []
            for _ in range(count):
                (ndim,) = read('<I')
                shape = read(f'<{ndim}I')
                size = int(np.prod(shape)) if ndim else 1
                arrays.append(np.frombuffer(data, dtype='<f8', count=size, offset=offset).reshape(shape).astype(float))
                offset += 8 * size
            layers.append(_layer_from_arrays(tag, arrays, dim))
    except (struct.error, ValueError) as e:
        raise RayIPDGError(f"权重文件 {path} 已损坏或被截断: {e}")
    return Network(layers, dim, n_fine, n_dirs)


def _layer_from_arrays(tag: bytes, arrays: List[np.ndarray], dim: int) -> Layer:
    if tag not in LAYER_TYPES:
        raise RayIPDGError(f"未知层类型标记: {tag!r}")
    if tag == Conv.tag:
        W = arrays[0]
        layer = Conv(W.shape[1], W.shape[0], W.ndim - 2)
    elif tag == Dense.tag:
        W = arrays[0]
        layer = Dense(W.shape[1], W.shape[0])
    elif tag == BatchNorm.tag:
        layer = BatchNorm(len(arrays[0]), dim)
    elif tag == MaxPool.tag:
        layer = MaxPool(dim)
    else:
        layer = LAYER_TYPES[tag]()
    layer.load_arrays(arrays)
    return layer
