"""
函数逼近器模块
显式梯度的多层感知机：前向计算、参数梯度、输入梯度以及参数检查点读写
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np


logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-6
CHECKPOINT_MAGIC = "mlp-checkpoint"


class DimensionMismatchError(ValueError):
    """输入、输出或余切向量维度不匹配"""


class Activation(str, Enum):
    """激活函数类型"""
    ELU = "elu"
    TANH = "tanh"
    IDENTITY = "identity"
    SCALED_SIGMOID = "scaled_sigmoid"
    SCALED_TANH = "scaled_tanh"


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # 分段计算避免 exp 溢出
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activate(kind: Activation, z: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """
    计算激活值

    Args:
        kind: 激活函数类型
        z: 预激活值
        scale: scaled_sigmoid / scaled_tanh 的缩放系数 υ

    Returns:
        np.ndarray: 激活后的值
    """
    if kind == Activation.ELU:
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if kind == Activation.TANH:
        return np.tanh(z)
    if kind == Activation.IDENTITY:
        return z
    if kind == Activation.SCALED_SIGMOID:
        return scale * _sigmoid(z)
    if kind == Activation.SCALED_TANH:
        return scale * np.tanh(z)
    raise ValueError(f"未知激活函数: {kind}")


def activation_derivative(kind: Activation, z: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """激活函数对预激活值的逐元素导数"""
    if kind == Activation.ELU:
        return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))
    if kind == Activation.TANH:
        return 1.0 - np.tanh(z) ** 2
    if kind == Activation.IDENTITY:
        return np.ones_like(z)
    if kind == Activation.SCALED_SIGMOID:
        s = _sigmoid(z)
        return scale * s * (1.0 - s)
    if kind == Activation.SCALED_TANH:
        return scale * (1.0 - np.tanh(z) ** 2)
    raise ValueError(f"未知激活函数: {kind}")


@dataclass(frozen=True)
class MlpShape:
    """
    网络结构描述

    hidden_dims 为空时退化为单个线性层；output_scale 是缩放型输出激活的 υ
    """
    input_dim: int
    hidden_dims: Tuple[int, ...]
    output_dim: int
    hidden_activation: Activation = Activation.ELU
    output_activation: Activation = Activation.IDENTITY
    output_scale: float = 1.0
    use_bias: bool = True
    layer_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "hidden_activation", Activation(self.hidden_activation))
        object.__setattr__(self, "output_activation", Activation(self.output_activation))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"网络各层维度必须 >= 1: {dims}")
        if self.hidden_activation not in (Activation.ELU, Activation.TANH):
            raise ValueError(f"隐藏层激活只支持 elu/tanh: {self.hidden_activation}")
        if self.output_activation in (Activation.SCALED_SIGMOID, Activation.SCALED_TANH):
            if not np.isfinite(self.output_scale) or self.output_scale <= 0:
                raise ValueError(f"缩放激活需要有限正数 υ: {self.output_scale}")
        if self.layer_norm and not self.hidden_dims:
            raise ValueError("layer_norm 需要至少一个隐藏层")

    @property
    def layer_dims(self) -> List[Tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def is_scalar(self) -> bool:
        return self.output_dim == 1


@dataclass(frozen=True)
class LayerSlice:
    """参数向量中一个权重矩阵或偏置数组的切片描述"""
    name: str
    rows: int
    cols: int
    offset: int

    @property
    def size(self) -> int:
        return self.rows * self.cols


@lru_cache(maxsize=None)
def build_layout(shape: MlpShape) -> Tuple[LayerSlice, ...]:
    """按 W0, b0, W1, b1 ... 的顺序生成参数布局（按结构缓存）"""
    layout = []
    offset = 0
    for i, (n_in, n_out) in enumerate(shape.layer_dims):
        layout.append(LayerSlice(f"W{i}", n_in, n_out, offset))
        offset += n_in * n_out
        if shape.use_bias:
            layout.append(LayerSlice(f"b{i}", 1, n_out, offset))
            offset += n_out
    return tuple(layout)


@dataclass(frozen=True)
class ParamVector:
    """
    扁平参数向量

    values 是一维 float64 数组，layout 把各个切片映射为权重矩阵和偏置
    """
    values: np.ndarray
    layout: Tuple[LayerSlice, ...]
    _index: Dict[str, LayerSlice] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple(self.layout))
        expected = sum(s.size for s in self.layout)
        if values.size != expected:
            raise DimensionMismatchError(
                f"参数长度 {values.size} 与布局总大小 {expected} 不一致")
        object.__setattr__(self, "_index", {s.name: s for s in self.layout})

    def __len__(self) -> int:
        return self.values.size

    def view(self, name: str) -> np.ndarray:
        """返回某个切片的矩阵视图（只读使用）"""
        s = self._index[name]
        return self.values[s.offset:s.offset + s.size].reshape(s.rows, s.cols)

    def has(self, name: str) -> bool:
        return name in self._index

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), self.layout)

    def copy(self) -> "ParamVector":
        return self.with_values(self.values.copy())

    def axpy(self, scale: float, direction: np.ndarray) -> "ParamVector":
        """返回 values + scale * direction"""
        direction = np.asarray(direction, dtype=np.float64)
        if direction.shape != self.values.shape:
            raise DimensionMismatchError(
                f"更新方向维度 {direction.shape} 与参数 {self.values.shape} 不一致")
        return ParamVector(self.values + scale * direction, self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout


def init_params(shape: MlpShape, rng: Union[int, np.random.Generator, None] = None) -> ParamVector:
    """
    按 U[-1/sqrt(fan_in), 1/sqrt(fan_in)] 初始化参数

    Args:
        shape: 网络结构
        rng: 随机种子或生成器

    Returns:
        ParamVector: 初始参数
    """
    rng = np.random.default_rng(rng)
    layout = build_layout(shape)
    values = np.empty(sum(s.size for s in layout))
    for s in layout:
        fan_in = s.rows if s.name.startswith("W") else _fan_in_of_bias(layout, s)
        bound = 1.0 / np.sqrt(fan_in)
        values[s.offset:s.offset + s.size] = rng.uniform(-bound, bound, size=s.size)
    return ParamVector(values, layout)


def _fan_in_of_bias(layout: Sequence[LayerSlice], bias: LayerSlice) -> int:
    weight_name = "W" + bias.name[1:]
    return next(s.rows for s in layout if s.name == weight_name)


def zeros_like_shape(shape: MlpShape) -> ParamVector:
    layout = build_layout(shape)
    return ParamVector(np.zeros(sum(s.size for s in layout)), layout)


def params_from_arrays(shape: MlpShape, arrays: Dict[str, Sequence]) -> ParamVector:
    """由命名数组构造参数，缺省切片填 0（用于手算实例）"""
    params = zeros_like_shape(shape)
    values = params.values.copy()
    for s in params.layout:
        if s.name in arrays:
            block = np.asarray(arrays[s.name], dtype=np.float64).reshape(s.rows, s.cols)
            values[s.offset:s.offset + s.size] = block.reshape(-1)
    return params.with_values(values)


def _check_params(params: ParamVector, shape: MlpShape):
    if params.layout != build_layout(shape):
        raise DimensionMismatchError("参数布局与网络结构不一致")


def _as_batch(x: np.ndarray, dim: int, what: str) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x.reshape(1, -1) if single else x
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise DimensionMismatchError(f"{what}维度应为 {dim}，实际为 {x.shape}")
    return batch, single


def _layer_norm(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mu = z.mean(axis=1, keepdims=True)
    sigma = np.sqrt(z.var(axis=1, keepdims=True) + LAYER_NORM_EPS)
    return (z - mu) / sigma, sigma


def _forward_cache(params: ParamVector, shape: MlpShape, x: np.ndarray) -> Dict[str, list]:
    """前向计算并缓存反向传播所需的中间量"""
    n_layers = len(shape.layer_dims)
    inputs, pre, norm = [], [], []
    h = x
    for i in range(n_layers):
        inputs.append(h)
        z = h @ params.view(f"W{i}")
        if shape.use_bias:
            z = z + params.view(f"b{i}")
        last = i == n_layers - 1
        if last:
            pre.append(z)
            norm.append(None)
            h = activate(shape.output_activation, z, shape.output_scale)
        elif i == 0 and shape.layer_norm:
            zn, sigma = _layer_norm(z)
            pre.append(zn)
            norm.append(sigma)
            h = np.tanh(zn)
        else:
            pre.append(z)
            norm.append(None)
            h = activate(shape.hidden_activation, z)
    return {"inputs": inputs, "pre": pre, "norm": norm, "output": h}


def _backward(params: ParamVector, shape: MlpShape, cache: Dict[str, list],
              cotangent: np.ndarray, per_item: bool) -> Tuple[np.ndarray, np.ndarray]:
    """
    反向传播

    Returns:
        (参数梯度, 输入梯度)；per_item 为 True 时参数梯度形状为 (B, P)，否则为 (P,)
    """
    n_layers = len(shape.layer_dims)
    batch = cotangent.shape[0]
    grads = np.zeros((batch, len(params)) if per_item else len(params))
    delta = cotangent * activation_derivative(
        shape.output_activation, cache["pre"][-1], shape.output_scale)
    for i in reversed(range(n_layers)):
        h_in = cache["inputs"][i]
        w = params.view(f"W{i}")
        w_slice = params._index[f"W{i}"]
        if per_item:
            grads[:, w_slice.offset:w_slice.offset + w_slice.size] = \
                np.einsum("bi,bj->bij", h_in, delta).reshape(batch, -1)
        else:
            grads[w_slice.offset:w_slice.offset + w_slice.size] = (h_in.T @ delta).reshape(-1)
        if shape.use_bias:
            b_slice = params._index[f"b{i}"]
            if per_item:
                grads[:, b_slice.offset:b_slice.offset + b_slice.size] = delta
            else:
                grads[b_slice.offset:b_slice.offset + b_slice.size] = delta.sum(axis=0)
        d_in = delta @ w.T
        if i == 0:
            return grads, d_in
        z_prev = cache["pre"][i - 1]
        if i - 1 == 0 and shape.layer_norm:
            # tanh(LN(z)) 的反向
            d_norm = d_in * (1.0 - np.tanh(z_prev) ** 2)
            sigma = cache["norm"][i - 1]
            delta = (d_norm - d_norm.mean(axis=1, keepdims=True)
                     - z_prev * (d_norm * z_prev).mean(axis=1, keepdims=True)) / sigma
        else:
            delta = d_in * activation_derivative(shape.hidden_activation, z_prev)
    return grads, np.zeros_like(cache["inputs"][0])


def forward(params: ParamVector, shape: MlpShape, x: np.ndarray) -> np.ndarray:
    """
    前向计算

    Args:
        params: 网络参数
        shape: 网络结构
        x: 输入，一维为单样本，二维为批量 (B, input_dim)

    Returns:
        np.ndarray: 输出，形状与输入的批量维度对应
    """
    _check_params(params, shape)
    batch, single = _as_batch(x, shape.input_dim, "输入")
    out = _forward_cache(params, shape, batch)["output"]
    return out[0] if single else out


def _cotangent_batch(cotangent: np.ndarray, shape: MlpShape, n: int, single: bool) -> np.ndarray:
    cot = np.asarray(cotangent, dtype=np.float64)
    cot = cot.reshape(1, -1) if single else cot
    if cot.shape != (n, shape.output_dim):
        raise DimensionMismatchError(
            f"余切向量维度应为 {(n, shape.output_dim)}，实际为 {np.shape(cotangent)}")
    return cot


def grad_params(params: ParamVector, shape: MlpShape, x: np.ndarray,
                cotangent: np.ndarray, per_item: bool = False) -> np.ndarray:
    """
    参数的向量-雅可比积 (∂output/∂params)ᵀ · cotangent

    批量输入时默认对样本求和；per_item=True 返回逐样本梯度 (B, P)
    """
    _check_params(params, shape)
    batch, single = _as_batch(x, shape.input_dim, "输入")
    cot = _cotangent_batch(cotangent, shape, batch.shape[0], single)
    cache = _forward_cache(params, shape, batch)
    grads, _ = _backward(params, shape, cache, cot, per_item)
    if per_item and single:
        return grads[0]
    return grads


def grad_input(params: ParamVector, shape: MlpShape, x: np.ndarray,
               cotangent: np.ndarray) -> np.ndarray:
    """输入的向量-雅可比积，返回与 x 同形状的梯度"""
    _check_params(params, shape)
    batch, single = _as_batch(x, shape.input_dim, "输入")
    cot = _cotangent_batch(cotangent, shape, batch.shape[0], single)
    cache = _forward_cache(params, shape, batch)
    _, d_in = _backward(params, shape, cache, cot, per_item=False)
    return d_in[0] if single else d_in


def jacobian_params(params: ParamVector, shape: MlpShape, x: np.ndarray) -> np.ndarray:
    """逐样本、逐输出维度的参数雅可比，形状 (B, output_dim, P)"""
    batch, _ = _as_batch(x, shape.input_dim, "输入")
    n = batch.shape[0]
    jac = np.empty((n, shape.output_dim, len(params)))
    for j in range(shape.output_dim):
        cot = np.zeros((n, shape.output_dim))
        cot[:, j] = 1.0
        jac[:, j, :] = grad_params(params, shape, batch, cot, per_item=True)
    return jac


def param_grad_inner_product(params_a: ParamVector, params_b: ParamVector,
                             shape: MlpShape, x: np.ndarray) -> Union[float, np.ndarray]:
    """
    ⟨∇_θ Q(x; θ_a), ∇_θ Q(x; θ_b)⟩

    Args:
        params_a: 第一组参数
        params_b: 第二组参数（布局必须相同）
        shape: 标量输出网络结构
        x: 单个输入或批量输入

    Returns:
        单样本时为标量，批量时为逐样本内积数组
    """
    if not shape.is_scalar:
        raise DimensionMismatchError(f"内积只对标量输出网络定义，output_dim={shape.output_dim}")
    if not params_a.same_layout(params_b):
        raise DimensionMismatchError("两组参数布局不一致")
    batch, single = _as_batch(x, shape.input_dim, "输入")
    ones = np.ones((batch.shape[0], 1))
    ga = grad_params(params_a, shape, batch, ones, per_item=True)
    gb = grad_params(params_b, shape, batch, ones, per_item=True)
    products = np.einsum("bp,bp->b", ga, gb)
    return float(products[0]) if single else products


def save_checkpoint(path: Union[str, Path], params: ParamVector):
    """
    保存参数检查点

    格式：文本头（首行 "mlp-checkpoint <切片数>"，随后每个切片一行 "name rows cols"），
    之后紧跟小端 float64 原始数组
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [f"{CHECKPOINT_MAGIC} {len(params.layout)}"]
    header += [f"{s.name} {s.rows} {s.cols}" for s in params.layout]
    payload = ("\n".join(header) + "\n").encode("utf-8")
    payload += params.values.astype("<f8").tobytes()
    path.write_bytes(payload)
    logger.debug(f"检查点已保存: {path} ({len(params)} 个参数)")


def load_checkpoint(path: Union[str, Path]) -> ParamVector:
    """读取 save_checkpoint 写出的检查点"""
    data = Path(path).read_bytes()
    first_end = data.index(b"\n")
    magic, count = data[:first_end].decode("utf-8").split()
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"不是参数检查点文件: {path}")
    pos = first_end + 1
    layout = []
    offset = 0
    for _ in range(int(count)):
        end = data.index(b"\n", pos)
        name, rows, cols = data[pos:end].decode("utf-8").split()
        layout.append(LayerSlice(name, int(rows), int(cols), offset))
        offset += int(rows) * int(cols)
        pos = end + 1
    values = np.frombuffer(data[pos:], dtype="<f8").astype(np.float64)
    return ParamVector(values, tuple(layout))


def numeric_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """标量函数的中心差分梯度（用于校验）"""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        grad.flat[i] = (fn(x + step) - fn(x - step)) / (2.0 * h)
    return grad
