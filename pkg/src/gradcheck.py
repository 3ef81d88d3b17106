"""
梯度校验套件
在随机小实例上比较闭式梯度与有限差分结果
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .agents import AgentConfig, build_actor_critic
from .approximators import (Activation, MlpShape, forward, grad_input, grad_params, init_params,
                            numeric_grad)
from .environments import CmdpSpec
from .mesh import (MeshActor, MeshConfig, MeshState, MetaShaper, RewardFormulation, fd_mesh_oracle,
                   mesh_inner_update, mesh_meta_gradient, meta_network_shape)
from .metal import (MetaState, OuterLossKind, fd_meta_gradient_oracle, inner_update,
                    metal_meta_gradient)
from .replay import Batch, TransitionBatch


ABS_TOLERANCE = 1e-8
DEFAULT_TOLERANCES = {"approx": 1e-6, "metal": 1e-5, "mesh": 1e-4}

logger = logging.getLogger(__name__)


@dataclass
class GradcheckReport:
    """一次校验套件的结果"""
    suite: str
    n_instances: int
    tolerance: float
    max_rel_error: float = 0.0
    max_abs_error: float = 0.0
    failures: List[int] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures

    def record(self, index: int, closed: np.ndarray, oracle: np.ndarray):
        closed = np.atleast_1d(np.asarray(closed, dtype=np.float64))
        oracle = np.atleast_1d(np.asarray(oracle, dtype=np.float64))
        diff = np.abs(closed - oracle)
        self.max_abs_error = max(self.max_abs_error, float(np.max(diff)))
        self.max_rel_error = max(self.max_rel_error,
                                 float(np.max(diff / np.maximum(np.abs(oracle), ABS_TOLERANCE))))
        if not np.allclose(closed, oracle, rtol=self.tolerance, atol=ABS_TOLERANCE):
            self.failures.append(index)

    def summary(self) -> str:
        status = "通过" if self.passed else f"失败 {len(self.failures)} 个实例"
        return (f"[{self.suite}] {self.n_instances} 个实例, rtol={self.tolerance:g}: {status}; "
                f"最大相对误差 {self.max_rel_error:.3e}, 最大绝对误差 {self.max_abs_error:.3e}, "
                f"用时 {self.elapsed:.2f}秒")


def random_batch(rng: np.random.Generator, n: int, obs_dim: int, act_dim: int) -> TransitionBatch:
    """随机转移批量，discount_prod 取 0 或 γⁿ 型正数"""
    return TransitionBatch(
        s=rng.normal(size=(n, obs_dim)),
        a=rng.uniform(-1.0, 1.0, size=(n, act_dim)),
        r_sum=rng.uniform(0.0, 2.0, size=n),
        c_sum=rng.uniform(0.0, 2.0, size=n),
        s_next=rng.normal(size=(n, obs_dim)),
        discount_prod=np.where(rng.uniform(size=n) < 0.2, 0.0, rng.uniform(0.5, 0.99, size=n)),
    )


def random_split(rng: np.random.Generator, obs_dim: int, act_dim: int,
                 max_train: int = 4, max_validate: int = 3) -> Batch:
    return Batch(train=random_batch(rng, int(rng.integers(1, max_train + 1)), obs_dim, act_dim),
                 validate=random_batch(rng, int(rng.integers(1, max_validate + 1)), obs_dim, act_dim))


def _approx_instance(rng: np.random.Generator, report: GradcheckReport, index: int):
    depth = int(rng.integers(0, 3))
    hidden = tuple(int(h) for h in rng.integers(2, 6, size=depth))
    activation = Activation.ELU if rng.uniform() < 0.5 else Activation.TANH
    output = Activation.IDENTITY if rng.uniform() < 0.5 else Activation.SCALED_TANH
    shape = MlpShape(int(rng.integers(1, 4)), hidden, int(rng.integers(1, 3)),
                     hidden_activation=activation, output_activation=output,
                     output_scale=float(rng.uniform(0.5, 2.0)),
                     layer_norm=bool(depth > 0 and rng.uniform() < 0.3))
    params = init_params(shape, rng)
    x = rng.normal(size=(int(rng.integers(1, 4)), shape.input_dim))
    cot = rng.normal(size=(x.shape[0], shape.output_dim))

    def objective_params(values):
        return float(np.sum(forward(params.with_values(values), shape, x) * cot))

    def objective_input(flat):
        return float(np.sum(forward(params, shape, flat.reshape(x.shape)) * cot))

    report.record(index, grad_params(params, shape, x, cot), numeric_grad(objective_params, params.values))
    report.record(index, grad_input(params, shape, x, cot).ravel(), numeric_grad(objective_input, x.ravel()))


def _metal_instance(rng: np.random.Generator, report: GradcheckReport, index: int):
    obs_dim = int(rng.integers(1, 3))
    spec = CmdpSpec(obs_dim, 1, 10, (-1.0,), (1.0,))
    critic_hidden = () if rng.uniform() < 0.5 else (3, 3)
    config = AgentConfig(lr_critic=float(rng.uniform(0.01, 0.5)), lr_actor=float(rng.uniform(0.01, 0.5)),
                         actor_hidden=(3,), critic_hidden=critic_hidden, hidden_activation="tanh")
    alpha = float(rng.uniform(-3.0, 3.0))
    base_lr = float(rng.uniform(1e-3, 0.1))
    beta = float(rng.uniform(0.0, 0.5))
    penalty = float(rng.uniform(0.0, 1.0))
    # λ' 取内点，保证投影不生效
    lam = max(0.0, base_lr * np.exp(alpha) * (beta - penalty)) + float(rng.uniform(0.1, 1.0))

    base = build_actor_critic(spec, config, rng, lam=0.0)
    state = replace(base, theta_a_target=init_params(base.actor_shape, rng),
                    theta_c_target=init_params(base.critic_shape, rng))
    meta = MetaState(alpha_lambda=alpha, lam=lam, lr_meta=1e-3, lr_lagrange_base=base_lr)
    batch = random_split(rng, obs_dim, 1)
    kind = list(OuterLossKind)[int(rng.integers(len(OuterLossKind)))]

    updated, lam_new = inner_update(state, meta, batch.train, penalty, beta, config)
    closed = metal_meta_gradient(state, meta, lam_new, updated, batch.train, batch.validate,
                                 penalty, beta, config, kind)
    oracle = fd_meta_gradient_oracle(state, meta, batch, penalty, beta, config, kind)
    report.record(index, closed, oracle)


def random_mesh_instance(rng: np.random.Generator) -> Tuple[MeshState, MeshActor, Batch, float, float,
                                                            AgentConfig, MeshConfig]:
    """MeSh 随机小实例：tanh 隐藏层保证二阶光滑"""
    obs_dim = int(rng.integers(1, 3))
    spec = CmdpSpec(obs_dim, 1, 10, (-1.0,), (1.0,))
    config = AgentConfig(lr_actor=float(rng.uniform(0.05, 0.5)), lr_critic=0.1, lr_lagrange=0.01,
                         actor_hidden=(3,), critic_hidden=(3,), hidden_activation="tanh")
    formulation = list(RewardFormulation)[int(rng.integers(len(RewardFormulation)))]
    mesh_config = MeshConfig(lambda_hat=float(rng.uniform(0.05, 1.0)), upsilon_S=float(rng.uniform(1.0, 10.0)),
                             upsilon_O=float(rng.uniform(0.5, 3.0)), formulation=formulation.value,
                             lr_critic_in=float(rng.uniform(0.05, 0.5)),
                             lr_critic_out=float(rng.uniform(0.05, 0.5)), meta_hidden=(3,))
    base = build_actor_critic(spec, config, rng)
    shape = meta_network_shape(spec, mesh_config.meta_hidden, "tanh")
    shaper = MetaShaper(init_params(shape, rng), shape, mesh_config.lambda_hat, mesh_config.upsilon_S,
                        mesh_config.upsilon_O, formulation)
    c_shape = base.critic_shape
    state = MeshState(shaper, c_shape, init_params(c_shape, rng), init_params(c_shape, rng),
                      init_params(c_shape, rng), init_params(c_shape, rng), lam=float(rng.uniform(0.0, 1.0)))
    actor = MeshActor(base.actor_shape, base.theta_a, init_params(base.actor_shape, rng))
    batch = random_split(rng, obs_dim, 1)
    return (state, actor, batch, float(rng.uniform(0.0, 1.0)), float(rng.uniform(0.0, 0.5)),
            config, mesh_config)


def _mesh_instance(rng: np.random.Generator, report: GradcheckReport, index: int):
    state, actor, batch, penalty, beta, config, mesh_config = random_mesh_instance(rng)
    updated = mesh_inner_update(state, actor, batch.train, penalty, beta, config, mesh_config)
    closed = mesh_meta_gradient(state, actor, updated, batch.train, batch.validate, config, mesh_config)
    oracle = fd_mesh_oracle(state, actor, batch, penalty, beta, config, mesh_config)
    report.record(index, closed, oracle)


SUITES: Dict[str, Callable[[np.random.Generator, GradcheckReport, int], None]] = {
    "approx": _approx_instance,
    "metal": _metal_instance,
    "mesh": _mesh_instance,
}


def run_suite(suite: str, n_instances: int, seed: int = 0,
              tolerance: Optional[float] = None) -> GradcheckReport:
    """
    运行一个校验套件

    Args:
        suite: "approx" / "metal" / "mesh"
        n_instances: 随机实例数量
        seed: 随机种子
        tolerance: 相对容差，默认按套件取 1e-6 / 1e-5 / 1e-4

    Returns:
        GradcheckReport: 校验报告
    """
    if suite not in SUITES:
        raise ValueError(f"未知校验套件: {suite}，可选 {sorted(SUITES)}")
    if n_instances < 1:
        raise ValueError(f"实例数量必须 >= 1: {n_instances}")
    report = GradcheckReport(suite, n_instances, DEFAULT_TOLERANCES[suite] if tolerance is None else tolerance)
    rng = np.random.default_rng(seed)
    start = time.time()
    for index in range(n_instances):
        SUITES[suite](rng, report, index)
    report.elapsed = time.time() - start
    logger.info(report.summary())
    return report
