# sampler.py

"""
No-U-Turn 哈密顿蒙特卡洛

多项式抽样 + 广义 U-turn 判据，对角质量矩阵。预热阶段用对偶平均调步长、
用逐段加倍的窗口估计质量矩阵；预热结束后两者冻结。
每条链一个独立的随机数流（SeedSequence.spawn），多条链并发运行。
"""

import asyncio
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Protocol

import numpy as np
import pydantic

from .errors import ContractError, InitializationError, NumericalError
from .log import logger

LOG_08 = math.log(0.8)


class SamplerConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    chains: int = pydantic.Field(default=8, ge=1)
    iterations: int = pydantic.Field(default=1000, ge=1)
    """每条链的总迭代数（含预热）"""
    warmup: int = pydantic.Field(default=500, ge=0)
    target_accept: float = pydantic.Field(default=0.8, gt=0, lt=1)
    max_tree_depth: int = pydantic.Field(default=10, ge=1)
    seed: int = 20240101
    divergence_threshold: float = pydantic.Field(default=1000.0, gt=0)
    init_radius: float = pydantic.Field(default=2.0, gt=0)
    max_init_attempts: int = pydantic.Field(default=100, ge=1)
    workers: int | None = pydantic.Field(default=None, ge=1)
    """并发线程数，空则每条链一个线程"""
    log_every: int = pydantic.Field(default=100, ge=1)

    @pydantic.model_validator(mode="after")
    def _check_warmup(self):
        if self.warmup >= self.iterations:
            raise ValueError(f"warmup ({self.warmup}) 必须小于 iterations ({self.iterations})")
        return self

    @property
    def draws_per_chain(self) -> int:
        return self.iterations - self.warmup


class Target(Protocol):
    """采样目标：无约束空间上的对数密度及其梯度"""

    dim: int

    def logp_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]: ...


@dataclass
class CallableTarget:
    """把普通函数包装成采样目标"""

    fn: Callable[[np.ndarray], tuple[float, np.ndarray]]
    dim: int
    names: list[str] = field(default_factory=list)

    def logp_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        return self.fn(theta)


@dataclass
class PosteriorDraws:
    """抽样结果：draws 形状为 (链, 抽样, 参数)，逐抽样的采样器统计量形状为 (链, 抽样)"""

    draws: np.ndarray
    names: list[str]
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    divergent: np.ndarray
    energy: np.ndarray
    lp: np.ndarray
    step_size: np.ndarray = field(default_factory=lambda: np.zeros(0))
    inv_metric: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    seed: int | None = None

    @property
    def chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    @property
    def n_divergent(self) -> int:
        return int(self.divergent.sum())

    @property
    def divergence_fraction(self) -> float:
        total = self.divergent.size
        return self.n_divergent / total if total else 0.0

    def param(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.names.index(name)]

    def block(self, prefix: str) -> np.ndarray:
        """按块名取出 (链, 抽样, 块长度)，如 'beta_psi' 取出 beta_psi[0..K-1]"""
        cols = [i for i, n in enumerate(self.names) if n == prefix or n.startswith(prefix + "[")]
        return self.draws[:, :, cols]

    def flat(self) -> np.ndarray:
        """(链×抽样, 参数)，按链顺序拼接"""
        return self.draws.reshape(-1, self.draws.shape[2])

    def with_draws(self, draws: np.ndarray, names: list[str]) -> "PosteriorDraws":
        return replace(self, draws=draws, names=list(names))

    @classmethod
    def from_array(cls, draws: np.ndarray, names: list[str]) -> "PosteriorDraws":
        """不经采样器构造（统计量全为 0）"""
        draws = np.asarray(draws, dtype=float)
        if draws.ndim != 3 or draws.shape[2] != len(names):
            raise ContractError(f"draws 形状 {draws.shape} 与 {len(names)} 个参数名不符")
        zeros = np.zeros(draws.shape[:2])
        return cls(
            draws=draws,
            names=list(names),
            accept_stat=zeros.copy(),
            tree_depth=zeros.astype(int),
            n_leapfrog=zeros.astype(int),
            divergent=zeros.astype(bool),
            energy=zeros.copy(),
            lp=zeros.copy(),
        )


# ---------- 哈密顿动力学 ----------


class _Point(NamedTuple):
    q: np.ndarray
    p: np.ndarray
    logp: float
    grad: np.ndarray


def _hamiltonian(z: _Point, inv_metric: np.ndarray) -> float:
    h = -z.logp + 0.5 * float(np.sum(z.p * z.p * inv_metric))
    return math.inf if math.isnan(h) else h


def leapfrog(target: Target, z: _Point, eps: float, inv_metric: np.ndarray) -> _Point:
    p_half = z.p + 0.5 * eps * z.grad
    q = z.q + eps * inv_metric * p_half
    logp, grad = target.logp_and_grad(q)
    grad = np.asarray(grad, dtype=float)
    return _Point(q, p_half + 0.5 * eps * grad, float(logp), grad)


def _criterion(p_sharp_minus: np.ndarray, p_sharp_plus: np.ndarray, rho: np.ndarray) -> bool:
    return float(p_sharp_plus @ rho) > 0 and float(p_sharp_minus @ rho) > 0


class _Subtree(NamedTuple):
    valid: bool
    z_end: _Point
    z_propose: _Point
    p_sharp_beg: np.ndarray
    p_sharp_end: np.ndarray
    p_beg: np.ndarray
    p_end: np.ndarray
    rho: np.ndarray
    log_sum_weight: float


@dataclass
class _Tally:
    n_leapfrog: int = 0
    sum_metro_prob: float = 0.0
    divergent: bool = False


class NUTS:
    """单条链的 NUTS 转移核"""

    def __init__(
        self,
        target: Target,
        rng: np.random.Generator,
        *,
        max_depth: int = 10,
        max_delta_h: float = 1000.0,
    ):
        self.target = target
        self.rng = rng
        self.max_depth = max_depth
        self.max_delta_h = max_delta_h
        self.step_size = 1.0
        self.inv_metric = np.ones(target.dim)

    def _momentum(self) -> np.ndarray:
        return self.rng.standard_normal(self.target.dim) / np.sqrt(self.inv_metric)

    def _build_tree(self, depth: int, z: _Point, sign: int, H0: float, tally: _Tally) -> _Subtree:
        if depth == 0:
            z = leapfrog(self.target, z, sign * self.step_size, self.inv_metric)
            tally.n_leapfrog += 1
            h = _hamiltonian(z, self.inv_metric)
            if h - H0 > self.max_delta_h:
                tally.divergent = True
            delta = H0 - h
            tally.sum_metro_prob += 1.0 if delta > 0 else math.exp(delta)
            p_sharp = self.inv_metric * z.p
            return _Subtree(not tally.divergent, z, z, p_sharp, p_sharp, z.p, z.p, z.p.copy(), delta)

        init = self._build_tree(depth - 1, z, sign, H0, tally)
        if not init.valid:
            return init
        final = self._build_tree(depth - 1, init.z_end, sign, H0, tally)
        if not final.valid:
            return final._replace(z_propose=init.z_propose)

        log_sum_weight = float(np.logaddexp(init.log_sum_weight, final.log_sum_weight))
        z_propose = init.z_propose
        if self.rng.uniform() < math.exp(final.log_sum_weight - log_sum_weight):
            z_propose = final.z_propose

        rho = init.rho + final.rho
        persist = _criterion(init.p_sharp_beg, final.p_sharp_end, rho)
        persist = persist and _criterion(init.p_sharp_beg, final.p_sharp_beg, init.rho + final.p_beg)
        persist = persist and _criterion(init.p_sharp_end, final.p_sharp_end, final.rho + init.p_end)
        return _Subtree(
            persist,
            final.z_end,
            z_propose,
            init.p_sharp_beg,
            final.p_sharp_end,
            init.p_beg,
            final.p_end,
            rho,
            log_sum_weight,
        )

    def transition(self, z0: _Point) -> tuple[_Point, dict]:
        z0 = z0._replace(p=self._momentum())
        H0 = _hamiltonian(z0, self.inv_metric)
        p_sharp0 = self.inv_metric * z0.p

        z_fwd = z_bck = z0
        z_sample = z0
        p_sharp_fwd_bck = p_sharp_fwd_fwd = p_sharp_bck_fwd = p_sharp_bck_bck = p_sharp0
        p_fwd_bck = p_fwd_fwd = p_bck_fwd = p_bck_bck = z0.p
        rho = z0.p.copy()
        log_sum_weight = 0.0
        tally = _Tally()
        depth = 0

        while depth < self.max_depth:
            if self.rng.uniform() > 0.5:
                rho_bck = rho
                p_bck_fwd, p_sharp_bck_fwd = p_fwd_bck, p_sharp_fwd_bck
                sub = self._build_tree(depth, z_fwd, 1, H0, tally)
                z_fwd = sub.z_end
                rho_fwd = sub.rho
                p_sharp_fwd_bck, p_sharp_fwd_fwd = sub.p_sharp_beg, sub.p_sharp_end
                p_fwd_bck, p_fwd_fwd = sub.p_beg, sub.p_end
            else:
                rho_fwd = rho
                p_fwd_bck, p_sharp_fwd_bck = p_bck_fwd, p_sharp_bck_fwd
                sub = self._build_tree(depth, z_bck, -1, H0, tally)
                z_bck = sub.z_end
                rho_bck = sub.rho
                p_sharp_bck_fwd, p_sharp_bck_bck = sub.p_sharp_beg, sub.p_sharp_end
                p_bck_fwd, p_bck_bck = sub.p_beg, sub.p_end

            if not sub.valid:
                break
            depth += 1

            # 顶层为有偏渐进抽样
            if sub.log_sum_weight > log_sum_weight:
                z_sample = sub.z_propose
            elif self.rng.uniform() < math.exp(sub.log_sum_weight - log_sum_weight):
                z_sample = sub.z_propose
            log_sum_weight = float(np.logaddexp(log_sum_weight, sub.log_sum_weight))

            rho = rho_bck + rho_fwd
            persist = _criterion(p_sharp_bck_bck, p_sharp_fwd_fwd, rho)
            persist = persist and _criterion(p_sharp_bck_bck, p_sharp_fwd_bck, rho_bck + p_fwd_bck)
            persist = persist and _criterion(p_sharp_bck_fwd, p_sharp_fwd_fwd, rho_fwd + p_bck_fwd)
            if not persist:
                break

        stats = {
            "accept_stat": tally.sum_metro_prob / tally.n_leapfrog if tally.n_leapfrog else 0.0,
            "tree_depth": depth,
            "n_leapfrog": tally.n_leapfrog,
            "divergent": tally.divergent,
            "energy": _hamiltonian(z_sample, self.inv_metric),
        }
        return z_sample, stats

    def init_step_size(self, z: _Point):
        """反复加倍或减半步长，直到单步接受率越过 0.8"""
        if self.step_size == 0 or self.step_size > 1e7 or math.isnan(self.step_size):
            return

        def delta_h() -> float:
            start = z._replace(p=self._momentum())
            H0 = _hamiltonian(start, self.inv_metric)
            return H0 - _hamiltonian(leapfrog(self.target, start, self.step_size, self.inv_metric), self.inv_metric)

        direction = 1 if delta_h() > LOG_08 else -1
        while True:
            dh = delta_h()
            if direction == 1 and not dh > LOG_08:
                break
            if direction == -1 and not dh < LOG_08:
                break
            self.step_size = self.step_size * 2.0 if direction == 1 else self.step_size * 0.5
            if self.step_size > 1e7:
                raise NumericalError("步长增大到 1e7 仍被接受，后验可能不正常")
            if self.step_size == 0:
                raise NumericalError("找不到足够小的可接受步长")


# ---------- 预热自适应 ----------


@dataclass
class DualAveraging:
    """对偶平均步长自适应"""

    mu: float
    target: float = 0.8
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    counter: int = 0
    s_bar: float = 0.0
    x_bar: float = 0.0

    def restart(self, mu: float):
        self.mu = mu
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def learn(self, accept_stat: float) -> float:
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    def final(self) -> float:
        return math.exp(self.x_bar)


def adaptation_windows(
    warmup: int,
    init_buffer: int = 75,
    term_buffer: int = 50,
    base_window: int = 25,
) -> list[tuple[int, int]]:
    """质量矩阵估计窗口 [start, stop)，窗口逐个加倍，最后一个延伸到末尾缓冲区"""
    if warmup < 20:
        return []
    if init_buffer + base_window + term_buffer > warmup:
        init_buffer = int(0.15 * warmup)
        term_buffer = int(0.1 * warmup)
        base_window = warmup - (init_buffer + term_buffer)
    end = warmup - term_buffer
    windows = []
    start, size = init_buffer, base_window
    while start < end:
        stop = start + size
        if stop + 2 * size > end:
            stop = end
        windows.append((start, stop))
        start, size = stop, 2 * size
    return windows


def regularized_variance(samples: np.ndarray) -> np.ndarray:
    """窗口内样本方差向 1e-3 收缩"""
    n = samples.shape[0]
    var = samples.var(axis=0, ddof=1) if n > 1 else np.ones(samples.shape[1])
    return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


# ---------- 初始化与单链 ----------


def initialize(
    dim: int,
    rng: np.random.Generator | int,
    target: Target | None = None,
    *,
    radius: float = 2.0,
    max_attempts: int = 100,
) -> np.ndarray:
    """每个坐标在 [-radius, radius] 上均匀抽取，直到对数密度与梯度有限"""
    if dim < 1:
        raise ValueError(f"参数维度必须 ≥ 1，收到 {dim}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.PCG64(rng))
    theta = rng.uniform(-radius, radius, size=dim)
    if target is None:
        return theta
    for _ in range(max_attempts):
        logp, grad = target.logp_and_grad(theta)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return theta
        last = theta
        theta = rng.uniform(-radius, radius, size=dim)
    reason = None
    explain = getattr(target, "explain", None)
    if callable(explain):
        reason = explain(last)
    raise InitializationError(
        f"{max_attempts} 次重抽后对数密度仍不是有限值" + (f"，首个问题项：{reason}" if reason else "")
    )


def run_chain(
    target: Target,
    config: SamplerConfig,
    chain_id: int,
    seed: np.random.SeedSequence,
) -> dict:
    rng = np.random.Generator(np.random.PCG64(seed))
    theta = initialize(
        target.dim, rng, target, radius=config.init_radius, max_attempts=config.max_init_attempts
    )
    logp, grad = target.logp_and_grad(theta)
    z = _Point(theta, np.zeros(target.dim), float(logp), np.asarray(grad, dtype=float))

    kernel = NUTS(target, rng, max_depth=config.max_tree_depth, max_delta_h=config.divergence_threshold)
    kernel.init_step_size(z)
    adapt = DualAveraging(mu=math.log(10.0 * kernel.step_size), target=config.target_accept)
    windows = adaptation_windows(config.warmup)
    window_end = {stop: start for start, stop in windows}
    if chain_id == 0:
        logger.info(f"[Sampler] 质量矩阵窗口: {' '.join(f'[{a},{b})' for a, b in windows) or '无'}")

    n_keep = config.draws_per_chain
    draws = np.empty((n_keep, target.dim))
    stats = {k: np.empty(n_keep) for k in ("accept_stat", "tree_depth", "n_leapfrog", "energy", "lp")}
    divergent = np.zeros(n_keep, dtype=bool)
    window_samples: list[np.ndarray] = []
    started = time.perf_counter()

    for it in range(config.iterations):
        z, info = kernel.transition(z)
        if it < config.warmup:
            kernel.step_size = adapt.learn(info["accept_stat"])
            if any(start <= it < stop for start, stop in windows):
                window_samples.append(z.q.copy())
            if it + 1 in window_end:
                kernel.inv_metric = regularized_variance(np.asarray(window_samples))
                window_samples = []
                kernel.init_step_size(z)
                adapt.restart(math.log(10.0 * kernel.step_size))
            if it + 1 == config.warmup:
                kernel.step_size = adapt.final()
                logger.info(f"[Sampler] 链 {chain_id} 预热结束，步长 {kernel.step_size:.4g}")
        else:
            k = it - config.warmup
            draws[k] = z.q
            for key in ("accept_stat", "tree_depth", "n_leapfrog", "energy"):
                stats[key][k] = info[key]
            stats["lp"][k] = z.logp
            divergent[k] = info["divergent"]
        if (it + 1) % config.log_every == 0:
            phase = "预热" if it < config.warmup else "抽样"
            logger.info(f"[Sampler] 链 {chain_id}: {it + 1}/{config.iterations} ({phase})")

    if config.warmup == 0:
        logger.info(f"[Sampler] 链 {chain_id} 未预热，步长 {kernel.step_size:.4g}")
    if divergent.any():
        logger.warning(f"[Sampler] 链 {chain_id} 有 {int(divergent.sum())} 次发散转移")
    logger.debug(f"[Sampler] 链 {chain_id} 用时 {time.perf_counter() - started:.1f}s")
    return {
        "draws": draws,
        "divergent": divergent,
        "step_size": kernel.step_size,
        "inv_metric": kernel.inv_metric.copy(),
        **stats,
    }


async def nuts_run_async(target: Target, config: SamplerConfig) -> PosteriorDraws:
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    loop = asyncio.get_running_loop()
    workers = config.workers or config.chains
    logger.info(
        f"[Sampler] {config.chains} 条链 × {config.iterations} 次迭代（预热 {config.warmup}），维度 {target.dim}"
    )
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = await asyncio.gather(
            *(loop.run_in_executor(pool, run_chain, target, config, c, seeds[c]) for c in range(config.chains))
        )
    names = list(getattr(target, "unconstrained_names", None) or getattr(target, "names", None) or [])
    if len(names) != target.dim:
        names = [f"theta[{i}]" for i in range(target.dim)]
    stack = lambda key: np.stack([r[key] for r in results])  # noqa: E731
    draws = PosteriorDraws(
        draws=stack("draws"),
        names=names,
        accept_stat=stack("accept_stat"),
        tree_depth=stack("tree_depth").astype(int),
        n_leapfrog=stack("n_leapfrog").astype(int),
        divergent=stack("divergent"),
        energy=stack("energy"),
        lp=stack("lp"),
        step_size=np.array([r["step_size"] for r in results]),
        inv_metric=stack("inv_metric"),
        seed=config.seed,
    )
    logger.info(f"[Sampler] 完成，发散 {draws.n_divergent} 次 ({100 * draws.divergence_fraction:.2f}%)")
    return draws


def nuts_run(target: Target, config: SamplerConfig | None = None) -> PosteriorDraws:
    """同步入口"""
    return asyncio.run(nuts_run_async(target, config or SamplerConfig()))
