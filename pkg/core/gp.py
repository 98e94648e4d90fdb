# gp.py

"""
高斯过程与 B 样条工具

- 周期核（物候，周期固定 53 周）与平方指数核（年份、样条权重）
- 带抖动阶梯的 Cholesky 分解（numpy 版用于前后处理，jax 版用于对数后验内部）
- 张量积三次 B 样条曲面与按支撑剪枝
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp
import numpy as np
import pandas as pd
import pydantic
import scipy.linalg
from jax import lax

from .errors import ConfigError, ContractError, NumericalError
from .log import logger

PHENOLOGY_PERIOD = 53
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)
SPLINE_DEGREE = 3


class PeriodicKernelParams(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    sigma_phen: float = pydantic.Field(gt=0)
    ell_phen: float = pydantic.Field(gt=0)
    period: Literal[53] = PHENOLOGY_PERIOD


class SqExpKernelParams(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    sigma: float = pydantic.Field(gt=0)
    ell: float = pydantic.Field(gt=0)


# ---------- 核函数 ----------


def periodic_kernel(w, w_prime, params: PeriodicKernelParams):
    """k = σ² exp(-2 sin²(π|w-w'|/53) / l²)，支持广播"""
    d = np.abs(np.asarray(w, dtype=float) - np.asarray(w_prime, dtype=float))
    return params.sigma_phen**2 * np.exp(-2.0 * np.sin(np.pi * d / params.period) ** 2 / params.ell_phen**2)


def sqexp_kernel(x, x_prime, params: SqExpKernelParams) -> float:
    """k = σ² exp(-d²/(2l²))；标量取绝对差，向量（如二维基函数下标）取欧氏距离"""
    diff = np.atleast_1d(np.asarray(x, dtype=float) - np.asarray(x_prime, dtype=float))
    d2 = float(np.sum(diff**2))
    return params.sigma**2 * np.exp(-0.5 * d2 / params.ell**2)


def periodic_gram(weeks: Sequence[float], params: PeriodicKernelParams) -> np.ndarray:
    weeks = np.asarray(weeks, dtype=float)
    return periodic_kernel(weeks[:, None], weeks[None, :], params)


def sqexp_gram(points, params: SqExpKernelParams) -> np.ndarray:
    """points 为 (N,) 或 (N, d)"""
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    return params.sigma**2 * np.exp(-0.5 * d2 / params.ell**2)


def periodic_gram_jnp(weeks, ell, period: float = PHENOLOGY_PERIOD):
    """单位方差的周期核矩阵（jax）"""
    d = jnp.abs(weeks[:, None] - weeks[None, :])
    return jnp.exp(-2.0 * jnp.sin(jnp.pi * d / period) ** 2 / ell**2)


def sqexp_gram_jnp(points, ell):
    """单位方差的平方指数核矩阵（jax），points 为 (N, d)"""
    d2 = jnp.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    return jnp.exp(-0.5 * d2 / ell**2)


# ---------- Cholesky ----------


def cholesky_with_jitter(K: np.ndarray, ladder: Sequence[float] = JITTER_LADDER) -> np.ndarray:
    """依次尝试 K + jitter·I 的 Cholesky 分解，返回下三角因子"""
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ContractError(f"需要方阵，收到形状 {K.shape}")
    if not np.allclose(K, K.T, rtol=0, atol=1e-12 * max(1.0, np.abs(K).max(initial=0.0))):
        raise ContractError("矩阵不对称")
    eye = np.eye(K.shape[0])
    for jitter in ladder:
        try:
            L = scipy.linalg.cholesky(K + jitter * eye, lower=True)
        except np.linalg.LinAlgError:
            logger.debug(f"[GP] jitter={jitter:g} 时 Cholesky 失败，继续加大")
            continue
        if jitter > 0:
            logger.warning(f"[GP] Cholesky 需要 jitter={jitter:g} 才能成功 (n={K.shape[0]})")
        return L
    raise NumericalError(
        f"jitter 增加到 {ladder[-1]:g} 后 Cholesky 仍然失败 (n={K.shape[0]})",
        condition=float(np.linalg.cond(K)),
    )


def _traced_jitter(K, eye, ladder: Sequence[float]):
    if len(ladder) == 1:
        return jnp.asarray(ladder[0], K.dtype)
    ok = jnp.all(jnp.isfinite(jnp.linalg.cholesky(K + ladder[0] * eye)))
    return lax.cond(
        ok,
        lambda: jnp.asarray(ladder[0], K.dtype),
        lambda: _traced_jitter(K, eye, ladder[1:]),
    )


def cholesky_traced(K, ladder: Sequence[float] = JITTER_LADDER):
    """可在 jit 内使用的抖动阶梯：分解结果含非有限值时换下一档

    档位在 stop_gradient 后的 K 上选出，只对成功的那一次分解求导，
    失败档位的 NaN 不会混进梯度
    """
    eye = jnp.eye(K.shape[0], dtype=K.dtype)
    jitter = _traced_jitter(lax.stop_gradient(K), eye, ladder)
    return jnp.linalg.cholesky(K + jitter * eye)


# ---------- B 样条 ----------


def make_knots(n: int, lower: float = -1.0, upper: float = 1.0, degree: int = SPLINE_DEGREE) -> np.ndarray:
    """n 个基函数的钳制均匀节点向量，长度 n+degree+1"""
    if n < degree + 1:
        raise ConfigError(f"{degree} 次样条至少需要 {degree + 1} 个基函数，收到 n={n}")
    inner = np.linspace(lower, upper, n - degree + 1)
    return np.concatenate([np.full(degree, lower), inner, np.full(degree, upper)])


def bspline_basis(x, knots: np.ndarray, degree: int = SPLINE_DEGREE) -> np.ndarray:
    """Cox–de Boor 递推，x 为一维数组，返回 (len(x), n)"""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    knots = np.asarray(knots, dtype=float)
    if np.any(x < knots[0]) or np.any(x > knots[-1]):
        raise ContractError(f"x 超出节点区间 [{knots[0]}, {knots[-1]}]")
    n = len(knots) - degree - 1

    # 零次：左闭右开，右端点归入最后一个非退化区间
    B = ((knots[:-1][None, :] <= x[:, None]) & (x[:, None] < knots[1:][None, :])).astype(float)
    at_end = x == knots[-1]
    if at_end.any():
        B[at_end, :] = 0.0
        B[at_end, n - 1] = 1.0

    for k in range(1, degree + 1):
        left_den = knots[k:-1] - knots[: -k - 1]
        right_den = knots[k + 1 :] - knots[1:-k]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (x[:, None] - knots[: -k - 1]) / left_den, 0.0)
            right = np.where(right_den > 0, (knots[k + 1 :] - x[:, None]) / right_den, 0.0)
        B = left * B[:, :-1] + right * B[:, 1:]
    return B


def bspline_basis_row(x: float, knots: np.ndarray, degree: int = SPLINE_DEGREE) -> np.ndarray:
    return bspline_basis([x], knots, degree)[0]


@dataclass
class SplineSurface:
    """站点上的张量积样条设计矩阵 B (S×M) 及保留的 (g,h) 下标"""

    n: int
    knots: np.ndarray
    B: np.ndarray
    active_index: list[tuple[int, int]] = field(default_factory=list)

    @property
    def M(self) -> int:
        return self.B.shape[1]

    @property
    def index_coords(self) -> np.ndarray:
        """基函数下标缩放到 [-1,1]，作为权重 GP 的输入"""
        if not self.active_index:
            return np.zeros((0, 2))
        idx = np.asarray(self.active_index, dtype=float)
        return 2.0 * idx / (self.n - 1) - 1.0


def _site_coords(sites) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(sites, "lon"):
        return np.asarray(sites.lon, dtype=float), np.asarray(sites.lat, dtype=float)
    lon, lat = sites
    return np.asarray(lon, dtype=float), np.asarray(lat, dtype=float)


def build_spline_surface(sites, n: int, prune_eps: float = 1e-6) -> SplineSurface:
    """sites 为 SiteTable 或 (lon, lat)；只保留最大列值超过 prune_eps 的基函数乘积"""
    if n < SPLINE_DEGREE + 1:
        raise ConfigError(f"三次样条每个方向至少需要 4 个基函数，收到 n={n}")
    lon, lat = _site_coords(sites)
    knots = make_knots(n)
    bx = bspline_basis(lon, knots)
    by = bspline_basis(lat, knots)
    # 列下标 g*n+h
    full = np.einsum("sg,sh->sgh", bx, by).reshape(len(lon), n * n)
    keep = np.abs(full).max(axis=0, initial=0.0) > prune_eps
    active = [divmod(int(c), n) for c in np.flatnonzero(keep)]
    logger.info(f"[GP] 样条曲面 n={n}：保留 {keep.sum()}/{n * n} 个基函数乘积")
    return SplineSurface(n=n, knots=knots, B=full[:, keep], active_index=active)


def project_weights(z_raw, surface: SplineSurface, params: SqExpKernelParams) -> np.ndarray:
    """非中心化投影：w = σ·L·z，field = B·w"""
    z_raw = np.asarray(z_raw, dtype=float)
    if z_raw.shape != (surface.M,):
        raise ContractError(f"z_raw 长度应为 {surface.M}，收到 {z_raw.shape}")
    if surface.M == 0:
        return np.zeros(surface.B.shape[0])
    unit = sqexp_gram(surface.index_coords, SqExpKernelParams(sigma=1.0, ell=params.ell))
    L = cholesky_with_jitter(unit)
    return surface.B @ (params.sigma * (L @ z_raw))


def dump_basis_triplets(surface: SplineSurface, path: Path | str, site_ids: Sequence[int] | None = None) -> Path:
    """把 B 以稀疏三元组 (site, column, g, h, value) 写成 CSV"""
    rows, cols = np.nonzero(surface.B)
    active = np.asarray(surface.active_index, dtype=int).reshape(-1, 2)
    sites = np.asarray(site_ids)[rows] if site_ids is not None else rows
    frame = pd.DataFrame(
        {
            "site": sites,
            "column": cols,
            "g": active[cols, 0],
            "h": active[cols, 1],
            "value": surface.B[rows, cols],
        }
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path
