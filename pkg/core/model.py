# model.py

"""
时空占有模型的对数后验

无约束参数向量 θ 按 ParameterLayout 切块：尺度参数取对数、空间信号 p 取 logit、
零和块用等距 Helmert 变换从 N-1 维映到零和超平面。潜在占有状态 z 被解析边缘化：

    a=1:  log ψ + Σ_v [y log p + (1-y) log(1-p)]
    a=0:  logaddexp(log(1-ψ), log ψ + Σ_v log(1-p))

对数后验与梯度由 jax.value_and_grad 在 jit 下求得。
"""

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Literal, Mapping, NamedTuple

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp
import numpy as np
import pandas as pd
import pydantic
from jax.scipy.special import gammaln

from .errors import ContractError, DataConsistencyError, NonFiniteError
from .gp import PHENOLOGY_PERIOD, SplineSurface, build_spline_surface, cholesky_traced, periodic_gram_jnp, sqexp_gram_jnp
from .ingest import PreparedData, scale_years
from .log import logger
from .records import ListLengthClass

PRIOR_SD = 3.0
INVGAMMA_SHAPE = 5.0
INVGAMMA_SCALE = 5.0
_LOG_2PI = float(np.log(2.0 * np.pi))


class ModelOptions(pydantic.BaseModel):
    """模型结构开关"""

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    phenology: bool = True
    """周期 GP 物候项 f_phen"""
    temporal_gp: bool = True
    """年份 GP 项 δ^GP"""
    temporal_iid: bool = True
    """年份独立噪声 δ^iid"""
    spatial: bool = True
    """空间随机效应 υ（非结构 + 样条投影 GP）"""
    trend_surface: bool = True
    """站点趋势斜率面 ς"""
    spline_n: int = pydantic.Field(default=20, ge=4)
    """υ^str 每个方向的基函数个数"""
    trend_spline_n: int | None = pydantic.Field(default=None, ge=4)
    """ς 的基函数个数，空则与 spline_n 相同"""
    prune_eps: float = pydantic.Field(default=1e-6, ge=0)
    zero_sum_scope: Literal["iid", "all"] = "iid"
    """零和约束的作用范围：只作用于可交换的独立块，或所有原始块"""


# ---------- 参数布局 ----------

BlockKind = Literal["normal", "std", "zerosum", "scale", "length", "unit"]


@dataclass(frozen=True)
class Block:
    name: str
    kind: BlockKind
    size: int
    vector: bool = True

    @property
    def raw_size(self) -> int:
        if self.kind == "zerosum":
            return self.size - 1 if self.size >= 2 else 0
        return self.size


@dataclass(frozen=True)
class ParameterLayout:
    """参数块的顺序与尺寸；可哈希，作为 jit 的静态参数"""

    blocks: tuple[Block, ...]
    n_sites: int
    n_years: int
    n_observers: int
    n_cells: int
    phenology: bool = True
    temporal_gp: bool = True
    temporal_iid: bool = True
    spatial: bool = True
    trend_surface: bool = True

    @cached_property
    def raw_slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for b in self.blocks:
            out[b.name] = slice(start, start + b.raw_size)
            start += b.raw_size
        return out

    @cached_property
    def constrained_slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for b in self.blocks:
            out[b.name] = slice(start, start + b.size)
            start += b.size
        return out

    @property
    def dim(self) -> int:
        return sum(b.raw_size for b in self.blocks)

    @property
    def constrained_dim(self) -> int:
        return sum(b.size for b in self.blocks)

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def has(self, name: str) -> bool:
        return any(b.name == name for b in self.blocks)

    @cached_property
    def names(self) -> list[str]:
        """约束空间的展开参数名（与抽样 CSV 的列一致）"""
        names = []
        for b in self.blocks:
            if b.vector:
                names.extend(f"{b.name}[{i}]" for i in range(b.size))
            else:
                names.append(b.name)
        return names

    @cached_property
    def unconstrained_names(self) -> list[str]:
        names = []
        for b in self.blocks:
            if b.vector:
                names.extend(f"{b.name}__u[{i}]" for i in range(b.raw_size))
            else:
                names.append(f"{b.name}__u")
        return names


def build_layout(
    n_observers: int,
    n_years: int,
    n_sites: int,
    n_covariates: int,
    n_weights: int,
    n_trend_weights: int,
    n_cells: int,
    options: ModelOptions | None = None,
) -> ParameterLayout:
    options = options or ModelOptions()
    gp_raw: BlockKind = "zerosum" if options.zero_sum_scope == "all" else "std"
    blocks = [
        Block("beta0_p", "normal", 1, vector=False),
        Block("beta_p", "normal", 2),
        Block("sigma_obs", "scale", 1, vector=False),
        Block("b_obs_raw", "zerosum", n_observers),
    ]
    if options.phenology:
        blocks += [
            Block("sigma_phen", "scale", 1, vector=False),
            Block("ell_phen", "length", 1, vector=False),
            Block("z_phen_raw", gp_raw, PHENOLOGY_PERIOD),
        ]
    blocks += [
        Block("beta0_psi", "normal", 1, vector=False),
        Block("beta_psi", "normal", n_covariates),
        Block("beta_delta", "normal", 1, vector=False),
    ]
    if options.temporal_gp:
        blocks += [
            Block("sigma_deltaGP", "scale", 1, vector=False),
            Block("ell_delta", "length", 1, vector=False),
            Block("z_delta_raw", gp_raw, n_years),
        ]
    if options.temporal_iid:
        blocks += [
            Block("sigma_deltaiid", "scale", 1, vector=False),
            Block("delta_iid_raw", "zerosum", n_years),
        ]
    if options.spatial:
        blocks += [
            Block("p_mix", "unit", 1, vector=False),
            Block("sigma_space", "scale", 1, vector=False),
            Block("z_unstr_raw", "zerosum", n_sites),
            Block("sigma_w", "scale", 1, vector=False),
            Block("ell_w", "length", 1, vector=False),
            Block("z_w_raw", gp_raw, n_weights),
        ]
    if options.trend_surface:
        blocks += [
            Block("sigma_v", "scale", 1, vector=False),
            Block("ell_v", "length", 1, vector=False),
            Block("z_v_raw", gp_raw, n_trend_weights),
        ]
    return ParameterLayout(
        blocks=tuple(blocks),
        n_sites=n_sites,
        n_years=n_years,
        n_observers=n_observers,
        n_cells=n_cells,
        phenology=options.phenology,
        temporal_gp=options.temporal_gp,
        temporal_iid=options.temporal_iid,
        spatial=options.spatial,
        trend_surface=options.trend_surface,
    )


# ---------- 变换 ----------


def sum_to_zero_transform(raw):
    """等距 Helmert 变换：长度 N-1 → 长度 N 的零和向量，O(N)"""
    raw = jnp.asarray(raw, dtype=jnp.float64)
    n1 = raw.shape[0]
    if n1 < 1:
        raise ContractError("零和变换要求 N ≥ 2")
    i = jnp.arange(1, n1 + 1, dtype=raw.dtype)
    w = raw / jnp.sqrt(i * (i + 1))
    tail = jnp.cumsum(w[::-1])[::-1]
    return jnp.concatenate([tail, jnp.zeros(1, raw.dtype)]) + jnp.concatenate([jnp.zeros(1, raw.dtype), -w * i])


def sum_to_zero_inverse(x) -> np.ndarray:
    """sum_to_zero_transform 的逆（转置），x 需已零和"""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < 2:
        raise ContractError("零和变换要求 N ≥ 2")
    i = np.arange(1, n, dtype=float)
    return (np.cumsum(x)[:-1] - i * x[1:]) / np.sqrt(i * (i + 1))


def _normal_logpdf(x, sd):
    return -0.5 * _LOG_2PI - jnp.log(sd) - 0.5 * (x / sd) ** 2


def _constrain(theta, layout: ParameterLayout):
    """θ → (约束空间取值, 各块的对数雅可比)"""
    values: dict[str, Any] = {}
    log_jac: dict[str, Any] = {}
    for b in layout.blocks:
        u = theta[layout.raw_slices[b.name]]
        if b.kind in ("normal", "std"):
            v = u
            log_jac[b.name] = 0.0
        elif b.kind in ("scale", "length"):
            v = jnp.exp(u)
            log_jac[b.name] = jnp.sum(u)
        elif b.kind == "unit":
            v = jax.nn.sigmoid(u)
            log_jac[b.name] = jnp.sum(jax.nn.log_sigmoid(u) + jax.nn.log_sigmoid(-u))
        else:
            v = sum_to_zero_transform(u) if b.size >= 2 else jnp.zeros(b.size, theta.dtype)
            log_jac[b.name] = 0.0
        values[b.name] = v if b.vector else v[0]
    return values, log_jac


def _constrained_flat(theta, layout: ParameterLayout):
    values, _ = _constrain(theta, layout)
    return jnp.concatenate([jnp.atleast_1d(values[b.name]) for b in layout.blocks])


def _prior_terms(values, log_jac, layout: ParameterLayout) -> dict[str, Any]:
    terms = {}
    for b in layout.blocks:
        v = values[b.name]
        if b.kind == "normal":
            lp = jnp.sum(_normal_logpdf(v, PRIOR_SD))
        elif b.kind == "std":
            lp = jnp.sum(_normal_logpdf(v, 1.0))
        elif b.kind == "zerosum":
            lp = jnp.sum(_normal_logpdf(v, np.sqrt(b.size / (b.size - 1)))) if b.size >= 2 else 0.0
        elif b.kind == "scale":
            lp = jnp.log(2.0) + _normal_logpdf(v, PRIOR_SD)
        elif b.kind == "length":
            a, s = INVGAMMA_SHAPE, INVGAMMA_SCALE
            lp = a * jnp.log(s) - gammaln(a) - (a + 1.0) * jnp.log(v) - s / v
        else:
            lp = 0.0
        terms[b.name] = lp + log_jac[b.name]
    return terms


# ---------- 数据 ----------


class ModelData(NamedTuple):
    """jit 的数据参数（pytree）"""

    visit_cell: Any
    visit_obs: Any
    visit_week: Any
    visit_x: Any
    visit_y: Any
    cell_site: Any
    cell_year: Any
    cell_a: Any
    X: Any
    tstar: Any
    year_inputs: Any
    weeks: Any
    B_w: Any
    idx_w: Any
    B_v: Any
    idx_v: Any


@dataclass
class LikelihoodIndex:
    """只包含有访问或 a=1 的 (站点, 年份) 格子；访问按格子连续排列"""

    cell_site: np.ndarray
    cell_year: np.ndarray
    cell_a: np.ndarray
    cell_start: np.ndarray
    cell_stop: np.ndarray
    visit_cell: np.ndarray
    visit_obs: np.ndarray
    visit_week: np.ndarray
    visit_ll: np.ndarray
    visit_y: np.ndarray
    observers: list[str] = field(default_factory=list)

    @property
    def n_cells(self) -> int:
        return len(self.cell_site)

    @property
    def n_visits(self) -> int:
        return len(self.visit_cell)

    def detection_design(self) -> np.ndarray:
        """L1 为参照类的指示编码 (V, 2)"""
        X = np.zeros((self.n_visits, 2))
        for code in (1, 2):
            X[self.visit_ll == code, code - 1] = 1.0
        return X


def build_likelihood_index(visits: pd.DataFrame, a: np.ndarray, years: list[int]) -> LikelihoodIndex:
    S, T = a.shape
    if visits.empty:
        visits = pd.DataFrame({c: pd.Series(dtype=int) for c in ["site", "year", "week", "y"]}).assign(
            observer=pd.Series(dtype=str), ll_class=pd.Series(dtype=str)
        )
    site = visits["site"].to_numpy(np.int64)
    year = np.searchsorted(years, visits["year"].to_numpy(np.int64))
    if len(year) and ((year >= T) | (np.asarray(years)[np.minimum(year, T - 1)] != visits["year"].to_numpy())).any():
        raise ContractError("访问表中存在研究窗口之外的年份")
    if len(site) and ((site < 0) | (site >= S)).any():
        raise ContractError("访问表中存在站点表之外的站点")
    week = visits["week"].to_numpy(np.int64)
    if len(week) and ((week < 1) | (week > PHENOLOGY_PERIOD)).any():
        raise ContractError("周序号必须在 1..53 内")
    y = visits["y"].to_numpy(np.int64)

    bad = (y == 1) & (a[site, year] == 0) if len(y) else np.zeros(0, bool)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise DataConsistencyError(f"站点 {site[k]} 年份 {years[year[k]]} 的 a=0 但有 y=1 的访问")

    observers = sorted(visits["observer"].astype(str).unique().tolist())
    obs = np.searchsorted(observers, visits["observer"].astype(str).to_numpy())
    ll = np.array([ListLengthClass(c).code for c in visits["ll_class"]], dtype=np.int64)

    visit_key = site * T + year
    confirmed = np.flatnonzero(a.reshape(-1) == 1)
    keys = np.union1d(np.unique(visit_key), confirmed).astype(np.int64)
    visit_cell = np.searchsorted(keys, visit_key)
    order = np.argsort(visit_cell, kind="stable")
    visit_cell = visit_cell[order]
    counts = np.bincount(visit_cell, minlength=len(keys))
    stop = np.cumsum(counts)
    cell_site, cell_year = np.divmod(keys, T)
    return LikelihoodIndex(
        cell_site=cell_site,
        cell_year=cell_year,
        cell_a=a[cell_site, cell_year].astype(np.int64),
        cell_start=stop - counts,
        cell_stop=stop,
        visit_cell=visit_cell,
        visit_obs=obs[order],
        visit_week=week[order],
        visit_ll=ll[order],
        visit_y=y[order],
        observers=observers,
    )


# ---------- 效应与似然 ----------


class LatentEffects(NamedTuple):
    """由约束参数推出的潜在场"""

    b_obs: Any
    """观察者效应 (O,)"""
    f_phen: Any
    """第 1..53 周的物候效应"""
    delta: Any
    """年份效应 δ^GP + δ^iid (T,)，不含线性项 β^δ t*"""
    upsilon: Any
    """空间效应 (S,)"""
    varsigma: Any
    """趋势斜率 (S,)"""
    upsilon_unstr: Any
    upsilon_str: Any


def _gp_field(sigma, ell, z, inputs, kernel):
    if z.shape[0] == 0:
        return jnp.zeros(0, z.dtype)
    L = cholesky_traced(kernel(inputs, ell))
    return sigma * (L @ z)


def _latent_effects(values, data: ModelData, layout: ParameterLayout) -> LatentEffects:
    dtype = data.X.dtype
    S, T = layout.n_sites, layout.n_years
    b_obs = values["sigma_obs"] * values["b_obs_raw"]

    if layout.phenology:
        f_phen = _gp_field(values["sigma_phen"], values["ell_phen"], values["z_phen_raw"], data.weeks, periodic_gram_jnp)
    else:
        f_phen = jnp.zeros(PHENOLOGY_PERIOD, dtype)

    delta = jnp.zeros(T, dtype)
    if layout.temporal_gp:
        delta = delta + _gp_field(
            values["sigma_deltaGP"], values["ell_delta"], values["z_delta_raw"], data.year_inputs, sqexp_gram_jnp
        )
    if layout.temporal_iid:
        delta = delta + values["sigma_deltaiid"] * values["delta_iid_raw"]

    unstr = jnp.zeros(S, dtype)
    struct = jnp.zeros(S, dtype)
    upsilon = jnp.zeros(S, dtype)
    if layout.spatial:
        p = values["p_mix"]
        unstr = values["sigma_space"] * values["z_unstr_raw"]
        w = _gp_field(values["sigma_w"], values["ell_w"], values["z_w_raw"], data.idx_w, sqexp_gram_jnp)
        struct = data.B_w @ w if w.shape[0] else jnp.zeros(S, dtype)
        upsilon = (1.0 - p) * unstr + p * struct

    varsigma = jnp.zeros(S, dtype)
    if layout.trend_surface:
        v = _gp_field(values["sigma_v"], values["ell_v"], values["z_v_raw"], data.idx_v, sqexp_gram_jnp)
        if v.shape[0]:
            varsigma = data.B_v @ v
    return LatentEffects(b_obs, f_phen, delta, upsilon, varsigma, unstr, struct)


def _visit_logits(values, effects: LatentEffects, data: ModelData, layout: ParameterLayout):
    eta = values["beta0_p"] + data.visit_x @ values["beta_p"] + effects.f_phen[data.visit_week - 1]
    if layout.n_observers > 0:
        eta = eta + effects.b_obs[data.visit_obs]
    return eta


def _site_year_logits(values, effects: LatentEffects, data: ModelData):
    """全部 (S, T) 的占有 logit"""
    base = values["beta0_psi"] + data.X @ values["beta_psi"] + effects.upsilon
    yearly = effects.delta + values["beta_delta"] * data.tstar
    return base[:, None] + yearly[None, :] + effects.varsigma[:, None] * data.tstar[None, :]


def _cell_logits(values, effects: LatentEffects, data: ModelData):
    s, t = data.cell_site, data.cell_year
    return (
        values["beta0_psi"]
        + data.X[s] @ values["beta_psi"]
        + effects.upsilon[s]
        + effects.delta[t]
        + values["beta_delta"] * data.tstar[t]
        + effects.varsigma[s] * data.tstar[t]
    )


def _cell_loglik(values, data: ModelData, layout: ParameterLayout):
    effects = _latent_effects(values, data, layout)
    eta_v = _visit_logits(values, effects, data, layout)
    log_p = jax.nn.log_sigmoid(eta_v)
    log_q = jax.nn.log_sigmoid(-eta_v)
    bern = data.visit_y * log_p + (1.0 - data.visit_y) * log_q
    sum_bern = jax.ops.segment_sum(bern, data.visit_cell, num_segments=layout.n_cells)
    sum_q = jax.ops.segment_sum(log_q, data.visit_cell, num_segments=layout.n_cells)

    eta_c = _cell_logits(values, effects, data)
    log_psi = jax.nn.log_sigmoid(eta_c)
    log_1m_psi = jax.nn.log_sigmoid(-eta_c)
    return jnp.where(data.cell_a == 1, log_psi + sum_bern, jnp.logaddexp(log_1m_psi, log_psi + sum_q))


def _log_posterior(theta, data: ModelData, layout: ParameterLayout):
    values, log_jac = _constrain(theta, layout)
    prior = sum(_prior_terms(values, log_jac, layout).values())
    if layout.n_cells == 0:
        return prior
    return prior + jnp.sum(_cell_loglik(values, data, layout))


def _conditional_occupancy(values, data: ModelData, layout: ParameterLayout):
    """P(z=1 | 数据)：a=1 为 1；a=0 为 ψΠ(1-p) / ((1-ψ)+ψΠ(1-p))；无访问格子为 ψ"""
    effects = _latent_effects(values, data, layout)
    logits = _site_year_logits(values, effects, data)
    psi = jax.nn.sigmoid(logits)
    if layout.n_cells == 0:
        return psi
    eta_v = _visit_logits(values, effects, data, layout)
    sum_q = jax.ops.segment_sum(jax.nn.log_sigmoid(-eta_v), data.visit_cell, num_segments=layout.n_cells)
    eta_c = logits[data.cell_site, data.cell_year]
    log_num = jax.nn.log_sigmoid(eta_c) + sum_q
    post = jnp.exp(log_num - jnp.logaddexp(jax.nn.log_sigmoid(-eta_c), log_num))
    post = jnp.where(data.cell_a == 1, 1.0, post)
    return psi.at[data.cell_site, data.cell_year].set(post)


# ---------- 公开的逐项函数 ----------


class VisitCodes(NamedTuple):
    ll_class: ListLengthClass
    observer: int
    week: int


def detection_logit(visit: VisitCodes, state: Mapping[str, Any], effects: LatentEffects) -> float:
    """η = β0^p + X_v^p·β^p + b_o + f_phen(w)"""
    code = ListLengthClass(visit.ll_class).code
    eta = float(state["beta0_p"])
    if code > 0:
        eta += float(np.asarray(state["beta_p"])[code - 1])
    if len(effects.b_obs):
        eta += float(np.asarray(effects.b_obs)[visit.observer])
    return eta + float(np.asarray(effects.f_phen)[visit.week - 1])


def occupancy_logit(
    site: int,
    year: int,
    state: Mapping[str, Any],
    effects: LatentEffects,
    x_site,
    t_star: float,
) -> float:
    """η = β0^ψ + X_s·β^ψ + δ_t + υ_s + ς_s t*，其中 δ_t 含 β^δ t*"""
    eta = float(state["beta0_psi"]) + float(np.dot(np.asarray(x_site, float), np.asarray(state["beta_psi"], float)))
    eta += float(state["beta_delta"]) * t_star + float(np.asarray(effects.delta)[year])
    eta += float(np.asarray(effects.upsilon)[site]) + float(np.asarray(effects.varsigma)[site]) * t_star
    return eta


def site_year_loglik(a: int, y, p, psi: float) -> float:
    """单个 (站点, 年份) 格子的边缘化对数似然"""
    y = np.asarray(y, dtype=float)
    p = np.asarray(p, dtype=float)
    if not a and np.any(y == 1):
        raise DataConsistencyError("a=0 的格子里出现 y=1 的访问")
    log_q = np.log1p(-p)
    if a:
        return float(np.log(psi) + np.sum(y * np.log(p) + (1.0 - y) * log_q))
    return float(np.logaddexp(np.log1p(-psi), np.log(psi) + np.sum(log_q)))


def log_prior(theta, layout: ParameterLayout) -> float:
    values, log_jac = _constrain(jnp.asarray(theta, dtype=jnp.float64), layout)
    return float(sum(_prior_terms(values, log_jac, layout).values()))


# ---------- 模型状态 ----------


@dataclass
class ModelState:
    """约束空间中按名字索引的参数取值"""

    values: dict[str, np.ndarray]
    layout: ParameterLayout

    def __getitem__(self, name: str):
        return self.values[name]

    def get(self, name: str, default=None):
        return self.values.get(name, default)

    @classmethod
    def from_unconstrained(cls, theta, layout: ParameterLayout) -> "ModelState":
        values, _ = _constrain(jnp.asarray(theta, dtype=jnp.float64), layout)
        return cls({k: np.asarray(v) for k, v in values.items()}, layout)

    def to_unconstrained(self) -> np.ndarray:
        theta = np.zeros(self.layout.dim)
        for b in self.layout.blocks:
            v = np.atleast_1d(np.asarray(self.values[b.name], dtype=float))
            sl = self.layout.raw_slices[b.name]
            if b.kind in ("normal", "std"):
                theta[sl] = v
            elif b.kind in ("scale", "length"):
                theta[sl] = np.log(v)
            elif b.kind == "unit":
                theta[sl] = np.log(v) - np.log1p(-v)
            elif b.size >= 2:
                theta[sl] = sum_to_zero_inverse(v)
        return theta

    def to_flat(self) -> np.ndarray:
        return np.concatenate([np.atleast_1d(np.asarray(self.values[b.name], float)) for b in self.layout.blocks])

    @classmethod
    def from_flat(cls, flat, layout: ParameterLayout) -> "ModelState":
        flat = np.asarray(flat, dtype=float)
        values = {}
        for b in layout.blocks:
            v = flat[layout.constrained_slices[b.name]]
            values[b.name] = v if b.vector else v[0]
        return cls(values, layout)


# ---------- 模型 ----------


class OccupancyModel:
    """把预处理数据装配成可求值、可求梯度的对数后验"""

    def __init__(self, prepared: PreparedData, options: ModelOptions | None = None):
        self.options = options or ModelOptions()
        self.prepared = prepared
        sites = prepared.sites
        years = prepared.years
        self.index = build_likelihood_index(prepared.visits, prepared.presence.a, years)
        self.tstar = scale_years(years)

        self.surface: SplineSurface | None = None
        self.trend_surface: SplineSurface | None = None
        if self.options.spatial and sites.S:
            self.surface = build_spline_surface(sites, self.options.spline_n, self.options.prune_eps)
        if self.options.trend_surface and sites.S:
            n_v = self.options.trend_spline_n or self.options.spline_n
            self.trend_surface = build_spline_surface(sites, n_v, self.options.prune_eps)

        self.layout = build_layout(
            n_observers=len(self.index.observers),
            n_years=len(years),
            n_sites=sites.S,
            n_covariates=sites.K,
            n_weights=self.surface.M if self.surface else 0,
            n_trend_weights=self.trend_surface.M if self.trend_surface else 0,
            n_cells=self.index.n_cells,
            options=self.options,
        )
        self.data = self._device_data()
        self._value_and_grad = jax.jit(jax.value_and_grad(_log_posterior), static_argnums=2)
        self._cell_loglik = jax.jit(_cell_loglik, static_argnums=2)
        self._effects = jax.jit(_latent_effects, static_argnums=2)
        self._conditional = jax.jit(_conditional_occupancy, static_argnums=2)
        self._constrain_many = jax.jit(jax.vmap(_constrained_flat, in_axes=(0, None)), static_argnums=1)
        logger.info(
            f"[Model] 站点 {sites.S}，年份 {len(years)}，观察者 {len(self.index.observers)}，"
            f"访问 {self.index.n_visits}，似然格子 {self.index.n_cells}，参数维度 {self.dim}"
        )

    def _device_data(self) -> ModelData:
        idx = self.index
        sites = self.prepared.sites

        def surface_arrays(surface: SplineSurface | None):
            if surface is None:
                return jnp.zeros((sites.S, 0)), jnp.zeros((0, 2))
            return jnp.asarray(surface.B), jnp.asarray(surface.index_coords)

        B_w, idx_w = surface_arrays(self.surface)
        B_v, idx_v = surface_arrays(self.trend_surface)
        return ModelData(
            visit_cell=jnp.asarray(idx.visit_cell, dtype=jnp.int32),
            visit_obs=jnp.asarray(idx.visit_obs, dtype=jnp.int32),
            visit_week=jnp.asarray(idx.visit_week, dtype=jnp.int32),
            visit_x=jnp.asarray(idx.detection_design()),
            visit_y=jnp.asarray(idx.visit_y, dtype=jnp.float64),
            cell_site=jnp.asarray(idx.cell_site, dtype=jnp.int32),
            cell_year=jnp.asarray(idx.cell_year, dtype=jnp.int32),
            cell_a=jnp.asarray(idx.cell_a, dtype=jnp.int32),
            X=jnp.asarray(sites.X, dtype=jnp.float64).reshape(sites.S, sites.K),
            tstar=jnp.asarray(self.tstar, dtype=jnp.float64),
            year_inputs=jnp.asarray(2.0 * self.tstar, dtype=jnp.float64)[:, None],
            weeks=jnp.arange(1, PHENOLOGY_PERIOD + 1, dtype=jnp.float64),
            B_w=B_w,
            idx_w=idx_w,
            B_v=B_v,
            idx_v=idx_v,
        )

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def names(self) -> list[str]:
        return self.layout.names

    @property
    def unconstrained_names(self) -> list[str]:
        return self.layout.unconstrained_names

    # 采样器接口
    def logp_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        value, grad = self._value_and_grad(jnp.asarray(theta, dtype=jnp.float64), self.data, self.layout)
        return float(value), np.asarray(grad)

    def log_posterior(self, theta: np.ndarray) -> float:
        value, _ = self.logp_and_grad(theta)
        if not np.isfinite(value):
            raise NonFiniteError(f"对数后验不是有限值：{self.explain(theta) or '未定位到具体项'}")
        return value

    def grad_log_posterior(self, theta: np.ndarray) -> np.ndarray:
        value, grad = self.logp_and_grad(theta)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            bad = self.layout.unconstrained_names[int(np.flatnonzero(~np.isfinite(grad))[0])] if not np.all(np.isfinite(grad)) else ""
            raise NonFiniteError(f"梯度不是有限值 {bad}：{self.explain(theta) or '未定位到具体项'}")
        return grad

    def explain(self, theta: np.ndarray) -> str | None:
        """定位第一个非有限的先验项或似然格子"""
        theta = jnp.asarray(theta, dtype=jnp.float64)
        values, log_jac = _constrain(theta, self.layout)
        for name, term in _prior_terms(values, log_jac, self.layout).items():
            if not np.isfinite(float(term)):
                return f"先验项 {name}"
        if self.layout.n_cells == 0:
            return None
        cells = np.asarray(self._cell_loglik(values, self.data, self.layout))
        bad = np.flatnonzero(~np.isfinite(cells))
        if len(bad):
            k = int(bad[0])
            site_id = int(self.prepared.sites.cell_id[self.index.cell_site[k]])
            year = self.prepared.years[self.index.cell_year[k]]
            return f"格子 site_id={site_id} year={year}"
        return None

    # 约束空间
    def constrain(self, theta: np.ndarray) -> ModelState:
        return ModelState.from_unconstrained(theta, self.layout)

    def unconstrain(self, state: ModelState) -> np.ndarray:
        return state.to_unconstrained()

    def constrain_draws(self, theta: np.ndarray) -> np.ndarray:
        """(..., dim) 的无约束抽样 → (..., constrained_dim) 的约束取值"""
        theta = np.asarray(theta, dtype=float)
        flat = self._constrain_many(jnp.asarray(theta.reshape(-1, self.dim)), self.layout)
        return np.asarray(flat).reshape(*theta.shape[:-1], self.layout.constrained_dim)

    def _values(self, state: ModelState | Mapping[str, Any]):
        values = state.values if isinstance(state, ModelState) else state
        return {k: jnp.asarray(v, dtype=jnp.float64) for k, v in values.items()}

    def _layout(self, state: ModelState | Mapping[str, Any]) -> ParameterLayout:
        # 模拟时观察者个数等可以与本模型的数据不同
        return state.layout if isinstance(state, ModelState) else self.layout

    def effects(self, state: ModelState | Mapping[str, Any]) -> LatentEffects:
        effects = self._effects(self._values(state), self.data, self._layout(state))
        return LatentEffects(*(np.asarray(e) for e in effects))

    def occupancy_logits(self, state: ModelState | Mapping[str, Any]) -> np.ndarray:
        values = self._values(state)
        effects = self._effects(values, self.data, self._layout(state))
        return np.asarray(_site_year_logits(values, effects, self.data))

    def occupancy_probability(self, state: ModelState | Mapping[str, Any]) -> np.ndarray:
        """ψ[s, t]"""
        return 1.0 / (1.0 + np.exp(-self.occupancy_logits(state)))

    def conditional_occupancy(self, state: ModelState | Mapping[str, Any]) -> np.ndarray:
        """P(z[s,t]=1 | 数据)"""
        return np.asarray(self._conditional(self._values(state), self.data, self.layout))

    # 调试输出
    def cell_loglik_table(self, theta: np.ndarray) -> pd.DataFrame:
        values, _ = _constrain(jnp.asarray(theta, dtype=jnp.float64), self.layout)
        idx = self.index
        ll = np.asarray(self._cell_loglik(values, self.data, self.layout)) if idx.n_cells else np.zeros(0)
        return pd.DataFrame(
            {
                "site_id": self.prepared.sites.cell_id[idx.cell_site],
                "year": np.asarray(self.prepared.years, dtype=int)[idx.cell_year] if idx.n_cells else np.zeros(0, int),
                "a": idx.cell_a,
                "n_visits": idx.cell_stop - idx.cell_start,
                "loglik": ll,
            }
        )

    def dump_cell_loglik(self, theta: np.ndarray, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.cell_loglik_table(theta).to_csv(path, index=False, float_format="%.17g")
        return path
