# posterior.py

"""
后验抽样 → 可直接绘图的汇总表

占有概率图、被占格子比例的年度趋势（全区及各区域）、物候曲线、观察者探测概率分布、
名录长度效应、协变量边际效应（土地覆盖按成分数据重标度）、趋势斜率图、协变量符号支持度。
"""

import re
from dataclasses import dataclass
from functools import cached_property
from typing import Literal

import numpy as np
import pandas as pd
import pydantic
from scipy.special import expit

from .errors import ContractError
from .log import logger
from .model import LatentEffects, ModelState, OccupancyModel
from .records import LL_CLASSES
from .sampler import PosteriorDraws

MAP_QUANTILES = {"q025": 0.025, "q10": 0.10, "q25": 0.25, "q50": 0.50, "q75": 0.75, "q90": 0.90, "q975": 0.975}
INTERVALS = {50: (0.25, 0.75), 80: (0.10, 0.90), 95: (0.025, 0.975), 99: (0.005, 0.995)}


class SummaryOptions(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    years: tuple[int, ...] | None = None
    """输出占有概率图的年份，空则全部年份"""
    fraction_mode: Literal["expected", "realized"] = "expected"
    """expected：ψ 的均值；realized：按 P(z|数据) 重抽 z"""
    effect_grid: int = pydantic.Field(default=25, ge=2)
    thin: int = pydantic.Field(default=1, ge=1)
    seed: int = 0
    regions: bool = True


def _quantile_columns(samples: np.ndarray) -> dict[str, np.ndarray]:
    """samples 形状 (D, ...)，沿第 0 维汇总"""
    out = {"mean": samples.mean(axis=0), "sd": samples.std(axis=0, ddof=1) if len(samples) > 1 else np.zeros(samples.shape[1:])}
    qs = np.quantile(samples, list(MAP_QUANTILES.values()), axis=0)
    out.update(dict(zip(MAP_QUANTILES, qs)))
    return out


def _interval_columns(samples: np.ndarray) -> dict[str, np.ndarray]:
    out = {"mean": samples.mean(axis=0), "sd": samples.std(axis=0, ddof=1) if len(samples) > 1 else np.zeros(samples.shape[1:])}
    for level, (lo, hi) in INTERVALS.items():
        out[f"lo{level}"], out[f"hi{level}"] = np.quantile(samples, [lo, hi], axis=0)
    return out


def intervals_nested(frame: pd.DataFrame) -> bool:
    """逐行检查 50 ⊂ 80 ⊂ 95 ⊂ 99"""
    levels = [lvl for lvl in sorted(INTERVALS) if f"lo{lvl}" in frame.columns]
    ok = np.ones(len(frame), dtype=bool)
    for inner, outer in zip(levels, levels[1:]):
        ok &= frame[f"lo{outer}"].to_numpy() <= frame[f"lo{inner}"].to_numpy()
        ok &= frame[f"hi{inner}"].to_numpy() <= frame[f"hi{outer}"].to_numpy()
    for lvl in levels:
        ok &= frame[f"lo{lvl}"].to_numpy() <= frame[f"hi{lvl}"].to_numpy()
    return bool(ok.all())


@dataclass
class PosteriorContext:
    """抽样 + 模型数据；逐抽样的派生量只计算一次"""

    model: OccupancyModel
    draws: PosteriorDraws
    options: SummaryOptions = SummaryOptions()

    def __post_init__(self):
        if list(self.draws.names) != list(self.model.layout.names):
            raise ContractError("抽样的参数列与模型布局不一致，数据或模型选项可能已改变")
        if self.draws.n_draws == 0:
            raise ContractError("没有后验抽样")

    @cached_property
    def states(self) -> list[ModelState]:
        flat = self.draws.flat()[:: self.options.thin]
        return [ModelState.from_flat(row, self.model.layout) for row in flat]

    @cached_property
    def effects(self) -> list[LatentEffects]:
        return [self.model.effects(s) for s in self.states]

    @cached_property
    def psi(self) -> np.ndarray:
        """(D, S, T)"""
        return np.stack([self.model.occupancy_probability(s) for s in self.states])

    @cached_property
    def conditional(self) -> np.ndarray:
        """(D, S, T) 的 P(z=1 | 数据)"""
        return np.stack([self.model.conditional_occupancy(s) for s in self.states])

    @property
    def sites(self):
        return self.model.prepared.sites

    @property
    def years(self) -> list[int]:
        return self.model.prepared.years

    def year_index(self, year: int) -> int:
        if year not in self.years:
            raise ContractError(f"年份 {year} 不在研究窗口 {self.years[0]}..{self.years[-1]} 内")
        return self.years.index(year)

    def detection_base(self) -> np.ndarray:
        """(D,) 的 β0^p + β_L4plus"""
        return np.array([float(s["beta0_p"]) + float(np.asarray(s["beta_p"])[1]) for s in self.states])

    def f_phen(self) -> np.ndarray:
        return np.stack([np.asarray(e.f_phen) for e in self.effects])


# ---------- 占有概率图 ----------


def occupancy_map(ctx: PosteriorContext, year: int) -> pd.DataFrame:
    t = ctx.year_index(year)
    sites = ctx.sites
    frame = pd.DataFrame({"site_id": sites.cell_id, "lon": sites.lon, "lat": sites.lat})
    for key, col in _quantile_columns(ctx.psi[:, :, t]).items():
        frame[key] = col
    return frame


def mean_occupancy_map(ctx: PosteriorContext) -> pd.DataFrame:
    """各年份平均的占有概率"""
    sites = ctx.sites
    frame = pd.DataFrame({"site_id": sites.cell_id, "lon": sites.lon, "lat": sites.lat})
    for key, col in _quantile_columns(ctx.psi.mean(axis=2)).items():
        frame[key] = col
    return frame


# ---------- 趋势 ----------


def fraction_occupied_trend(
    ctx: PosteriorContext,
    site_subset=None,
    *,
    region: str = "all",
    mode: Literal["expected", "realized"] | None = None,
) -> pd.DataFrame:
    """被占格子比例的逐年后验；site_subset 为站点下标或布尔掩码，空表示全部站点"""
    mode = mode or ctx.options.fraction_mode
    S = ctx.sites.S
    if site_subset is None:
        subset = np.arange(S)
    else:
        subset = np.asarray(site_subset)
        subset = np.flatnonzero(subset) if subset.dtype == bool else subset.astype(int)
    if len(subset) == 0:
        raise ContractError(f"区域 {region} 的站点子集为空")

    if mode == "expected":
        fraction = ctx.psi[:, subset, :].mean(axis=1)
    else:
        rng = np.random.Generator(np.random.PCG64(ctx.options.seed))
        prob = ctx.conditional[:, subset, :]
        fraction = (rng.uniform(size=prob.shape) < prob).mean(axis=1)

    frame = pd.DataFrame({"year": ctx.years, "region": region, "n_sites": len(subset)})
    for key, col in _interval_columns(fraction).items():
        frame[key] = col
    return frame


def regional_trends(ctx: PosteriorContext) -> dict[str, pd.DataFrame]:
    out = {"all": fraction_occupied_trend(ctx)}
    region = ctx.sites.region
    if ctx.options.regions and region is not None:
        for label in sorted(set(region)):
            out[str(label)] = fraction_occupied_trend(ctx, region == label, region=str(label))
    return out


# ---------- 探测 ----------


def _peak(mean_curve: np.ndarray) -> int:
    # argmax 并列时取最早的一周
    return int(np.argmax(mean_curve)) + 1


def phenology_curve(ctx: PosteriorContext) -> tuple[pd.DataFrame, int]:
    """名录长度 > 3、平均观察者的每周探测概率；返回 (曲线, 峰值周)"""
    p = expit(ctx.detection_base()[:, None] + ctx.f_phen())
    frame = pd.DataFrame({"week": np.arange(1, p.shape[1] + 1)})
    for key, col in _quantile_columns(p).items():
        frame[key] = col
    return frame, _peak(frame["mean"].to_numpy())


def observer_distribution(ctx: PosteriorContext, peak_week: int | None = None) -> pd.DataFrame:
    """每个观察者在名录长度 > 3、峰值周下的后验平均探测概率"""
    if peak_week is None:
        _, peak_week = phenology_curve(ctx)
    base = ctx.detection_base() + ctx.f_phen()[:, peak_week - 1]
    b = np.stack([np.asarray(e.b_obs) for e in ctx.effects]).reshape(len(base), -1)
    p = expit(base[:, None] + b)
    return pd.DataFrame(
        {
            "observer": ctx.model.index.observers,
            "mean": p.mean(axis=0),
            "sd": p.std(axis=0, ddof=1) if len(p) > 1 else np.zeros(p.shape[1]),
        }
    )


def list_length_effect(ctx: PosteriorContext, peak_week: int | None = None) -> pd.DataFrame:
    """平均观察者、峰值周下各名录长度类的探测概率，L1 为参照类"""
    if peak_week is None:
        _, peak_week = phenology_curve(ctx)
    intercept = np.array([float(s["beta0_p"]) for s in ctx.states])
    beta = np.stack([np.asarray(s["beta_p"], dtype=float) for s in ctx.states])
    f = ctx.f_phen()[:, peak_week - 1]
    rows = []
    for cls in LL_CLASSES:
        eta = intercept + f + (beta[:, cls.code - 1] if cls.code > 0 else 0.0)
        rows.append({"ll_class": cls.value, **{k: float(v[0]) for k, v in _interval_columns(expit(eta)[:, None]).items()}})
    return pd.DataFrame(rows)


# ---------- 协变量 ----------


def _compositional_design(
    x_bar: np.ndarray,
    landcover_idx: list[int],
    k: int | None,
    v: float,
    reference_mean: float,
) -> np.ndarray:
    """把第 k 类（k 为空时是被排除的优势类）设为 v，其余土地覆盖按 (1-v)/(1-x̄_k) 缩放"""
    if reference_mean >= 1.0:
        raise ContractError("平均格子中该类占比为 1，无法按成分重标度")
    x = x_bar.copy()
    factor = (1.0 - v) / (1.0 - reference_mean)
    for j in landcover_idx:
        if j != k:
            x[j] = x_bar[j] * factor
    if k is not None:
        x[k] = v
    return x


def marginal_covariate_effect(
    ctx: PosteriorContext,
    covariate: str,
    grid: np.ndarray | None = None,
) -> pd.DataFrame:
    """平均格子、平均年份（随机效应为 0，t*=0）下 ψ 随协变量的变化"""
    sites = ctx.sites
    grid = np.linspace(0.0, 1.0, ctx.options.effect_grid) if grid is None else np.asarray(grid, dtype=float)
    names = sites.covariate_names
    x_bar = sites.X.mean(axis=0) if sites.S else np.zeros(sites.K)
    landcover_idx = [names.index(c) for c in sites.landcover if c in names]

    if covariate in names:
        k = names.index(covariate)
        kind = sites.covariate_kind(covariate)
        reference = float(x_bar[k])
    elif covariate == sites.dominant_name and sites.dominant is not None:
        k = None
        kind = "landcover"
        reference = float(sites.dominant.mean())
    else:
        raise ContractError(f"未知协变量 {covariate}")

    designs = []
    for v in grid:
        if kind == "landcover":
            designs.append(_compositional_design(x_bar, landcover_idx, k, v, reference))
        else:
            x = x_bar.copy()
            x[k] = v
            designs.append(x)
    designs = np.asarray(designs).reshape(len(grid), sites.K)

    intercept = np.array([float(s["beta0_psi"]) for s in ctx.states])
    beta = np.stack([np.asarray(s["beta_psi"], dtype=float).reshape(sites.K) for s in ctx.states])
    psi = expit(intercept[:, None] + beta @ designs.T)

    frame = pd.DataFrame({"covariate": covariate, "kind": kind, "value": grid})
    lo, hi = sites.ranges.get(covariate, (0.0, 1.0))
    frame["value_original"] = lo + grid * (hi - lo) if kind == "topographic" else grid
    for key, col in _interval_columns(psi).items():
        frame[key] = col
    return frame


def covariate_effects(ctx: PosteriorContext) -> pd.DataFrame:
    names = list(ctx.sites.covariate_names)
    if ctx.sites.dominant_name is not None and ctx.sites.dominant is not None:
        names.append(ctx.sites.dominant_name)
    if not names:
        return pd.DataFrame(columns=["covariate", "kind", "value", "value_original", *_interval_columns(np.zeros((2, 1)))])
    return pd.concat([marginal_covariate_effect(ctx, n) for n in names], ignore_index=True)


def covariate_support(draws: PosteriorDraws, names: list[str] | None = None) -> pd.DataFrame:
    """每个 β^ψ 系数为正的后验概率"""
    beta = draws.block("beta_psi")
    K = beta.shape[2]
    names = list(names) if names else [f"beta_psi[{k}]" for k in range(K)]
    if K == 0:
        return pd.DataFrame({"covariate": pd.Series(dtype=str), "p_positive": pd.Series(dtype=float)})
    beta = beta.reshape(-1, K)
    return pd.DataFrame({"covariate": names, "p_positive": (beta > 0).mean(axis=0)})


def trend_slope_map(ctx: PosteriorContext) -> pd.DataFrame:
    """每个站点趋势斜率 ς_s 的后验均值、标准差与 P(ς_s > 0)"""
    if not ctx.model.layout.trend_surface:
        raise ContractError("模型中没有趋势斜率面")
    varsigma = np.stack([np.asarray(e.varsigma) for e in ctx.effects])
    sites = ctx.sites
    return pd.DataFrame(
        {
            "site_id": sites.cell_id,
            "lon": sites.lon,
            "lat": sites.lat,
            "mean": varsigma.mean(axis=0),
            "sd": varsigma.std(axis=0, ddof=1) if len(varsigma) > 1 else np.zeros(sites.S),
            "p_positive": (varsigma > 0).mean(axis=0),
        }
    )


# ---------- 全部输出 ----------


def file_slug(label: str) -> str:
    """区域标签 → 可用作文件名的片段（路径分隔符、空白等替换为下划线）"""
    slug = re.sub(r"[^\w.-]+", "_", str(label).strip()).strip("_.")
    return slug or "unnamed"


def summarize_all(ctx: PosteriorContext) -> dict[str, pd.DataFrame]:
    """文件名 → 表"""
    out: dict[str, pd.DataFrame] = {}
    years = ctx.options.years or tuple(ctx.years)
    for year in years:
        out[f"occupancy_map_{year}.csv"] = occupancy_map(ctx, year)
    out["occupancy_mean.csv"] = mean_occupancy_map(ctx)
    for region, frame in regional_trends(ctx).items():
        slug = file_slug(region)
        name, k = f"trend_{slug}.csv", 1
        while name in out or name == "trend_slopes.csv":
            k += 1
            name = f"trend_{slug}_{k}.csv"
        out[name] = frame
    phen, peak = phenology_curve(ctx)
    out["phenology.csv"] = phen
    out["observers.csv"] = observer_distribution(ctx, peak)
    out["list_length.csv"] = list_length_effect(ctx, peak)
    out["covariate_effects.csv"] = covariate_effects(ctx)
    out["covariate_support.csv"] = covariate_support(ctx.draws, ctx.sites.covariate_names or None)
    if ctx.model.layout.trend_surface:
        out["trend_slopes.csv"] = trend_slope_map(ctx)

    for name, frame in out.items():
        if "lo50" in frame.columns and not intervals_nested(frame):
            raise ContractError(f"{name} 中存在不嵌套的可信区间")
    logger.info(f"[Summary] 峰值周 {peak}，共 {len(out)} 个输出表")
    return out
