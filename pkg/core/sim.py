# sim.py

"""
按已知参数正向生成数据集，以及两个校验工具：

- brute_force_loglik：显式枚举潜在状态 z 的格子似然，用来核对边缘化公式
- recovery_experiment：在模拟数据上拟合模型，检查后验区间能否覆盖真值

模拟数据与 prepare 的输入 / 输出格式一致，可以走完整的 prepare → fit → summarize 流程。
"""

import datetime
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
import pydantic
from scipy.special import expit, logsumexp

from .diagnostics import RHAT_MAX, DIVERGENCE_MAX, summarize_draws
from .errors import ConfigError, ContractError
from .ingest import SIGHTING_COLUMNS, ConfirmedPresence, PreparedData, site_table_from_grid
from .log import logger
from .model import ModelOptions, ModelState, OccupancyModel, build_layout
from .posterior import PosteriorContext, SummaryOptions, fraction_occupied_trend
from .records import LL_CLASSES, GridSpec, StudyWindow, week_of_year
from .sampler import SamplerConfig, nuts_run
from .store import RunStore

MAX_BRUTE_FORCE_VISITS = 20
RECOVERY_TARGETS = ("beta0_p", "beta_p[0]", "beta_p[1]", "sigma_obs", "beta0_psi")
TREND_TOLERANCE = 0.1

# 未在 design.truth 中给出的标量真值
DEFAULT_TRUTH: dict[str, float | list[float]] = {
    "beta0_p": -0.5,
    "beta_p": [0.5, 1.5],
    "sigma_obs": 1.0,
    "sigma_phen": 0.5,
    "ell_phen": 1.0,
    "beta0_psi": 0.0,
    "beta_psi": 1.0,
    "beta_delta": 0.0,
    "sigma_deltaGP": 0.3,
    "ell_delta": 1.0,
    "sigma_deltaiid": 0.2,
    "p_mix": 0.5,
    "sigma_space": 0.5,
    "sigma_w": 0.5,
    "ell_w": 1.0,
    "sigma_v": 0.3,
    "ell_v": 1.0,
}

# L1 / L2_3 / L4plus 对应的名录长度范围（含两端）
_LIST_LENGTHS = ((1, 1), (2, 3), (4, 8))


class SimulationDesign(pydantic.BaseModel):
    """模拟数据集的规模与访问分配方式"""

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    n_sites: int = pydantic.Field(default=100, ge=1)
    n_years: int = pydantic.Field(default=10, ge=1)
    n_observers: int = pydantic.Field(default=50, ge=1)
    n_visits: int = pydantic.Field(default=2000, ge=1)
    """生成的访问数，去掉同一 (观察者, 日期, 格子) 的重复后可能略少"""
    n_covariates: int = pydantic.Field(default=1, ge=0)
    n_species: int = pydantic.Field(default=20, ge=9)
    """物种池大小（含目标物种）"""
    start_year: int = 2015
    allocation: Literal["lognormal", "uniform"] = "lognormal"
    """lognormal：各站点访问强度不均；uniform：均匀"""
    effort_sd: float = pydantic.Field(default=1.0, ge=0)
    ll_probs: tuple[float, float, float] = (0.3, 0.4, 0.3)
    cell_size: float = pydantic.Field(default=1000.0, gt=0)
    focal_species: str = "focal"
    regions: bool = True
    """按纬度给站点打 north / south 区域标签"""
    seed: int = 1
    truth: dict[str, float | list[float]] = pydantic.Field(default_factory=dict)
    """覆盖 DEFAULT_TRUTH 中的标量，或直接给出某个原始向量块"""

    @pydantic.field_validator("ll_probs")
    @classmethod
    def _check_probs(cls, value: tuple[float, float, float]):
        if min(value) < 0 or not math.isclose(sum(value), 1.0, abs_tol=1e-9):
            raise ValueError(f"名录长度类别概率必须非负且和为 1，收到 {value}")
        return value

    @property
    def years(self) -> list[int]:
        return list(range(self.start_year, self.start_year + self.n_years))

    @property
    def window(self) -> StudyWindow:
        return StudyWindow(
            start=datetime.date(self.start_year, 1, 1),
            end=datetime.date(self.start_year + self.n_years - 1, 12, 31),
        )

    @property
    def grid(self) -> GridSpec:
        ncols = math.ceil(math.sqrt(self.n_sites))
        return GridSpec(cell_size=self.cell_size, ncols=ncols, nrows=math.ceil(self.n_sites / ncols))

    @property
    def observer_ids(self) -> list[str]:
        width = max(3, len(str(self.n_observers)))
        return [f"obs{o + 1:0{width}d}" for o in range(self.n_observers)]


@dataclass
class TruthRecord:
    """生成数据时用到的全部真值"""

    state: ModelState
    psi: np.ndarray
    """(S, T)"""
    z: np.ndarray
    """(S, T) 的实际占有状态"""
    p_visit: np.ndarray
    """每次访问的真实探测概率，顺序与访问表一致"""
    observers: list[str] = field(default_factory=list)

    @property
    def realized_fraction(self) -> np.ndarray:
        """每年被占站点的比例"""
        return self.z.mean(axis=0)

    def value(self, name: str) -> float:
        """按参数名（如 beta_p[1]）取真值"""
        flat = dict(zip(self.state.layout.names, self.state.to_flat()))
        if name not in flat:
            raise ContractError(f"真值中没有参数 {name}")
        return float(flat[name])

    def to_json(self) -> dict:
        return {
            "values": {k: np.asarray(v).tolist() for k, v in self.state.values.items()},
            "observers": self.observers,
            "b_obs": dict(zip(self.observers, np.asarray(self.state["b_obs_raw"]) * float(self.state["sigma_obs"]))),
            "psi": self.psi,
            "z": self.z.astype(int),
            "p_visit": self.p_visit,
            "realized_fraction": self.realized_fraction,
        }


@dataclass
class SimulatedDataset:
    design: SimulationDesign
    prepared: PreparedData
    truth: TruthRecord
    sightings: pd.DataFrame
    """prepare 可以直接读入的原始目击表"""
    covariates: pd.DataFrame

    @property
    def visits(self) -> pd.DataFrame:
        return self.prepared.visits

    @property
    def presence(self) -> ConfirmedPresence:
        return self.prepared.presence

    @property
    def sites(self):
        return self.prepared.sites

    def config_fragment(self) -> dict:
        """让 prepare 读回本数据集的配置片段（路径相对于输出目录）"""
        window = self.design.window
        return {
            "paths": {"sightings": "sightings.csv", "covariates": "covariates.csv", "output_dir": "run"},
            "grid": self.design.grid.model_dump(),
            "study_window": {"start": window.start.isoformat(), "end": window.end.isoformat()},
            "focal_species": self.design.focal_species,
            "proficiency_threshold": 1,
        }

    def save(self, directory: Path | str) -> list[Path]:
        store = RunStore(directory)
        paths = [
            store.write_csv(self.sightings, "sightings.csv", float_format="%.6f"),
            store.write_csv(self.covariates, "covariates.csv", float_format="%.12g"),
            store.write_json(self.truth.to_json() | {"design": self.design.model_dump()}, "truth.json"),
            store.write_json(self.config_fragment(), "config.json"),
        ]
        paths += self.prepared.save(store.path("prepared"))
        logger.info(f"[Sim] 模拟数据写出到 {store.directory}")
        return paths


# ---------- 站点与真值 ----------


def simulation_sites(design: SimulationDesign, rng: np.random.Generator):
    """规则网格上的前 n_sites 个格子，协变量 ~ U(0,1)"""
    sites = site_table_from_grid(design.grid, range(design.n_sites))
    names = [f"cov_{k + 1}" for k in range(design.n_covariates)]
    X = rng.uniform(size=(sites.S, design.n_covariates))
    region = np.where(sites.lat >= 0, "north", "south").astype(object) if design.regions else None
    return replace(sites, X=X, covariate_names=names, region=region)


def _frame_model(sites, design: SimulationDesign, options: ModelOptions) -> OccupancyModel:
    # 没有访问的空壳模型，只用它的样条基与潜在效应计算
    years = design.years
    presence = ConfirmedPresence(a=np.zeros((sites.S, len(years)), dtype=np.int8), years=years)
    return OccupancyModel(PreparedData(pd.DataFrame(), presence, sites, design.focal_species), options)


def make_truth(
    design: SimulationDesign,
    frame: OccupancyModel,
    rng: np.random.Generator,
) -> ModelState:
    """标量取 DEFAULT_TRUTH（可被 design.truth 覆盖），原始向量块随机抽取"""
    layout = build_layout(
        n_observers=design.n_observers,
        n_years=design.n_years,
        n_sites=design.n_sites,
        n_covariates=design.n_covariates,
        n_weights=frame.surface.M if frame.surface else 0,
        n_trend_weights=frame.trend_surface.M if frame.trend_surface else 0,
        n_cells=0,
        options=frame.options,
    )
    unknown = sorted(set(design.truth) - {b.name for b in layout.blocks})
    if unknown:
        raise ConfigError(f"模拟真值中有未知参数: {', '.join(unknown)}")

    scalars = DEFAULT_TRUTH | design.truth
    values: dict[str, np.ndarray] = {}
    for b in layout.blocks:
        if b.name in scalars:
            v = np.broadcast_to(np.asarray(scalars[b.name], dtype=float), (b.size,)).copy()
        elif b.kind == "zerosum":
            v = rng.standard_normal(b.size) if b.size >= 2 else np.zeros(b.size)
            v -= v.mean()
            # 中心化后边际方差为 (N-1)/N，放大到与模型先验的边际方差 1 一致
            if b.size >= 2:
                v *= np.sqrt(b.size / (b.size - 1))
        else:
            v = rng.standard_normal(b.size)
        if b.kind == "zerosum" and b.size >= 2 and abs(v.sum()) > 1e-9:
            raise ConfigError(f"{b.name} 必须和为 0")
        values[b.name] = v if b.vector else v[0]
    return ModelState(values, layout)


# ---------- 访问 ----------


def _allocate_visits(design: SimulationDesign, rng: np.random.Generator) -> pd.DataFrame:
    S, n = design.n_sites, design.n_visits
    if design.allocation == "lognormal":
        weights = rng.lognormal(0.0, design.effort_sd, S)
    else:
        weights = np.ones(S)
    site = rng.choice(S, size=n, p=weights / weights.sum())
    year = np.asarray(design.years)[rng.integers(design.n_years, size=n)]
    observer = rng.integers(design.n_observers, size=n)
    day = rng.uniform(size=n)
    dates = []
    for t, u in zip(year, day):
        first = datetime.date(int(t), 1, 1)
        n_days = (datetime.date(int(t) + 1, 1, 1) - first).days
        dates.append(first + datetime.timedelta(days=int(u * n_days)))
    ll_code = rng.choice(len(LL_CLASSES), size=n, p=design.ll_probs)
    n_species = np.array([rng.integers(_LIST_LENGTHS[c][0], _LIST_LENGTHS[c][1] + 1) for c in ll_code])

    ids = np.asarray(design.observer_ids, dtype=object)
    visits = pd.DataFrame(
        {
            "site": site,
            "site_id": site,
            "date": dates,
            "year": year,
            "week": [week_of_year(d) for d in dates],
            "observer": ids[observer],
            "obs_index": observer,
            "ll_class": [LL_CLASSES[c].value for c in ll_code],
            "ll_code": ll_code,
            "n_species": n_species,
        }
    )
    # 一个 (格子, 日期, 观察者) 组合只算一次访问
    visits = visits.drop_duplicates(["site_id", "date", "observer"], keep="first")
    return visits.sort_values(["site_id", "date", "observer"], kind="stable").reset_index(drop=True)


def _species_lists(visits: pd.DataFrame, design: SimulationDesign, rng: np.random.Generator) -> pd.DataFrame:
    others = np.array([f"sp{j:02d}" for j in range(1, design.n_species)], dtype=object)
    grid = design.grid
    rows = []
    for v in visits.itertuples(index=False):
        if v.y:
            species = [design.focal_species, *rng.choice(others, size=v.n_species - 1, replace=False)]
        else:
            species = list(rng.choice(others, size=v.n_species, replace=False))
        cx, cy = grid.centroid(v.site_id)
        for sp in species:
            dx, dy = rng.uniform(-0.45, 0.45, size=2) * grid.cell_size
            rows.append((v.observer, sp, v.date.isoformat(), cx + dx, cy + dy, 0, 1))
    return pd.DataFrame(rows, columns=SIGHTING_COLUMNS)


def simulate_dataset(
    design: SimulationDesign | None = None,
    truth: ModelState | None = None,
    *,
    options: ModelOptions | None = None,
) -> SimulatedDataset:
    """z ~ Bernoulli(ψ)，y ~ Bernoulli(p·z)，a 为各格子访问中 y 的最大值；给定种子结果确定"""
    design = design or SimulationDesign()
    options = options or ModelOptions()
    site_seq, truth_seq, visit_seq, state_seq = np.random.SeedSequence(design.seed).spawn(4)
    rng_sites = np.random.Generator(np.random.PCG64(site_seq))
    rng_truth = np.random.Generator(np.random.PCG64(truth_seq))
    rng_visits = np.random.Generator(np.random.PCG64(visit_seq))
    rng_state = np.random.Generator(np.random.PCG64(state_seq))

    sites = simulation_sites(design, rng_sites)
    frame = _frame_model(sites, design, options)
    if truth is None:
        truth = make_truth(design, frame, rng_truth)
    elif (truth.layout.n_sites, truth.layout.n_years, truth.layout.n_observers) != (
        design.n_sites,
        design.n_years,
        design.n_observers,
    ):
        raise ContractError("真值的站点 / 年份 / 观察者个数与模拟设计不一致")

    effects = frame.effects(truth)
    psi = frame.occupancy_probability(truth)
    z = (rng_state.uniform(size=psi.shape) < psi).astype(np.int8)

    visits = _allocate_visits(design, rng_visits)
    t = visits["year"].to_numpy() - design.start_year
    s = visits["site"].to_numpy()
    beta_p = np.asarray(truth["beta_p"], dtype=float)
    ll = visits["ll_code"].to_numpy()
    logit_p = (
        float(truth["beta0_p"])
        + np.where(ll > 0, beta_p[np.maximum(ll - 1, 0)], 0.0)
        + np.asarray(effects.b_obs)[visits["obs_index"].to_numpy()]
        + np.asarray(effects.f_phen)[visits["week"].to_numpy() - 1]
    )
    p_visit = expit(logit_p)
    visits["y"] = (rng_visits.uniform(size=len(visits)) < p_visit * z[s, t]).astype(int)

    a = np.zeros_like(z)
    hits = visits[visits["y"] == 1]
    a[hits["site"].to_numpy(), hits["year"].to_numpy() - design.start_year] = 1

    sightings = _species_lists(visits, design, rng_visits)
    covariates = pd.DataFrame({"site_id": sites.cell_id})
    for k, name in enumerate(sites.covariate_names):
        covariates[name] = sites.X[:, k]
    if sites.region is not None:
        covariates["region"] = sites.region

    visits = visits.drop(columns=["obs_index", "ll_code"])
    presence = ConfirmedPresence(a=a, years=design.years)
    prepared = PreparedData(visits, presence, sites, design.focal_species)
    record = TruthRecord(state=truth, psi=psi, z=z, p_visit=p_visit, observers=design.observer_ids)
    logger.info(
        f"[Sim] 站点 {design.n_sites}，年份 {design.n_years}，访问 {len(visits)}，"
        f"实际占有比例 {z.mean():.3f}，确认格子 {int(a.sum())}"
    )
    return SimulatedDataset(design, prepared, record, sightings, covariates)


# ---------- 校验工具 ----------


def brute_force_loglik(y, a: int, p, psi: float) -> float:
    """log Σ_z P(z; ψ) Π_v P(y_v | p_v z)，a=1 时 z 只取 1"""
    y = np.asarray(y, dtype=int)
    p = np.asarray(p, dtype=float)
    if len(y) != len(p):
        raise ContractError(f"y 与 p 长度不一致：{len(y)} vs {len(p)}")
    if len(y) > MAX_BRUTE_FORCE_VISITS:
        raise ContractError(f"显式枚举最多支持 {MAX_BRUTE_FORCE_VISITS} 次访问")
    if a not in (0, 1):
        raise ContractError(f"a 必须为 0 或 1，收到 {a}")

    terms = []
    with np.errstate(divide="ignore"):
        for z in (1,) if a == 1 else (0, 1):
            lp = float(np.log(psi)) if z else float(np.log1p(-psi))
            for y_v, p_v in zip(y, p):
                q = p_v * z
                lp += float(np.log(q)) if y_v else float(np.log1p(-q))
            terms.append(lp)
    return float(logsumexp(terms))


@dataclass
class RecoveryReport:
    parameters: pd.DataFrame
    """name, truth, mean, q2.5, q97.5, covers, rhat, ess_bulk, ess_tail"""
    trend: pd.DataFrame
    """year, truth, mean, abs_error"""
    n_divergent: int
    divergence_fraction: float

    @property
    def all_covered(self) -> bool:
        return bool(self.parameters["covers"].all())

    @property
    def max_rhat(self) -> float:
        return float(self.parameters["rhat"].max())

    def failures(
        self,
        *,
        rhat_max: float = RHAT_MAX,
        divergence_max: float = DIVERGENCE_MAX,
        trend_tolerance: float = TREND_TOLERANCE,
    ) -> list[str]:
        out = []
        missed = self.parameters.loc[~self.parameters["covers"], "name"].tolist()
        if missed:
            out.append(f"95% 区间未覆盖真值: {', '.join(missed)}")
        if not self.max_rhat < rhat_max:
            out.append(f"R̂ 最大值 {self.max_rhat:.3f} ≥ {rhat_max}")
        if self.divergence_fraction > divergence_max:
            out.append(f"发散占比 {100 * self.divergence_fraction:.2f}%")
        worst = float(self.trend["abs_error"].max()) if len(self.trend) else 0.0
        if worst > trend_tolerance:
            out.append(f"年度占有比例误差 {worst:.3f} 超过 {trend_tolerance}")
        return out


def recovery_experiment(
    design: SimulationDesign | None = None,
    sampler: SamplerConfig | None = None,
    *,
    options: ModelOptions | None = None,
    truth: ModelState | None = None,
) -> RecoveryReport:
    """模拟 → 拟合 → 对比真值"""
    dataset = simulate_dataset(design, truth, options=options)
    model = OccupancyModel(dataset.prepared, options)
    draws = nuts_run(model, sampler or SamplerConfig(chains=4))
    constrained = draws.with_draws(model.constrain_draws(draws.draws), model.names)

    targets = [*RECOVERY_TARGETS, *(f"beta_psi[{k}]" for k in range(dataset.sites.K))]
    summary = summarize_draws(constrained.with_draws(
        constrained.draws[:, :, [constrained.names.index(n) for n in targets]], targets
    ))
    summary.insert(1, "truth", [dataset.truth.value(n) for n in targets])
    summary["covers"] = (summary["q2.5"] <= summary["truth"]) & (summary["truth"] <= summary["q97.5"])

    ctx = PosteriorContext(model, constrained, SummaryOptions())
    fitted = fraction_occupied_trend(ctx)
    trend = pd.DataFrame(
        {
            "year": fitted["year"],
            "truth": dataset.truth.realized_fraction,
            "mean": fitted["mean"],
        }
    )
    trend["abs_error"] = (trend["mean"] - trend["truth"]).abs()

    report = RecoveryReport(summary, trend, draws.n_divergent, draws.divergence_fraction)
    for msg in report.failures():
        logger.warning(f"[Sim] 参数恢复：{msg}")
    logger.info(
        f"[Sim] 参数恢复：覆盖 {int(summary['covers'].sum())}/{len(summary)}，"
        f"最大 R̂ {report.max_rhat:.3f}，发散 {report.n_divergent}"
    )
    return report
