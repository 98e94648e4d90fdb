# ingest.py

"""
原始目击记录 → 模型输入

流程：读入目击 CSV（逐行校验）→ 落格 → 按观察者熟练度分流 →
推导伪访问（观察者 × 日期 × 格子）→ 确认出现矩阵 a[s,t] → 站点表与协变量。
"""

import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable

import numpy as np
import pandas as pd
import pydantic

from .errors import ConfigError, ContractError, GridError, IngestError
from .log import logger
from .records import (
    LL_CLASSES,
    GridSpec,
    ListLengthClass,
    RowError,
    Sighting,
    StudyWindow,
    week_of_year,
)

SIGHTING_COLUMNS = ["observer", "species", "date", "x", "y", "validated", "countable"]
VISIT_COLUMNS = ["site_id", "year", "week", "observer", "ll_class", "y"]
PRESENCE_COLUMNS = ["site_id", "year", "a"]

# 覆盖 [0,1] 的容差
COVARIATE_TOLERANCE = 1e-9


class ColumnMapping(pydantic.BaseModel):
    """目击 CSV 的列名映射；validated / countable 置空表示该列不存在，使用默认值"""

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    observer: str = "observer"
    species: str = "species"
    date: str = "date"
    x: str = "x"
    y: str = "y"
    validated: str | None = "validated"
    countable: str | None = "countable"


class CovariateOptions(pydantic.BaseModel):
    """站点协变量的元信息"""

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    landcover: tuple[str, ...] = ()
    """土地覆盖类（成分数据）列名"""
    dominant_landcover: str | None = None
    """不进入设计矩阵的优势类；为空时取均值最大的土地覆盖列"""
    ranges: dict[str, tuple[float, float]] = pydantic.Field(default_factory=dict)
    """地形类协变量的原始取值范围 (min, max)，用于回变换"""
    region_column: str = "region"
    """可选的区域标签列"""


# ---------- 目击记录 ----------


@dataclass
class ParseResult:
    """parse_sightings 的结果：合格记录表 + 行级错误"""

    sightings: pd.DataFrame
    errors: list[RowError] = field(default_factory=list)


def observer_token(observer_id: str, salt: str = "") -> str:
    """把观察者ID散列成稳定的匿名令牌"""
    return hashlib.sha256(f"{salt}{observer_id}".encode("utf-8")).hexdigest()[:16]


def _empty_sightings() -> pd.DataFrame:
    frame = pd.DataFrame({col: pd.Series(dtype=object) for col in SIGHTING_COLUMNS})
    frame["x"] = frame["x"].astype(float)
    frame["y"] = frame["y"].astype(float)
    frame["validated"] = frame["validated"].astype(bool)
    frame["countable"] = frame["countable"].astype(bool)
    frame["year"] = pd.Series(dtype=int)
    frame["week"] = pd.Series(dtype=int)
    return frame


def read_table(stream: IO[str] | str | Path, source: str, **kwargs) -> pd.DataFrame:
    """pd.read_csv，空文件（连表头都没有）报告为 IngestError"""
    try:
        return pd.read_csv(stream, **kwargs)
    except pd.errors.EmptyDataError:
        raise IngestError("文件为空，缺少表头", source=source, line=1) from None


def parse_sightings(
    stream: IO[str] | str | Path,
    schema: ColumnMapping | None = None,
    *,
    window: StudyWindow | None = None,
    anonymise: bool = True,
    salt: str = "",
    source: str = "sightings",
) -> ParseResult:
    """读入目击 CSV，每行一条 Sighting；坏行进入错误报告"""
    schema = schema or ColumnMapping()
    raw = read_table(stream, source, dtype=str, keep_default_na=False)
    raw.columns = [c.strip() for c in raw.columns]

    mapping = {name: getattr(schema, name) for name in SIGHTING_COLUMNS}
    missing = [col for col in mapping.values() if col is not None and col not in raw.columns]
    if missing:
        raise IngestError(f"缺少必需列: {', '.join(missing)}", source=source, line=1)

    context = {"window": window}
    records: list[dict] = []
    errors: list[RowError] = []
    for i, row in enumerate(raw.itertuples(index=False, name=None)):
        values = dict(zip(raw.columns, row))
        payload = {
            "observer_id": values[mapping["observer"]],
            "species_id": values[mapping["species"]],
            "date": values[mapping["date"]].strip(),
            "x": values[mapping["x"]].strip(),
            "y": values[mapping["y"]].strip(),
        }
        if mapping["validated"] is not None:
            payload["validated"] = values[mapping["validated"]].strip() or "0"
        if mapping["countable"] is not None:
            payload["countable"] = values[mapping["countable"]].strip() or "1"
        try:
            sighting = Sighting.model_validate(payload, context=context)
        except pydantic.ValidationError as e:
            first = e.errors()[0]
            errors.append(
                RowError(
                    line=i + 2,
                    field=".".join(str(p) for p in first["loc"]),
                    message=first["msg"],
                    raw=",".join(row),
                )
            )
            continue
        records.append(
            {
                "observer": observer_token(sighting.observer_id, salt)
                if anonymise
                else sighting.observer_id,
                "species": sighting.species_id,
                "date": sighting.date,
                "x": sighting.x,
                "y": sighting.y,
                "validated": sighting.validated,
                "countable": sighting.countable,
                "year": sighting.date.year,
                "week": week_of_year(sighting.date),
            }
        )

    if errors:
        logger.warning(f"[Ingest] {source}: {len(errors)} 行无法解析，已记入错误报告")
    if not records:
        return ParseResult(_empty_sightings(), errors)
    return ParseResult(pd.DataFrame.from_records(records), errors)


# ---------- 网格 ----------


def assign_grid(sighting: Sighting | tuple[float, float], grid: GridSpec) -> int:
    """返回点所在格子的ID（行优先，row*ncols+col）；格子左闭右开"""
    x, y = (sighting.x, sighting.y) if isinstance(sighting, Sighting) else sighting
    col = int(np.floor((x - grid.origin_x) / grid.cell_size))
    row = int(np.floor((y - grid.origin_y) / grid.cell_size))
    if not (0 <= col < grid.ncols and 0 <= row < grid.nrows):
        raise GridError(f"点 ({x}, {y}) 超出网格范围")
    return row * grid.ncols + col


def assign_grid_frame(frame: pd.DataFrame, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """批量落格，返回 (格子ID, 是否在范围内)，范围外的ID为 -1"""
    col = np.floor((frame["x"].to_numpy(float) - grid.origin_x) / grid.cell_size)
    row = np.floor((frame["y"].to_numpy(float) - grid.origin_y) / grid.cell_size)
    inside = (col >= 0) & (col < grid.ncols) & (row >= 0) & (row < grid.nrows)
    cell = np.where(inside, row * grid.ncols + col, -1).astype(np.int64)
    return cell, inside


# ---------- 站点表 ----------


@dataclass
class SiteTable:
    """站点表：格子ID、质心、[-1,1] 坐标、[0,1] 协变量"""

    cell_id: np.ndarray
    x: np.ndarray
    y: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    X: np.ndarray
    covariate_names: list[str] = field(default_factory=list)
    landcover: list[str] = field(default_factory=list)
    """X 中属于土地覆盖的列"""
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    dominant_name: str | None = None
    dominant: np.ndarray | None = None
    region: np.ndarray | None = None

    @property
    def S(self) -> int:
        return len(self.cell_id)

    @property
    def K(self) -> int:
        return self.X.shape[1]

    def index_of(self, cell_ids: Iterable[int] | np.ndarray) -> np.ndarray:
        """格子ID → 站点下标，未知格子为 -1"""
        cell_ids = np.asarray(cell_ids, dtype=np.int64)
        pos = np.searchsorted(self.cell_id, cell_ids)
        pos = np.clip(pos, 0, max(self.S - 1, 0))
        if self.S == 0:
            return np.full(cell_ids.shape, -1, dtype=np.int64)
        return np.where(self.cell_id[pos] == cell_ids, pos, -1)

    def covariate_kind(self, name: str) -> str:
        return "landcover" if name in self.landcover or name == self.dominant_name else "topographic"

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            {"site_id": self.cell_id, "x": self.x, "y": self.y, "lon": self.lon, "lat": self.lat}
        )
        for k, name in enumerate(self.covariate_names):
            frame[name] = self.X[:, k]
        if self.dominant_name is not None and self.dominant is not None:
            frame[self.dominant_name] = self.dominant
        if self.region is not None:
            frame["region"] = self.region
        return frame

    def metadata(self) -> dict:
        return {
            "covariates": self.covariate_names,
            "landcover": self.landcover,
            "dominant": self.dominant_name,
            "ranges": {k: list(v) for k, v in self.ranges.items()},
        }

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, metadata: dict) -> "SiteTable":
        names = list(metadata.get("covariates", []))
        dominant = metadata.get("dominant")
        S = len(frame)
        return cls(
            cell_id=frame["site_id"].to_numpy(np.int64),
            x=frame["x"].to_numpy(float),
            y=frame["y"].to_numpy(float),
            lon=frame["lon"].to_numpy(float),
            lat=frame["lat"].to_numpy(float),
            X=frame[names].to_numpy(float) if names else np.zeros((S, 0)),
            covariate_names=names,
            landcover=list(metadata.get("landcover", [])),
            ranges={k: tuple(v) for k, v in metadata.get("ranges", {}).items()},
            dominant_name=dominant,
            dominant=frame[dominant].to_numpy(float) if dominant else None,
            region=frame["region"].astype(str).to_numpy() if "region" in frame else None,
        )


def rescale_square(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """按正方形包围盒把坐标缩放到 [-1,1]（长边恰好铺满）"""
    if len(x) == 0:
        return np.zeros(0), np.zeros(0)
    cx = 0.5 * (x.min() + x.max())
    cy = 0.5 * (y.min() + y.max())
    half = 0.5 * max(x.max() - x.min(), y.max() - y.min())
    if half == 0:
        return np.zeros_like(x), np.zeros_like(y)
    return np.clip((x - cx) / half, -1.0, 1.0), np.clip((y - cy) / half, -1.0, 1.0)


def site_table_from_grid(grid: GridSpec, cell_ids: Iterable[int] | None = None) -> SiteTable:
    """无协变量时的站点表，默认整张网格都是站点"""
    cells = np.arange(grid.n_cells) if cell_ids is None else np.unique(np.asarray(list(cell_ids)))
    xy = np.array([grid.centroid(c) for c in cells]).reshape(-1, 2)
    lon, lat = rescale_square(xy[:, 0], xy[:, 1])
    return SiteTable(
        cell_id=cells.astype(np.int64),
        x=xy[:, 0],
        y=xy[:, 1],
        lon=lon,
        lat=lat,
        X=np.zeros((len(cells), 0)),
    )


def load_site_covariates(
    stream: IO[str] | str | Path,
    grid: GridSpec,
    options: CovariateOptions | None = None,
    *,
    expected_cells: Iterable[int] | None = None,
    source: str = "covariates",
) -> SiteTable:
    """读入站点协变量（每站点一行，取值需在 [0,1] 内）"""
    options = options or CovariateOptions()
    frame = read_table(stream, source)
    frame.columns = [c.strip() for c in frame.columns]
    if "site_id" not in frame.columns:
        raise IngestError("缺少 site_id 列", source=source, line=1)

    frame = frame.reset_index(drop=True)
    frame["_line"] = frame.index + 2
    dup = frame["site_id"].duplicated()
    if dup.any():
        line = int(frame.loc[dup, "_line"].iloc[0])
        raise IngestError(f"site_id 重复: {frame.loc[dup, 'site_id'].iloc[0]}", source=source, line=line)
    bad = (frame["site_id"] < 0) | (frame["site_id"] >= grid.n_cells)
    if bad.any():
        raise IngestError(
            f"site_id {frame.loc[bad, 'site_id'].iloc[0]} 不在网格内",
            source=source,
            line=int(frame.loc[bad, "_line"].iloc[0]),
        )
    if expected_cells is not None:
        missing = sorted(set(int(c) for c in expected_cells) - set(frame["site_id"].astype(int)))
        if missing:
            raise IngestError(f"缺少 {len(missing)} 个站点行，例如 site_id={missing[0]}", source=source)

    frame = frame.sort_values("site_id", kind="stable").reset_index(drop=True)
    region = None
    if options.region_column in frame.columns:
        region = frame[options.region_column].astype(str).to_numpy()
    cov_cols = [c for c in frame.columns if c not in ("site_id", "_line", options.region_column)]

    values = frame[cov_cols].apply(pd.to_numeric, errors="coerce").to_numpy(float) if cov_cols else np.zeros((len(frame), 0))
    if np.isnan(values).any():
        r, k = np.argwhere(np.isnan(values))[0]
        raise IngestError(f"协变量 {cov_cols[k]} 缺失或非数值", source=source, line=int(frame["_line"].iloc[r]))
    out = (values < -COVARIATE_TOLERANCE) | (values > 1.0 + COVARIATE_TOLERANCE)
    if out.any():
        r, k = np.argwhere(out)[0]
        raise IngestError(
            f"协变量 {cov_cols[k]}={values[r, k]} 超出 [0,1]",
            source=source,
            line=int(frame["_line"].iloc[r]),
        )
    values = np.clip(values, 0.0, 1.0)

    unknown = [c for c in options.landcover if c not in cov_cols]
    if unknown:
        raise ConfigError(f"配置的土地覆盖列不存在: {', '.join(unknown)}")
    dominant_name = None
    dominant = None
    if options.landcover:
        if options.dominant_landcover is not None:
            if options.dominant_landcover not in options.landcover:
                raise ConfigError(f"优势类 {options.dominant_landcover} 不在 landcover 列表中")
            dominant_name = options.dominant_landcover
        else:
            means = {c: values[:, cov_cols.index(c)].mean() for c in options.landcover}
            dominant_name = max(options.landcover, key=lambda c: (means[c], c))
        dominant = values[:, cov_cols.index(dominant_name)].copy()
        logger.info(f"[Ingest] 优势土地覆盖类 {dominant_name} 不进入设计矩阵")

    design_cols = [c for c in cov_cols if c != dominant_name]
    X = values[:, [cov_cols.index(c) for c in design_cols]] if design_cols else np.zeros((len(frame), 0))

    cells = frame["site_id"].to_numpy(np.int64)
    xy = np.array([grid.centroid(c) for c in cells]).reshape(-1, 2)
    lon, lat = rescale_square(xy[:, 0], xy[:, 1])
    return SiteTable(
        cell_id=cells,
        x=xy[:, 0],
        y=xy[:, 1],
        lon=lon,
        lat=lat,
        X=X,
        covariate_names=design_cols,
        landcover=[c for c in options.landcover if c != dominant_name],
        ranges={k: tuple(v) for k, v in options.ranges.items() if k in design_cols},
        dominant_name=dominant_name,
        dominant=dominant,
        region=region,
    )


# ---------- 访问推导 ----------


def categorize_list_length(count: int, cuts: tuple[int, int] = (1, 3)) -> ListLengthClass:
    """名录长度分类：1 → L1，2-3 → L2_3，≥4 → L4plus"""
    if count <= 0:
        raise ContractError(f"名录长度必须为正数，收到 {count}")
    if count <= cuts[0]:
        return ListLengthClass.L1
    if count <= cuts[1]:
        return ListLengthClass.L2_3
    return ListLengthClass.L4PLUS


def categorize_counts(counts: np.ndarray, cuts: tuple[int, int] = (1, 3)) -> np.ndarray:
    counts = np.asarray(counts)
    if (counts <= 0).any():
        raise ContractError("名录长度必须为正数")
    labels = np.array([c.value for c in LL_CLASSES], dtype=object)
    return labels[np.where(counts <= cuts[0], 0, np.where(counts <= cuts[1], 1, 2))]


def split_observer_streams(sightings: pd.DataFrame, threshold: int) -> tuple[set[str], set[str]]:
    """按整个研究窗口内的目击条数划分熟练 / 其他观察者"""
    if threshold < 1:
        raise ContractError(f"熟练度阈值必须 ≥ 1，收到 {threshold}")
    if sightings.empty:
        return set(), set()
    counts = sightings.groupby("observer").size()
    proficient = set(counts.index[counts >= threshold])
    return proficient, set(counts.index) - proficient


def derive_visits(
    sightings: pd.DataFrame,
    focal_species: str,
    proficient: set[str],
    cuts: tuple[int, int] = (1, 3),
) -> pd.DataFrame:
    """熟练观察者的 (观察者, 日期, 格子) 分组 → 伪访问"""
    if not proficient:
        raise ConfigError("熟练观察者集合为空，无法构建访问")
    data = sightings[sightings["observer"].isin(proficient)]
    if data.empty:
        return pd.DataFrame({c: pd.Series(dtype=int) for c in ["site", *VISIT_COLUMNS]})
    data = data.assign(
        _hit=(data["species"] == focal_species) & data["countable"].astype(bool)
    )
    grouped = data.groupby(["site_id", "date", "observer"], sort=True).agg(
        site=("site", "first"),
        year=("year", "first"),
        week=("week", "first"),
        n_species=("species", "nunique"),
        y=("_hit", "any"),
    )
    visits = grouped.reset_index()
    visits["ll_class"] = categorize_counts(visits["n_species"].to_numpy(), cuts)
    visits["y"] = visits["y"].astype(int)
    return visits[["site", "site_id", "date", "year", "week", "observer", "ll_class", "n_species", "y"]]


# ---------- 确认出现 ----------


@dataclass
class ConfirmedPresence:
    """站点 × 年份的二值确认出现矩阵"""

    a: np.ndarray
    years: list[int]

    def to_frame(self, sites: SiteTable) -> pd.DataFrame:
        S, T = self.a.shape
        return pd.DataFrame(
            {
                "site_id": np.repeat(sites.cell_id, T),
                "year": np.tile(np.asarray(self.years, dtype=int), S),
                "a": self.a.reshape(-1).astype(int),
            }
        )

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, sites: SiteTable, years: list[int]) -> "ConfirmedPresence":
        a = np.zeros((sites.S, len(years)), dtype=np.int8)
        hit = frame[frame["a"].astype(int) == 1]
        s = sites.index_of(hit["site_id"].to_numpy())
        t = np.searchsorted(years, hit["year"].to_numpy())
        ok = s >= 0
        a[s[ok], t[ok]] = 1
        return cls(a=a, years=list(years))


def build_confirmed_presence(
    visits: pd.DataFrame,
    sightings: pd.DataFrame,
    n_sites: int,
    years: list[int],
    focal_species: str,
    *,
    proficient: set[str] | None = None,
    any_stage: bool = True,
    extra: pd.DataFrame | None = None,
) -> ConfirmedPresence:
    """a[s,t]=1：熟练访问中 y=1，或任意观察者的审核记录，或外部可信来源"""
    years = list(years)
    a = np.zeros((n_sites, len(years)), dtype=np.int8)

    def mark(sites: np.ndarray, yrs: np.ndarray):
        if len(sites) == 0:
            return
        t = np.searchsorted(years, yrs)
        a[sites.astype(np.int64), t] = 1

    if not visits.empty:
        hits = visits[visits["y"] == 1]
        mark(hits["site"].to_numpy(), hits["year"].to_numpy())

    if not sightings.empty:
        focal = sightings[sightings["species"] == focal_species]
        evidence = focal["validated"].astype(bool)
        if any_stage and proficient:
            evidence |= focal["observer"].isin(proficient)
        focal = focal[evidence]
        mark(focal["site"].to_numpy(), focal["year"].to_numpy())

    if extra is not None and not extra.empty:
        mark(extra["site"].to_numpy(), extra["year"].to_numpy())
    return ConfirmedPresence(a=a, years=years)


def scale_year(t: int, t_min: int, t_max: int) -> float:
    """年份仿射缩放到 [-0.5, 0.5]"""
    if not t_min < t_max:
        raise ContractError(f"需要 t_min < t_max，收到 {t_min}, {t_max}")
    if not t_min <= t <= t_max:
        raise ContractError(f"年份 {t} 不在 [{t_min}, {t_max}] 内")
    return (t - t_min) / (t_max - t_min) - 0.5


def scale_years(years: list[int]) -> np.ndarray:
    """整段年份的 t*；只有一年时全部为 0"""
    if len(years) < 2:
        return np.zeros(len(years))
    return np.array([scale_year(t, years[0], years[-1]) for t in years])


# ---------- 整体准备 ----------


class PrepareReport(pydantic.BaseModel):
    """prepare 阶段的计数报告"""

    sightings: int = 0
    rejected_rows: int = 0
    outside_window: int = 0
    outside_grid: int = 0
    unknown_site: int = 0
    visits: int = 0
    observers: int = 0
    proficient_observers: int = 0
    confirmed_cells: int = 0
    sites: int = 0
    years: int = 0


@dataclass
class PreparedData:
    """模型所需的全部表"""

    visits: pd.DataFrame
    presence: ConfirmedPresence
    sites: SiteTable
    focal_species: str = ""

    @property
    def years(self) -> list[int]:
        return self.presence.years

    def save(self, directory: Path) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = [directory / "visits.csv", directory / "presence.csv", directory / "sites.csv", directory / "sites.json"]
        visits = self.visits if not self.visits.empty else pd.DataFrame(columns=VISIT_COLUMNS)
        visits[VISIT_COLUMNS].to_csv(paths[0], index=False)
        self.presence.to_frame(self.sites).to_csv(paths[1], index=False)
        self.sites.to_frame().to_csv(paths[2], index=False, float_format="%.12g")
        meta = self.sites.metadata() | {"years": self.years, "focal_species": self.focal_species}
        with open(paths[3], "w", encoding="utf-8") as f:
            json.dump(meta, f, ensure_ascii=False, indent=2)
        return paths

    @classmethod
    def load(cls, directory: Path) -> "PreparedData":
        directory = Path(directory)
        for name in ("visits.csv", "presence.csv", "sites.csv", "sites.json"):
            if not (directory / name).exists():
                raise IngestError(f"缺少预处理文件 {name}，请先运行 prepare", source=str(directory))
        with open(directory / "sites.json", encoding="utf-8") as f:
            meta = json.load(f)
        sites = SiteTable.from_frame(pd.read_csv(directory / "sites.csv"), meta)
        years = [int(t) for t in meta["years"]]
        visits = pd.read_csv(directory / "visits.csv", dtype={"observer": str, "ll_class": str})
        site_idx = sites.index_of(visits["site_id"].to_numpy())
        if (site_idx < 0).any():
            raise IngestError("visits.csv 中存在站点表之外的 site_id", source=str(directory / "visits.csv"))
        visits.insert(0, "site", site_idx)
        presence = ConfirmedPresence.from_frame(pd.read_csv(directory / "presence.csv"), sites, years)
        return cls(visits=visits, presence=presence, sites=sites, focal_species=meta.get("focal_species", ""))


def _source_name(src: Path | str | IO[str], default: str) -> str:
    return str(src) if isinstance(src, (str, Path)) else default


def _read_source(path: Path | str | IO[str]) -> IO[str] | Path:
    if isinstance(path, (str, Path)):
        path = Path(path)
        if not path.exists():
            raise IngestError("文件不存在", source=str(path))
        return path
    return path


def prepare_dataset(
    sightings_src: Path | str | IO[str],
    *,
    grid: GridSpec,
    window: StudyWindow,
    focal_species: str,
    threshold: int = 500,
    schema: ColumnMapping | None = None,
    covariates_src: Path | str | IO[str] | None = None,
    covariate_options: CovariateOptions | None = None,
    extra_presence_src: Path | str | IO[str] | None = None,
    cuts: tuple[int, int] = (1, 3),
    any_stage: bool = True,
    anonymise: bool = True,
    salt: str = "",
) -> tuple[PreparedData, PrepareReport, list[RowError]]:
    """完整的数据准备流程"""
    if not focal_species:
        raise ConfigError("未配置 focal_species")
    source = _source_name(sightings_src, "sightings")
    parsed = parse_sightings(_read_source(sightings_src), schema, anonymise=anonymise, salt=salt, source=source)
    frame = parsed.sightings
    report = PrepareReport(sightings=len(frame), rejected_rows=len(parsed.errors), years=len(window.years))

    in_window = frame["date"].map(window.contains).to_numpy(bool) if len(frame) else np.zeros(0, bool)
    report.outside_window = int((~in_window).sum())
    if report.outside_window:
        logger.warning(f"[Ingest] 丢弃 {report.outside_window} 条研究窗口外的记录")
    frame = frame[in_window].reset_index(drop=True)

    if covariates_src is not None:
        sites = load_site_covariates(
            _read_source(covariates_src), grid, covariate_options, source=_source_name(covariates_src, "covariates")
        )
    else:
        sites = site_table_from_grid(grid)
    report.sites = sites.S

    cell, inside = assign_grid_frame(frame, grid)
    report.outside_grid = int((~inside).sum())
    site = sites.index_of(cell)
    known = inside & (site >= 0)
    report.unknown_site = int((inside & (site < 0)).sum())
    if report.outside_grid or report.unknown_site:
        logger.warning(
            f"[Ingest] 丢弃 {report.outside_grid} 条网格外记录、{report.unknown_site} 条不在站点表中的记录"
        )
    frame = frame.assign(site_id=cell, site=site)[known].reset_index(drop=True)

    proficient, others = split_observer_streams(frame, threshold)
    report.observers = len(proficient) + len(others)
    report.proficient_observers = len(proficient)
    if frame.empty:
        visits = pd.DataFrame({c: pd.Series(dtype=int) for c in ["site", *VISIT_COLUMNS]})
    else:
        visits = derive_visits(frame, focal_species, proficient, cuts)
    report.visits = len(visits)

    extra = None
    if extra_presence_src is not None:
        extra_source = _source_name(extra_presence_src, "extra_presence")
        extra = read_table(_read_source(extra_presence_src), extra_source)
        missing = [c for c in ("site_id", "year") if c not in extra.columns]
        if missing:
            raise IngestError(f"缺少必需列: {', '.join(missing)}", source=extra_source, line=1)
        extra = extra.assign(site=sites.index_of(extra["site_id"].to_numpy()))
        extra = extra[(extra["site"] >= 0) & extra["year"].isin(window.years)]

    presence = build_confirmed_presence(
        visits,
        frame,
        sites.S,
        window.years,
        focal_species,
        proficient=proficient,
        any_stage=any_stage,
        extra=extra,
    )
    report.confirmed_cells = int(presence.a.sum())
    logger.info(
        f"[Ingest] 目击 {report.sightings} 条，访问 {report.visits} 次，"
        f"熟练观察者 {report.proficient_observers}/{report.observers}，确认格子 {report.confirmed_cells}"
    )
    return PreparedData(visits, presence, sites, focal_species), report, parsed.errors


def read_text(text: str) -> io.StringIO:
    """测试与模拟时把字符串包成流"""
    return io.StringIO(text)
