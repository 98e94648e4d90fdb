# records.py

import datetime
import enum

import pydantic
from pydantic import ValidationInfo


class ListLengthClass(str, enum.Enum):
    """名录长度类别，L1 为参照类"""

    L1 = "L1"
    L2_3 = "L2_3"
    L4PLUS = "L4plus"

    @property
    def code(self) -> int:
        return _LL_CODES[self]


_LL_CODES = {ListLengthClass.L1: 0, ListLengthClass.L2_3: 1, ListLengthClass.L4PLUS: 2}
LL_CLASSES = tuple(ListLengthClass)


class StudyWindow(pydantic.BaseModel):
    """研究时间窗（含两端）"""

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    start: datetime.date = datetime.date(2009, 1, 1)
    end: datetime.date = datetime.date(2024, 12, 31)

    @pydantic.model_validator(mode="after")
    def _check_order(self):
        if self.end < self.start:
            raise ValueError(f"研究窗口结束日期 {self.end} 早于开始日期 {self.start}")
        return self

    @property
    def years(self) -> list[int]:
        return list(range(self.start.year, self.end.year + 1))

    def contains(self, date: datetime.date) -> bool:
        return self.start <= date <= self.end


class GridSpec(pydantic.BaseModel):
    """规则网格：原点 + 边长（米），格子为左闭右开区间"""

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    origin_x: float = 0.0
    origin_y: float = 0.0
    cell_size: float = pydantic.Field(default=1000.0, gt=0)
    ncols: int = pydantic.Field(default=10, ge=1)
    nrows: int = pydantic.Field(default=10, ge=1)

    @property
    def n_cells(self) -> int:
        return self.ncols * self.nrows

    def centroid(self, cell_id: int) -> tuple[float, float]:
        row, col = divmod(int(cell_id), self.ncols)
        return (
            self.origin_x + (col + 0.5) * self.cell_size,
            self.origin_y + (row + 0.5) * self.cell_size,
        )


class Sighting(pydantic.BaseModel):
    """一条原始目击记录"""

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    observer_id: str
    """观察者ID（读入后会被匿名化）"""
    species_id: str
    """物种ID"""
    date: datetime.date
    """观察日期"""
    x: float = pydantic.Field(allow_inf_nan=False)
    """投影坐标 x（米）"""
    y: float = pydantic.Field(allow_inf_nan=False)
    """投影坐标 y（米）"""
    validated: bool = False
    """是否经专家审核（有照片等证据）"""
    countable: bool = True
    """是否计为阳性探测（活体成虫）"""

    @pydantic.field_validator("observer_id", "species_id")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        value = value.strip()
        if not value:
            raise ValueError("不能为空")
        return value

    @pydantic.field_validator("date")
    @classmethod
    def _in_window(cls, value: datetime.date, info: ValidationInfo) -> datetime.date:
        window = (info.context or {}).get("window")
        if window is not None and not window.contains(value):
            raise ValueError(f"日期 {value} 不在研究窗口 [{window.start}, {window.end}] 内")
        return value


class RowError(pydantic.BaseModel):
    """行级错误记录，收集起来统一汇报而不是静默丢弃"""

    line: int
    """源文件行号（表头为第 1 行）"""
    field: str = ""
    """出错字段"""
    message: str
    """错误信息"""
    raw: str = ""
    """原始行内容"""


def week_of_year(date: datetime.date) -> int:
    """周序号 floor((day_of_year-1)/7)+1，取值 1..53，不跨年"""
    return (date.timetuple().tm_yday - 1) // 7 + 1
