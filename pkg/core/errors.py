# errors.py


class OccupancyError(Exception):
    """本项目所有可预期错误的基类"""

    exit_code = 2


class ConfigError(OccupancyError):
    """配置缺失或取值非法"""


class IngestError(OccupancyError):
    """致命的数据读入错误（缺列、缺站点行、协变量越界等）"""

    def __init__(self, message: str, *, source: str | None = None, line: int | None = None):
        self.source = source
        self.line = line
        where = ""
        if source:
            where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}" if where else message)


class GridError(OccupancyError):
    """坐标落在网格范围之外"""


class ContractError(OccupancyError, ValueError):
    """纯函数的前置条件不满足"""


class DataConsistencyError(OccupancyError):
    """数据自相矛盾，例如 a=0 的格子里出现 y=1 的访问"""


class NumericalError(OccupancyError):
    """数值计算失败（最大抖动下 Cholesky 仍失败等）"""

    def __init__(self, message: str, *, condition: float | None = None):
        self.condition = condition
        if condition is not None:
            message = f"{message}（条件数≈{condition:.3e}）"
        super().__init__(message)


class NonFiniteError(NumericalError):
    """对数后验不是有限值，消息中指明出问题的格子或先验项"""


class InitializationError(OccupancyError):
    """采样器初始化时多次重抽仍得不到有限的对数密度"""

    exit_code = 1
