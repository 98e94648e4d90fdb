# log.py

import logging
from pathlib import Path

import colorlog

LOGGER_NAME = "occupancy"

logger = logging.getLogger(LOGGER_NAME)
"""全局共享的日志对象，各模块统一 `from .log import logger`"""

_CONSOLE_FORMAT = "%(log_color)s[%(asctime)s] [%(levelname)s]%(reset)s %(message)s"
_FILE_FORMAT = "[%(asctime)s] [%(levelname)s] %(message)s"


def setup_logging(level: str | int = "INFO", log_file: Path | str | None = None):
    """安装控制台（彩色）与可选的文件日志处理器，重复调用只更新级别与文件"""
    logger.setLevel(level if isinstance(level, int) else level.upper())
    logger.propagate = False

    if not any(getattr(h, "_occupancy_console", False) for h in logger.handlers):
        handler = colorlog.StreamHandler()
        handler.setFormatter(
            colorlog.ColoredFormatter(
                _CONSOLE_FORMAT,
                datefmt="%H:%M:%S",
                log_colors={
                    "DEBUG": "cyan",
                    "INFO": "green",
                    "WARNING": "yellow",
                    "ERROR": "red",
                    "CRITICAL": "bold_red",
                },
            )
        )
        handler._occupancy_console = True  # type: ignore[attr-defined]
        logger.addHandler(handler)

    if log_file is not None:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        # 同一路径只挂一个文件处理器
        for h in logger.handlers:
            if isinstance(h, logging.FileHandler) and Path(h.baseFilename) == log_file.resolve():
                return logger
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(_FILE_FORMAT))
        logger.addHandler(file_handler)
    return logger
