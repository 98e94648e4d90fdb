# store.py

"""
运行产物的读写：每条链一个抽样 CSV、汇总 CSV、每个命令一份 JSON 清单
"""

import json
import platform
import re
import time
from importlib import metadata
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .errors import IngestError
from .log import logger
from .sampler import PosteriorDraws

DRAW_FORMAT = "%.17g"
SUMMARY_FORMAT = "%.10g"
STAT_COLUMNS = {
    "lp__": "lp",
    "accept_stat__": "accept_stat",
    "treedepth__": "tree_depth",
    "n_leapfrog__": "n_leapfrog",
    "divergent__": "divergent",
    "energy__": "energy",
}
_LIBRARIES = ("numpy", "scipy", "pandas", "jax", "arviz", "pydantic", "json5", "colorlog")


def library_versions() -> dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in _LIBRARIES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


class RunStore:
    """一个输出目录下的所有产物"""

    def __init__(self, directory: Path | str):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []

    def path(self, name: str) -> Path:
        return self.directory / name

    def record(self, path: Path) -> Path:
        rel = str(path.relative_to(self.directory)) if path.is_relative_to(self.directory) else str(path)
        if rel not in self.outputs:
            self.outputs.append(rel)
        return path

    def write_csv(self, frame: pd.DataFrame, name: str, float_format: str = SUMMARY_FORMAT) -> Path:
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=float_format)
        return self.record(path)

    def write_json(self, payload: Any, name: str) -> Path:
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, ensure_ascii=False, indent=2, default=_json_default)
        return self.record(path)

    def read_json(self, name: str) -> Any:
        path = self.path(name)
        if not path.exists():
            raise IngestError("文件不存在", source=str(path))
        with open(path, encoding="utf-8") as f:
            return json.load(f)

    # 抽样
    def write_draws(self, draws: PosteriorDraws, prefix: str = "draws/chain") -> list[Path]:
        paths = []
        for c in range(draws.chains):
            frame = pd.DataFrame(draws.draws[c], columns=draws.names)
            for column, attr in STAT_COLUMNS.items():
                values = getattr(draws, attr)[c]
                frame[column] = values.astype(int) if attr in ("tree_depth", "n_leapfrog", "divergent") else values
            frame["stepsize__"] = draws.step_size[c] if len(draws.step_size) else np.nan
            paths.append(self.write_csv(frame, f"{prefix}_{c}.csv", float_format=DRAW_FORMAT))
        logger.info(f"[Store] 写出 {draws.chains} 条链 × {draws.n_draws} 个抽样到 {self.directory}")
        return paths

    def read_draws(self, prefix: str = "draws/chain") -> PosteriorDraws:
        folder = self.path(prefix).parent
        stem = Path(prefix).name
        pattern = re.compile(rf"{re.escape(stem)}_(\d+)\.csv$")
        files = sorted(
            (p for p in folder.glob(f"{stem}_*.csv") if pattern.search(p.name)),
            key=lambda p: int(pattern.search(p.name).group(1)),
        ) if folder.exists() else []
        if not files:
            raise IngestError("找不到抽样文件，请先运行 fit", source=str(folder))
        frames = [pd.read_csv(p) for p in files]
        meta_cols = set(STAT_COLUMNS) | {"stepsize__"}
        names = [c for c in frames[0].columns if c not in meta_cols]
        if any(list(f.columns) != list(frames[0].columns) for f in frames[1:]):
            raise IngestError("各链抽样文件的列不一致", source=str(folder))
        stack = lambda col: np.stack([f[col].to_numpy() for f in frames])  # noqa: E731
        return PosteriorDraws(
            draws=np.stack([f[names].to_numpy(float) for f in frames]),
            names=names,
            accept_stat=stack("accept_stat__").astype(float),
            tree_depth=stack("treedepth__").astype(int),
            n_leapfrog=stack("n_leapfrog__").astype(int),
            divergent=stack("divergent__").astype(bool),
            energy=stack("energy__").astype(float),
            lp=stack("lp__").astype(float),
            step_size=np.array([f["stepsize__"].iloc[0] if len(f) else np.nan for f in frames]),
        )

    # 清单
    def write_manifest(
        self,
        command: str,
        *,
        config_hash: str,
        seed: int | None,
        version: str,
        started: float,
        **extra: Any,
    ) -> Path:
        manifest = {
            "command": command,
            "config_hash": config_hash,
            "seed": seed,
            "version": version,
            "libraries": library_versions(),
            "wall_time_seconds": round(time.perf_counter() - started, 3),
            "outputs": list(self.outputs),
            **extra,
        }
        return self.write_json(manifest, f"manifest_{command}.json")


def _json_default(value: Any):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    raise TypeError(f"无法序列化 {type(value).__name__}")
