# diagnostics.py

"""收敛诊断：秩归一化 split-R̂、bulk / tail ESS，计算交给 arviz"""

from typing import NamedTuple

import arviz as az
import numpy as np
import pandas as pd

from .errors import ContractError
from .log import logger
from .sampler import PosteriorDraws

RHAT_MAX = 1.1
DIVERGENCE_MAX = 0.01
MIN_DRAWS = 4

SUMMARY_COLUMNS = ["name", "mean", "sd", "q2.5", "q97.5", "rhat", "ess_bulk", "ess_tail", "degenerate"]


class Diagnostic(NamedTuple):
    value: float
    degenerate: bool = False
    """参数在所有抽样中为常数"""

    def __float__(self) -> float:
        return float(self.value)


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ContractError(f"需要 (链, 抽样) 形状的数组，收到 {x.shape}")
    if x.shape[1] < MIN_DRAWS:
        raise ContractError(f"每条链至少需要 {MIN_DRAWS} 个抽样，收到 {x.shape[1]}")
    return x


def _is_constant(x: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(x)) and np.ptp(x) == 0)


def _diagnose(draws, fn, constant_value: float) -> Diagnostic:
    x = _as_chains(draws)
    if _is_constant(x):
        return Diagnostic(constant_value, True)
    if not np.all(np.isfinite(x)):
        return Diagnostic(float("nan"))
    return Diagnostic(float(fn(x)))


def rhat(draws) -> Diagnostic:
    """秩归一化 split-R̂（bulk 与折叠 tail 取大者）；常数参数定义为 1 并标记"""
    return _diagnose(draws, lambda x: az.rhat(x, method="rank"), 1.0)


def ess(draws) -> Diagnostic:
    """bulk ESS"""
    return _diagnose(draws, lambda x: az.ess(x, method="bulk"), float("nan"))


def ess_tail(draws) -> Diagnostic:
    """5% 与 95% 分位数处 ESS 的较小者"""
    return _diagnose(draws, lambda x: az.ess(x, method="tail"), float("nan"))


def to_dataset(draws: PosteriorDraws, names: list[str] | None = None):
    """PosteriorDraws → arviz 的 (chain, draw) 数据集，每个标量参数一个变量"""
    column = {name: i for i, name in enumerate(draws.names)}
    names = draws.names if names is None else names
    return az.convert_to_dataset({name: draws.draws[:, :, column[name]] for name in names})


def summarize_draws(draws: PosteriorDraws) -> pd.DataFrame:
    """逐参数汇总：均值、标准差、2.5/97.5% 分位数、R̂、ESS"""
    x = draws.draws
    if x.shape[1] < MIN_DRAWS:
        raise ContractError(f"每条链至少需要 {MIN_DRAWS} 个抽样，收到 {x.shape[1]}")
    flat = x.reshape(-1, x.shape[2])
    degenerate = np.array([_is_constant(flat[:, i]) for i in range(flat.shape[1])], dtype=bool)
    finite = np.isfinite(flat).all(axis=0)

    frame = pd.DataFrame({"name": draws.names})
    frame["mean"] = flat.mean(axis=0)
    frame["sd"] = flat.std(axis=0, ddof=1) if len(flat) > 1 else 0.0
    frame["q2.5"] = np.quantile(flat, 0.025, axis=0)
    frame["q97.5"] = np.quantile(flat, 0.975, axis=0)
    frame["rhat"] = np.where(degenerate, 1.0, np.nan)
    frame["ess_bulk"] = np.nan
    frame["ess_tail"] = np.nan
    frame["degenerate"] = degenerate

    live = [name for name, d, f in zip(draws.names, degenerate, finite) if f and not d]
    if live:
        table = az.summary(to_dataset(draws, live), kind="all", round_to="none")
        stats = table.reindex(live)
        mask = frame["name"].isin(live).to_numpy()
        frame.loc[mask, "mean"] = stats["mean"].to_numpy()
        frame.loc[mask, "sd"] = stats["sd"].to_numpy()
        frame.loc[mask, "rhat"] = stats["r_hat"].to_numpy()
        frame.loc[mask, "ess_bulk"] = stats["ess_bulk"].to_numpy()
        frame.loc[mask, "ess_tail"] = stats["ess_tail"].to_numpy()
    return frame[SUMMARY_COLUMNS]


def convergence_failures(
    summary: pd.DataFrame,
    draws: PosteriorDraws,
    *,
    rhat_max: float = RHAT_MAX,
    divergence_max: float = DIVERGENCE_MAX,
) -> list[str]:
    """严格模式下的失败原因，空列表表示通过"""
    failures = []
    live = summary[~summary["degenerate"]]
    bad = live[~(live["rhat"] < rhat_max)]
    if len(bad):
        worst = bad.sort_values("rhat", ascending=False, na_position="first").iloc[0]
        failures.append(f"{len(bad)} 个参数 R̂ ≥ {rhat_max}（最差 {worst['name']} = {worst['rhat']:.3f}）")
    if draws.divergence_fraction > divergence_max:
        failures.append(f"发散转移占比 {100 * draws.divergence_fraction:.2f}% 超过 {100 * divergence_max:.0f}%")
    for msg in failures:
        logger.warning(f"[Diagnose] {msg}")
    return failures
