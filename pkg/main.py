# main.py

import argparse
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

import pandas as pd

from core.config import RunConfig, config_hash, load_config, package_version
from core.diagnostics import convergence_failures, summarize_draws
from core.errors import ConfigError, OccupancyError
from core.ingest import PreparedData, prepare_dataset
from core.log import logger, setup_logging
from core.model import OccupancyModel
from core.posterior import PosteriorContext, summarize_all
from core.sampler import PosteriorDraws, SamplerConfig, nuts_run
from core.sim import simulate_dataset
from core.store import RunStore

EXIT_OK = 0
EXIT_DIAGNOSTICS = 1
EXIT_ERROR = 2

SMOKE_SAMPLER = {"chains": 2, "iterations": 10, "warmup": 5}

_COMMANDS: dict[str, Callable] = {}


def command(name: str):
    """注册子命令，函数的文档字符串即帮助信息"""

    def decorator(fn):
        _COMMANDS[name] = fn
        return fn

    return decorator


class OccupancyCLI:
    def __init__(self, config: RunConfig, *, smoke: bool = False):
        self.config = config
        self.smoke = smoke
        self.version = package_version()
        self.config_hash = config_hash(config)
        self.store = RunStore(config.paths.output_dir)

    @property
    def prepared_dir(self) -> Path:
        return self.store.path("prepared")

    def _manifest(self, name: str, started: float, seed: int | None = None, **extra):
        self.store.write_manifest(
            name,
            config_hash=self.config_hash,
            seed=seed,
            version=self.version,
            started=started,
            **extra,
        )

    def _model(self) -> OccupancyModel:
        return OccupancyModel(PreparedData.load(self.prepared_dir), self.config.model)

    def _check(self, draws: PosteriorDraws) -> tuple[pd.DataFrame, list[str]]:
        summary = summarize_draws(draws)
        return summary, convergence_failures(summary, draws)

    @command("prepare")
    def prepare(self) -> int:
        """读入目击记录与站点协变量，生成访问表、确认出现矩阵与站点表"""
        started = time.perf_counter()
        cfg = self.config
        if cfg.paths.sightings is None:
            raise ConfigError("未配置 paths.sightings")
        prepared, report, errors = prepare_dataset(
            cfg.paths.sightings,
            grid=cfg.grid,
            window=cfg.study_window,
            focal_species=cfg.focal_species,
            threshold=cfg.proficiency_threshold,
            schema=cfg.columns,
            covariates_src=cfg.paths.covariates,
            covariate_options=cfg.covariates,
            extra_presence_src=cfg.paths.extra_presence,
            cuts=cfg.list_length_cuts,
            any_stage=cfg.proficient_any_stage,
            anonymise=cfg.anonymise,
            salt=cfg.anonymise_salt,
        )
        for path in prepared.save(self.prepared_dir):
            self.store.record(path)
        if errors:
            logger.warning(f"[Ingest] {len(errors)} 行无法解析，详见 row_errors.csv")
            for err in errors[:5]:
                logger.warning(f"[Ingest] 第 {err.line} 行 {err.field}: {err.message}")
        self.store.write_csv(
            pd.DataFrame([e.model_dump() for e in errors], columns=["line", "field", "message", "raw"]),
            "row_errors.csv",
        )
        self.store.write_json(report.model_dump(), "prepare_report.json")
        self._manifest("prepare", started, counts=report.model_dump())
        return EXIT_OK

    @command("simulate")
    def simulate(self) -> int:
        """按已知参数生成模拟数据集（原始 CSV + 预处理表 + 真值）"""
        started = time.perf_counter()
        design = self.config.simulation
        dataset = simulate_dataset(design, options=self.config.model)
        for path in dataset.save(self.store.directory):
            self.store.record(path)
        self._manifest(
            "simulate",
            started,
            seed=design.seed,
            counts={
                "sites": dataset.sites.S,
                "years": len(dataset.prepared.years),
                "visits": len(dataset.visits),
                "sightings": len(dataset.sightings),
                "confirmed_cells": int(dataset.presence.a.sum()),
            },
        )
        return EXIT_OK

    @command("fit")
    def fit(self) -> int:
        """用 NUTS 拟合模型，每条链写一个抽样 CSV"""
        started = time.perf_counter()
        sampler = self.config.sampler
        if self.smoke:
            sampler = SamplerConfig.model_validate(sampler.model_dump() | SMOKE_SAMPLER)
            logger.info("[Sampler] 冒烟模式：2 条链 × 10 次迭代")
        model = self._model()
        draws = nuts_run(model, sampler)
        constrained = draws.with_draws(model.constrain_draws(draws.draws), model.names)
        self.store.write_draws(constrained)
        self.store.write_json(
            {
                "step_size": draws.step_size,
                "inv_metric": draws.inv_metric,
                "unconstrained_names": model.unconstrained_names,
            },
            "sampler.json",
        )
        _, failures = self._check(constrained)
        self._manifest(
            "fit",
            started,
            seed=sampler.seed,
            chains=sampler.chains,
            iterations=sampler.iterations,
            warmup=sampler.warmup,
            divergent=draws.n_divergent,
            failures=failures,
        )
        return self._exit(failures)

    @command("summarize")
    def summarize(self) -> int:
        """把后验抽样汇总成地图、趋势、物候、观察者与协变量效应表"""
        started = time.perf_counter()
        model = self._model()
        draws = self.store.read_draws()
        ctx = PosteriorContext(model, draws, self.config.summary)
        tables = summarize_all(ctx)
        for name, frame in tables.items():
            self.store.write_csv(frame, f"summary/{name}")
        self._manifest(
            "summarize",
            started,
            seed=self.config.summary.seed,
            tables=sorted(tables),
            draws=draws.chains * draws.n_draws,
        )
        return EXIT_OK

    @command("diagnose")
    def diagnose(self) -> int:
        """计算 R̂ 与 ESS，写出 diagnostics.csv；严格模式下不达标返回 1"""
        started = time.perf_counter()
        draws = self.store.read_draws()
        summary, failures = self._check(draws)
        self.store.write_csv(summary, "diagnostics.csv")
        live = summary[~summary["degenerate"]]
        self._manifest(
            "diagnose",
            started,
            max_rhat=float(live["rhat"].max()) if len(live) else None,
            min_ess_bulk=float(live["ess_bulk"].min()) if len(live) else None,
            divergent=draws.n_divergent,
            failures=failures,
        )
        return self._exit(failures)

    def _exit(self, failures: list[str]) -> int:
        # 冒烟模式的抽样太短，收敛检查只报告不判失败
        if failures and self.config.strict and not self.smoke:
            logger.error(f"[Diagnose] 收敛检查未通过：{'；'.join(failures)}")
            return EXIT_DIAGNOSTICS
        return EXIT_OK

    def run(self, name: str) -> int:
        return _COMMANDS[name](self)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON / JSON5 配置文件")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="覆盖任意配置项，如 sampler.chains=4"
    )
    common.add_argument("--output", type=Path, help="输出目录（paths.output_dir）")
    common.add_argument("--seed", type=int, help="采样器随机种子（sampler.seed）")
    common.add_argument("--chains", type=int, help="链数（sampler.chains）")
    common.add_argument("--iterations", type=int, help="每条链迭代数（sampler.iterations）")
    common.add_argument("--warmup", type=int, help="预热迭代数（sampler.warmup）")
    common.add_argument("--smoke", action="store_true", help="2 条链 × 10 次迭代的快速运行")
    common.add_argument("--no-strict", action="store_true", help="收敛检查不达标时仍返回 0")
    common.add_argument("--verbose", action="store_true", help="输出 DEBUG 日志")

    parser = argparse.ArgumentParser(prog="occupancy", description="公民科学目击数据的时空占有模型")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__doc__, description=fn.__doc__)
    return parser


def _overrides(args: argparse.Namespace) -> list[str]:
    out = list(args.overrides)
    flags = {
        "output": "paths.output_dir",
        "seed": "sampler.seed",
        "chains": "sampler.chains",
        "iterations": "sampler.iterations",
        "warmup": "sampler.warmup",
    }
    for attr, key in flags.items():
        value = getattr(args, attr)
        if value is not None:
            out.append(f"{key}={value}" if attr != "output" else f'{key}="{value}"')
    if args.no_strict:
        out.append("strict=false")
    if args.verbose:
        out.append("log_level=DEBUG")
    return out


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging("INFO")
    try:
        config = load_config(args.config, _overrides(args))
        setup_logging(config.log_level, Path(config.paths.output_dir) / "run.log")
        logger.info(f"[CLI] {args.command}，输出目录 {config.paths.output_dir}")
        return OccupancyCLI(config, smoke=args.smoke).run(args.command)
    except OccupancyError as e:
        logger.error(f"[CLI] {type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"[CLI] 未预期的错误: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
