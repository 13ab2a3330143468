import argparse
import asyncio
import dataclasses
import json
import logging
import os
import sys
import time
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Sequence

import aiofiles
import aiofiles.os
import aioshutil
import numpy as np
from dataclasses_json import DataClassJsonMixin
from tqdm.asyncio import tqdm

from .consts import OUTPUT_ENV_VAR, DEFAULT_OUTPUT_ROOT, EXIT_PASS, EXIT_TOLERANCE_FAILURE, EXIT_CONFIG_ERROR, \
    EXIT_NUMERICAL_ERROR, LOG_FORMAT, DEFAULT_THREADS
from .errors import ConfigError, ExperimentError, WavepacketLabError
from .experiments import (
    CatalogEntry, ExperimentConfig, ExperimentResult, GridSpec, MetricKind, PlotSpec, RunContext, ScaleSpec, SymbolSpec,
    get_experiment, list_experiments,
)
from .symbols import load_metric_data
from .utils import dump_csv, dump_json, ensure_dir

logger = logging.getLogger(__name__)

_SECTIONS: dict[str, type] = {"scale": ScaleSpec, "symbol": SymbolSpec, "grid": GridSpec}


# Config layer


def parse_override(text: str) -> tuple[list[str], Any]:
    """`a.b=value` with value read as a TOML literal, falling back to the raw string."""
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key or any(not part for part in key.split(".")):
        raise ConfigError({"--set": f"expected key=value, got {text!r}"})
    try:
        value = tomllib.loads(f"value = {raw.strip()}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.split("."), value


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    for text in overrides:
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError({".".join(path): f"'{part}' is not a table"})
            node = child
        node[path[-1]] = value
    return data


def _unknown_keys(data: dict) -> list[str]:
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = [key for key in data if key not in top]
    for section, cls in _SECTIONS.items():
        value = data.get(section)
        if isinstance(value, dict):
            names = {f.name for f in dataclasses.fields(cls)}
            unknown += [f"{section}.{key}" for key in value if key not in names]
    return unknown


def load_config(text: str, overrides: Sequence[str] = ()) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError({"config": f"not valid TOML: {e}"}) from e
    data = apply_overrides(data, overrides)
    problems = {key: "unknown key" for key in _unknown_keys(data)}
    if "experiment" not in data:
        problems["experiment"] = "required"
    for section in _SECTIONS:
        if section in data and not isinstance(data[section], dict):
            problems[section] = f"expected a table, got {data[section]!r}"
    if problems:
        raise ConfigError(problems)
    try:
        config = ExperimentConfig.from_dict(data)
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError({"config": str(e)}) from e
    config.validate()
    return config


def output_root(cli_value: str | None, config: ExperimentConfig) -> str:
    if cli_value:
        return cli_value
    if config.output:
        return config.output
    return os.environ.get(OUTPUT_ENV_VAR) or DEFAULT_OUTPUT_ROOT


# Bundle


@dataclasses.dataclass(frozen=True)
class ReportBundle(DataClassJsonMixin):
    experiment: str
    directory: str
    passed: bool
    checks: dict[str, bool]
    summary: dict[str, Any]
    runtime: float
    tables: list[str]

    @property
    def exit_code(self) -> int:
        return EXIT_PASS if self.passed else EXIT_TOLERANCE_FAILURE


async def prepare_output(root: str, name: str, overwrite: bool) -> str:
    """`<root>/<name>`, replaced when overwriting, otherwise the first free `<name>.vN`."""
    target = os.path.join(root, name)
    if await aiofiles.os.path.exists(target):
        if overwrite:
            await aioshutil.rmtree(target)
        else:
            version = 2
            while await aiofiles.os.path.exists(f"{target}.v{version}"):
                version += 1
            target = f"{target}.v{version}"
            logger.info("Output directory exists, writing to %s", target)
    await ensure_dir(target)
    return target


def plot_script(plots: Sequence[PlotSpec], tables: dict[str, list[dict]]) -> str:
    """gnuplot script over the long-format CSV tables; one PNG per plot."""
    lines = ['set datafile separator ","', "set terminal pngcairo size 900,600", "set grid"]
    for plot in plots:
        rows = tables.get(plot.table, [])
        lines += [
            "",
            f'set output "{plot.table}_{plot.y}.png"',
            f'set xlabel "{plot.x}"',
            f'set ylabel "{plot.y}"',
            "set logscale xy" if plot.logscale else "unset logscale",
        ]
        source = f'"{plot.table}.csv"'
        if plot.group is None:
            lines.append(f'plot {source} using "{plot.x}":"{plot.y}" with linespoints title "{plot.y}"')
            continue
        groups = " ".join(str(v) for v in dict.fromkeys(str(row[plot.group]) for row in rows))
        lines.append(
            f'plot for [g in "{groups}"] {source} using "{plot.x}":(strcol("{plot.group}") eq g ? column("{plot.y}") : NaN) '
            f'with linespoints title "{plot.group} = ".g'
        )
    return "\n".join(lines) + "\n"


async def write_bundle(
        directory: str,
        config: ExperimentConfig,
        config_text: str,
        result: ExperimentResult,
        plots: Sequence[PlotSpec],
        runtime: float,
        overrides: Sequence[str] = (),
) -> ReportBundle:
    files = []
    for name, rows in result.tables.items():
        await dump_csv(os.path.join(directory, f"{name}.csv"), rows)
        files.append(f"{name}.csv")
    bundle = ReportBundle(
        experiment=config.experiment,
        directory=directory,
        passed=result.passed,
        checks=result.checks,
        summary=result.summary,
        runtime=runtime,
        tables=files,
    )
    await dump_json(os.path.join(directory, "summary.json"), {
        "experiment": config.experiment,
        "seed": config.seed,
        "passed": result.passed,
        "checks": result.checks,
        "summary": result.summary,
        "runtime_seconds": runtime,
        "tables": files,
        "config": config_text,
        "overrides": list(overrides),
    })
    async with aiofiles.open(os.path.join(directory, "config.toml"), "w", encoding="utf-8", newline="") as f:
        await f.write(config_text)
    if plots:
        async with aiofiles.open(os.path.join(directory, "plot.gp"), "w", encoding="utf-8") as f:
            await f.write(plot_script(plots, result.tables))
    return bundle


# Runner


async def run_cells(cells: Sequence[Callable[[], Any]], threads: int, progress: bool = True, desc: str | None = None) -> list[Any]:
    """Run every cell on a worker pool; results come back in cell order whatever the completion order."""
    loop = asyncio.get_running_loop()
    results: list[Any] = [None] * len(cells)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        async def _task(index: int, cell: Callable[[], Any]) -> tuple[int, Any]:
            return index, await loop.run_in_executor(executor, cell)

        tasks = [asyncio.ensure_future(_task(i, cell)) for i, cell in enumerate(cells)]
        try:
            for task in tqdm.as_completed(tasks, desc=desc, disable=not progress):
                index, value = await task
                results[index] = value
        except BaseException:
            for task in tasks:
                task.cancel()
            raise
    return results


async def run(
        config: ExperimentConfig,
        config_text: str,
        out: str | None = None,
        threads: int = DEFAULT_THREADS,
        overwrite: bool = False,
        progress: bool = True,
        overrides: Sequence[str] = (),
) -> ReportBundle:
    experiment = get_experiment(config.name)
    metric_data = None
    if config.symbol.metric == MetricKind.FILE.value:
        try:
            metric_data = await load_metric_data(config.symbol.metric_path)
        except (OSError, ValueError) as e:
            raise ConfigError({"symbol.metric_path": f"cannot load metric data: {e}"}) from e
    ctx = RunContext(config=config, metric_data=metric_data)

    logger.info("Running '%s' (seed %d) with %d threads", config.experiment, config.seed, threads)
    start = time.perf_counter()
    try:
        results = await run_cells(experiment.cells(ctx), threads, progress, desc=config.experiment)
        result = experiment.aggregate(ctx, results)
    except (WavepacketLabError, ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
        raise ExperimentError(config.experiment, e) from e
    runtime = time.perf_counter() - start

    directory = await prepare_output(output_root(out, config), config.experiment, overwrite)
    bundle = await write_bundle(directory, config, config_text, result, experiment.plots, runtime, overrides)
    for check, ok in bundle.checks.items():
        (logger.info if ok else logger.warning)("Check %s: %s", check, "pass" if ok else "FAIL")
    logger.info("Bundle written to %s in %.1f s", directory, runtime)
    return bundle


# Commands


def catalog_json() -> list[dict]:
    entries = [entry.to_dict() for entry in list_experiments()]
    errors = CatalogEntry.schema().validate(entries, many=True)
    if errors:
        raise WavepacketLabError(f"Catalog does not match its schema: {errors}")
    return entries


def _print_catalog(as_json: bool):
    if as_json:
        print(json.dumps(catalog_json(), indent=4))
        return
    for entry in list_experiments():
        print(f"{entry.name:<14}{entry.description} [{entry.topic}]")
        print(f"{'':<14}required: {', '.join(entry.required)}; optional: {', '.join(entry.optional) or '-'}")


async def _run_command(args: argparse.Namespace) -> int:
    try:
        async with aiofiles.open(args.config, "r", encoding="utf-8", newline="") as f:
            text = await f.read()
    except OSError as e:
        raise ConfigError({"config": f"cannot read {args.config}: {e.strerror}"}) from e
    config = load_config(text, args.set)
    bundle = await run(config, text, args.out, args.threads, args.overwrite, not args.quiet, args.set)
    return bundle.exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wavepacket-lab", description="Desk-scale wave packet experiments.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="Run one experiment from a TOML config.")
    run_parser.add_argument("config", help="Experiment config (TOML).")
    run_parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Override a config key, e.g. scale.R=256.")
    run_parser.add_argument("--threads", type=int, default=DEFAULT_THREADS, help="Worker pool size.")
    run_parser.add_argument("--out", default=None, help=f"Output root (default: ${OUTPUT_ENV_VAR} or ./{DEFAULT_OUTPUT_ROOT}).")
    run_parser.add_argument("--overwrite", action="store_true", help="Replace an existing bundle instead of versioning it.")
    run_parser.add_argument("--quiet", action="store_true", help="Disable progress bars.")

    list_parser = commands.add_parser("list", help="List the experiment catalog.")
    list_parser.add_argument("--json", action="store_true", help="Machine-readable catalog.")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    if args.command == "list":
        _print_catalog(args.json)
        return EXIT_PASS
    try:
        return asyncio.run(_run_command(args))
    except ConfigError as e:
        for field, message in sorted(e.fields.items()):
            logger.error("Config %s: %s", field, message)
        return EXIT_CONFIG_ERROR
    except WavepacketLabError as e:
        logger.error("%s", e)
        logger.debug("Traceback", exc_info=e)
        return EXIT_NUMERICAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
