import functools
import json
import logging
import time
from pathlib import Path

import numpy as np
import typer
from pydantic import BaseModel, ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from crowdfuse.core.params import DSParams
from crowdfuse.evalkit import error_rate, prf1
from crowdfuse.exceptions import CrowdfuseError, MalformedInputError, NumericalError

EXIT_INPUT = 2
EXIT_NUMERICAL = 3

_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def setup_logging(level: str) -> None:
    """Route library logging through rich on stderr."""
    level = level.upper()
    if level not in _LEVELS:
        level = "WARNING"
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def error_payload(err: Exception) -> str:
    return json.dumps({"error": type(err).__name__, "message": str(err)})


def exit_code_for(err: Exception) -> int:
    return EXIT_NUMERICAL if isinstance(err, NumericalError) else EXIT_INPUT


def handle_errors(func):
    """Turn library and validation errors into one JSON line and an exit code."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (CrowdfuseError, ValidationError) as err:
            typer.echo(error_payload(err))
            raise typer.Exit(code=exit_code_for(err)) from None

    return wrapper


def load_ds_params(path: Path) -> DSParams:
    path = Path(path)
    if not path.is_file():
        raise MalformedInputError(f"params file not found: {path}")
    return DSParams.model_validate_json(path.read_text())


class Stopwatch:
    def __enter__(self):
        self._start = time.perf_counter()
        self.ms = 0
        return self

    def __exit__(self, *exc):
        self.ms = int(round((time.perf_counter() - self._start) * 1000))


def label_metrics(pred: np.ndarray, truth: np.ndarray | None, num_classes: int) -> dict:
    if truth is None:
        return {}
    scores = prf1(pred, truth, num_classes)
    return {
        "error": error_rate(pred, truth),
        "macro_f1": scores.macro_f1,
        "macro_precision": scores.macro_precision,
        "macro_recall": scores.macro_recall,
        "f1": scores.f1.tolist(),
        "undefined_precision": scores.undefined_precision.tolist(),
    }


def build_report(
    method: str,
    config: BaseModel | dict,
    metrics: dict,
    params_path: Path | None,
    wall_time_ms: int,
) -> dict:
    """Report layout shared by every subcommand."""
    if isinstance(config, BaseModel):
        config = config.model_dump(mode="json")
    return {
        "method": method,
        "config": config,
        "metrics": metrics,
        "params_path": str(params_path) if params_path is not None else None,
        "wall_time_ms": wall_time_ms,
    }


def display_metrics_table(title: str, metrics: dict) -> None:
    table = Table(title=title, show_header=True, header_style="bold magenta")
    table.add_column("Metric", style="cyan")
    table.add_column("Value", justify="right", style="yellow")
    for key, value in metrics.items():
        if isinstance(value, float):
            table.add_row(key, f"{value:.4f}")
        elif isinstance(value, (int, str)):
            table.add_row(key, str(value))
    Console(stderr=True).print(table)


def display_bench_table(rows: list[dict]) -> None:
    table = Table(title="Benchmark", show_header=True, header_style="bold magenta")
    table.add_column("Dataset", style="cyan")
    table.add_column("Method", style="green")
    table.add_column("Error (%)", justify="right", style="yellow")
    table.add_column("Macro F1", justify="right", style="yellow")
    table.add_column("Time (ms)", justify="right", style="dim")
    for row in rows:
        error = "failed" if row["error"] is None else f"{100 * row['error']:.2f}"
        f1 = "-" if row["macro_f1"] is None else f"{row['macro_f1']:.4f}"
        table.add_row(
            row["dataset"], row["method"], error, f1, str(row["wall_time_ms"])
        )
    Console(stderr=True).print(table)
