"""
Methods-by-datasets comparison.

A bench config lists methods, seeds and optional real datasets:

    methods = mv,ds-em,cnmf-spa
    seeds = 0,1,2
    datasets = rte.csv:rte_truth.csv
    num_annotators = 10

Keys that are not bench settings describe a synthetic DS dataset, generated
once per seed. Without `datasets` a synthetic dataset is always used.
"""

import logging
from pathlib import Path

import numpy as np
from pydantic import Field, field_validator

from crowdfuse._constants import DEFAULT_MIN_COLABELS
from crowdfuse._types import FrozenModel, IntArray
from crowdfuse.calc.ds_em import EMConfig
from crowdfuse.calc.fusion import FusionConfig, FusionMethod, fuse
from crowdfuse.cli.utils import Stopwatch, label_metrics
from crowdfuse.core.annotations import AnnotationSet
from crowdfuse.exceptions import CrowdfuseError, MalformedInputError
from crowdfuse.ingest.config import build_model, read_config
from crowdfuse.ingest.csvio import read_annotations, read_truth
from crowdfuse.simgen import GenSpec, gen_ds

logger = logging.getLogger(__name__)


class BenchConfig(FrozenModel):
    methods: list[FusionMethod]
    seeds: list[int] = Field(default_factory=lambda: [0])
    datasets: list[str] = Field(default_factory=list)
    num_groups: int = Field(default=2, ge=1)
    refine_em: bool = False
    min_colabels: int = Field(default=DEFAULT_MIN_COLABELS, ge=1)
    max_iters: int = Field(default=500, ge=1)

    @field_validator("methods", "seeds", "datasets", mode="before")
    @classmethod
    def _wrap_single(cls, value):
        return [value] if isinstance(value, (str, int)) else value

    def fusion_config(self, method: FusionMethod, seed: int) -> FusionConfig:
        em = EMConfig(max_iters=self.max_iters, min_colabels=self.min_colabels)
        return FusionConfig(
            method=method,
            em=em,
            num_groups=self.num_groups,
            refine_em=self.refine_em,
            seed=seed,
        )


class Dataset(FrozenModel):
    name: str
    annotations: AnnotationSet
    truth: IntArray
    sequences: list[IntArray] | None = None
    seed: int = 0


def load_bench_config(path: Path) -> tuple[BenchConfig, GenSpec | None]:
    """Split a bench config file into bench settings and an optional generator spec."""
    path = Path(path)
    values = read_config(path)
    bench_keys = set(BenchConfig.model_fields)
    bench_values = {k: v for k, v in values.items() if k in bench_keys}
    bench = build_model(BenchConfig, bench_values)
    gen_values = {k: v for k, v in values.items() if k not in bench_keys}
    gen = None
    if gen_values or not bench.datasets:
        gen = build_model(GenSpec, gen_values)
    return bench, gen


def load_datasets(bench: BenchConfig, gen: GenSpec | None, root: Path) -> list[Dataset]:
    """Synthetic datasets (one per seed) followed by the listed files."""
    datasets = []
    if gen is not None:
        for seed in bench.seeds:
            sim = gen_ds(gen.model_copy(update={"seed": seed}))
            datasets.append(
                Dataset(
                    name=f"synthetic/seed={seed}",
                    annotations=sim.annotations,
                    truth=sim.truth,
                    seed=seed,
                )
            )
    for entry in bench.datasets:
        ann_name, sep, truth_name = entry.partition(":")
        if not sep or not ann_name or not truth_name:
            raise MalformedInputError(
                f"dataset entry '{entry}' must read ann.csv:truth.csv"
            )
        a, sequences = read_annotations(root / ann_name)
        truth = read_truth(root / truth_name, num_items=a.num_items)
        datasets.append(
            Dataset(
                name=Path(ann_name).stem,
                annotations=a,
                truth=truth,
                sequences=sequences,
                seed=bench.seeds[0] if bench.seeds else 0,
            )
        )
    return datasets


def run_bench(bench: BenchConfig, datasets: list[Dataset]) -> dict:
    """
    Run every method on every dataset.

    A method that fails on a dataset is recorded with its error kind rather
    than aborting the run.
    """
    rows = []
    for data in datasets:
        for method in bench.methods:
            row = {"dataset": data.name, "method": str(method)}
            with Stopwatch() as watch:
                try:
                    out = fuse(
                        data.annotations,
                        bench.fusion_config(method, data.seed),
                        data.sequences,
                    )
                except CrowdfuseError as err:
                    logger.warning("%s failed on %s: %s", method, data.name, err)
                    out, row["failure"] = None, type(err).__name__
            if out is None:
                row.update(error=None, macro_f1=None)
            else:
                k = data.annotations.num_classes
                metrics = label_metrics(out.labels, data.truth, k)
                row.update(error=metrics["error"], macro_f1=metrics["macro_f1"])
            row["wall_time_ms"] = watch.ms
            rows.append(row)

    mean_error = {}
    for method in bench.methods:
        errors = [
            r["error"]
            for r in rows
            if r["method"] == method and r["error"] is not None
        ]
        mean_error[str(method)] = float(np.mean(errors)) if errors else None
    ranking = sorted(
        (m for m, e in mean_error.items() if e is not None), key=lambda m: mean_error[m]
    )
    return {"rows": rows, "mean_error": mean_error, "ranking": ranking}
