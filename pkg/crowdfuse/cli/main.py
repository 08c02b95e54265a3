import importlib
import json
import sys
from enum import StrEnum
from pathlib import Path
from types import ModuleType

import numpy as np
import rich
import typer
from dotenv import find_dotenv, load_dotenv
from typing_extensions import Annotated

from crowdfuse._constants import (
    DEFAULT_MIN_COLABELS,
    DEFAULT_OUTPUT_PATH,
    DEFAULT_SPAMMER_THRESHOLD,
)
from crowdfuse.calc.ccem import (
    TrainConfig,
    anchor_diagnostic,
    predict_batch,
    train_ccem,
    train_em_e2e,
)
from crowdfuse.calc.ds_em import EMConfig, EMInit, EMVariant
from crowdfuse.calc.fusion import FusionConfig, FusionMethod, fuse
from crowdfuse.calc.seqhmm import concat_sequences
from crowdfuse.cli.bench import load_bench_config, load_datasets, run_bench
from crowdfuse.cli.utils import (
    EXIT_INPUT,
    Stopwatch,
    build_report,
    display_bench_table,
    display_metrics_table,
    handle_errors,
    label_metrics,
    load_ds_params,
    setup_logging,
)
from crowdfuse.evalkit import confusion_error, exponent_study, plot_exponent_fit
from crowdfuse.ingest.config import GENERATORS, load_gen_spec
from crowdfuse.ingest.csvio import (
    read_annotations,
    read_features,
    read_truth,
    write_annotations,
    write_features,
    write_json,
    write_labels,
)
from crowdfuse.simgen import (
    E2EGenSpec,
    GroupGenSpec,
    HMMGenSpec,
    gen_ds,
    gen_e2e,
    gen_grouped,
    gen_hmm,
)

load_dotenv(find_dotenv(usecwd=True))

app = typer.Typer(
    name="crowdfuse",
    help="Crowdsourced label integration and noisy-label learning",
    no_args_is_help=True,
)

OutDir = Annotated[
    Path,
    typer.Option("--out", "-o", envvar="CROWDFUSE_OUTPUT_DIR", help="Output directory"),
]


class TrainMode(StrEnum):
    CCEM = "ccem"
    EM = "em"


@app.callback()
def configure(
    log_level: Annotated[
        str,
        typer.Option(
            "--log-level",
            envvar="CROWDFUSE_LOG_LEVEL",
            help="DEBUG, INFO, WARNING or ERROR",
        ),
    ] = "WARNING",
):
    """Fuse crowd labels, train on noisy labels and benchmark estimators."""
    setup_logging(log_level)


# ============================================================================
# Data
# ============================================================================


@app.command()
@handle_errors
def simulate(
    config: Annotated[
        Path, typer.Option("--config", "-c", help="Generator config file")
    ],
    out: OutDir = DEFAULT_OUTPUT_PATH,
):
    """
    Generate a synthetic dataset from a config file.

    Writes annotations.csv, truth.csv and params.json (plus features.csv for
    the e2e generator) into the output directory.
    """
    with Stopwatch() as watch:
        spec = load_gen_spec(config)
        kind = {cls: name for name, cls in GENERATORS.items()}[type(spec)]
        match spec:
            case HMMGenSpec():
                sim = gen_hmm(spec)
                a, _ = concat_sequences(sim.sequences)
                num_seqs = len(sim.sequences)
                sequence_of_item = np.repeat(np.arange(num_seqs), spec.num_items)
                write_annotations(out / "annotations.csv", a, sequence_of_item)
                write_labels(out / "truth.csv", np.concatenate(sim.paths))
                params = sim.params
            case GroupGenSpec():
                sim = gen_grouped(spec)
                a = sim.annotations
                write_annotations(out / "annotations.csv", a)
                write_labels(out / "truth.csv", sim.truth)
                params = sim.model
            case E2EGenSpec():
                sim = gen_e2e(spec)
                a = sim.annotations
                write_annotations(out / "annotations.csv", a)
                write_labels(out / "truth.csv", sim.truth)
                write_features(out / "features.csv", sim.features)
                params = sim.params
            case _:
                sim = gen_ds(spec)
                a = sim.annotations
                write_annotations(out / "annotations.csv", a)
                write_labels(out / "truth.csv", sim.truth)
                params = sim.params
        params_path = write_json(out / "params.json", params)

    metrics = {
        "num_items": a.num_items,
        "num_annotators": a.num_annotators,
        "num_classes": a.num_classes,
        "num_records": a.num_records,
    }
    config_echo = {"generator": kind, **spec.model_dump(mode="json")}
    write_json(
        out / "simulate.json",
        build_report("simulate", config_echo, metrics, params_path, watch.ms),
    )
    rich.print(f"[green]Simulated[/green] {a.num_records} labels ({kind}) into {out}")


# ============================================================================
# Fusion
# ============================================================================


@app.command("fuse")
@handle_errors
def fuse_command(
    annotations: Annotated[
        Path, typer.Option("--annotations", "-a", help="Annotation CSV")
    ],
    method: Annotated[
        FusionMethod, typer.Option("--method", "-m")
    ] = FusionMethod.DS_EM,
    out: OutDir = DEFAULT_OUTPUT_PATH,
    truth: Annotated[
        Path | None, typer.Option("--truth", "-t", help="Ground-truth CSV")
    ] = None,
    num_classes: Annotated[int | None, typer.Option("--num-classes", "-k")] = None,
    num_annotators: Annotated[int | None, typer.Option("--num-annotators")] = None,
    variant: Annotated[EMVariant, typer.Option("--variant")] = EMVariant.GENERAL,
    init: Annotated[EMInit, typer.Option("--init")] = EMInit.MV,
    max_iters: Annotated[int, typer.Option("--max-iters")] = 500,
    rel_tol: Annotated[float, typer.Option("--tol")] = 1e-8,
    min_colabels: Annotated[
        int, typer.Option("--min-colabels")
    ] = DEFAULT_MIN_COLABELS,
    num_groups: Annotated[int, typer.Option("--num-groups")] = 2,
    moment_iters: Annotated[int, typer.Option("--moment-iters")] = 500,
    refine_em: Annotated[bool, typer.Option("--refine-em/--no-refine-em")] = False,
    spammer_threshold: Annotated[
        float, typer.Option("--spammer-threshold")
    ] = DEFAULT_SPAMMER_THRESHOLD,
    seed: Annotated[int, typer.Option("--seed")] = 0,
):
    """
    Integrate crowd labels with one method.

    Writes labels.csv, params.json (for model-based methods) and fuse.json.
    """
    with Stopwatch() as watch:
        a, sequences = read_annotations(
            annotations, num_annotators=num_annotators, num_classes=num_classes
        )
        cfg = FusionConfig(
            method=method,
            em=EMConfig(
                max_iters=max_iters,
                rel_tol=rel_tol,
                variant=variant,
                init=init,
                min_colabels=min_colabels,
            ),
            num_groups=num_groups,
            moment_iters=moment_iters,
            refine_em=refine_em,
            spammer_threshold=spammer_threshold,
            seed=seed,
        )
        result = fuse(a, cfg, sequences)
        truth_labels = read_truth(truth, num_items=a.num_items) if truth else None

    write_labels(out / "labels.csv", result.labels)
    params = next(
        (p for p in (result.groups, result.hmm, result.params) if p is not None), None
    )
    params_path = None
    if params is not None:
        params_path = write_json(out / "params.json", params)

    metrics = label_metrics(result.labels, truth_labels, a.num_classes)
    metrics.update(
        num_items=a.num_items,
        num_records=a.num_records,
        iterations=len(result.trace),
        flagged_spammers=result.flagged_spammers,
    )
    if result.trace:
        metrics["final_objective"] = result.trace[-1]
    config_echo = {
        "annotations": str(annotations),
        "truth": str(truth) if truth else None,
        **cfg.model_dump(mode="json"),
    }
    report = build_report(str(method), config_echo, metrics, params_path, watch.ms)
    write_json(out / "fuse.json", report)
    display_metrics_table(f"fuse: {method}", metrics)


# ============================================================================
# Learning from features
# ============================================================================


@app.command()
@handle_errors
def train(
    features: Annotated[Path, typer.Option("--features", "-x", help="Feature CSV")],
    annotations: Annotated[
        Path, typer.Option("--annotations", "-a", help="Annotation CSV")
    ],
    out: OutDir = DEFAULT_OUTPUT_PATH,
    truth: Annotated[Path | None, typer.Option("--truth", "-t")] = None,
    mode: Annotated[TrainMode, typer.Option("--mode")] = TrainMode.CCEM,
    num_classes: Annotated[int | None, typer.Option("--num-classes", "-k")] = None,
    lr: Annotated[float, typer.Option("--lr")] = 0.5,
    iters: Annotated[int, typer.Option("--iters")] = 500,
    beta: Annotated[
        float, typer.Option("--beta", help="Volume regularization weight")
    ] = 0.0,
    batch_size: Annotated[int | None, typer.Option("--batch-size")] = None,
    em_iters: Annotated[int, typer.Option("--em-iters")] = 50,
    seed: Annotated[int, typer.Option("--seed")] = 0,
):
    """
    Train a softmax classifier jointly with annotator confusions.

    Writes model.json, train.json and labels.csv with the classifier's
    predictions.
    """
    with Stopwatch() as watch:
        x = read_features(features)
        a, _ = read_annotations(
            annotations, num_items=x.num_items, num_classes=num_classes
        )
        cfg = TrainConfig(
            lr=lr, iters=iters, beta=beta, batch_size=batch_size, seed=seed
        )
        if mode == TrainMode.EM:
            fit = train_em_e2e(x, a, cfg, em_iters=em_iters)
            model, trace = fit.model, fit.loglik_trace
        else:
            fit = train_ccem(x, a, cfg)
            model, trace = fit.model, fit.loss_trace
        pred = np.argmax(predict_batch(model, x.x), axis=1)
        truth_labels = read_truth(truth, num_items=a.num_items) if truth else None

    params_path = write_json(out / "model.json", model)
    write_labels(out / "labels.csv", pred)

    anchors = anchor_diagnostic(model, x)
    metrics = label_metrics(pred, truth_labels, a.num_classes)
    metrics.update(
        iterations=len(trace),
        final_objective=trace[-1] if trace else None,
        anchor_purity=anchors.anchor_purity.tolist(),
        expert_margins=anchors.expert_margins.tolist(),
    )
    config_echo = {
        "features": str(features),
        "annotations": str(annotations),
        "mode": str(mode),
        "em_iters": em_iters,
        **cfg.model_dump(mode="json"),
    }
    report = build_report(f"train:{mode}", config_echo, metrics, params_path, watch.ms)
    write_json(out / "train.json", report)
    display_metrics_table(f"train: {mode}", metrics)


# ============================================================================
# Evaluation
# ============================================================================


@app.command("eval")
@handle_errors
def eval_command(
    pred: Annotated[
        Path, typer.Option("--pred", "-p", help="Predicted labels CSV")
    ],
    truth: Annotated[
        Path, typer.Option("--truth", "-t", help="Ground-truth CSV")
    ],
    out: OutDir = DEFAULT_OUTPUT_PATH,
    num_classes: Annotated[int | None, typer.Option("--num-classes", "-k")] = None,
    params: Annotated[
        Path | None, typer.Option("--params", help="Estimated params JSON")
    ] = None,
    true_params: Annotated[Path | None, typer.Option("--true-params")] = None,
):
    """Score predicted labels and, given both params files, recovered confusions."""
    with Stopwatch() as watch:
        truth_labels = read_truth(truth)
        pred_labels = read_truth(pred, num_items=truth_labels.size)
        if num_classes is None:
            largest = max(pred_labels.max(initial=0), truth_labels.max(initial=0))
            num_classes = int(largest) + 1
        metrics = label_metrics(pred_labels, truth_labels, num_classes)
        if params is not None and true_params is not None:
            metrics["confusion_error"] = confusion_error(
                load_ds_params(params), load_ds_params(true_params)
            )

    config_echo = {
        "pred": str(pred),
        "truth": str(truth),
        "num_classes": num_classes,
        "params": str(params) if params else None,
        "true_params": str(true_params) if true_params else None,
    }
    report = build_report("eval", config_echo, metrics, params, watch.ms)
    write_json(out / "eval.json", report)
    display_metrics_table("eval", metrics)
    typer.echo(json.dumps(metrics, sort_keys=True))


# ============================================================================
# Studies
# ============================================================================


@app.command()
@handle_errors
def bench(
    config: Annotated[
        Path, typer.Option("--config", "-c", help="Bench config file")
    ],
    out: OutDir = DEFAULT_OUTPUT_PATH,
):
    """Compare methods across datasets and rank them by mean error."""
    with Stopwatch() as watch:
        bench_cfg, gen = load_bench_config(config)
        datasets = load_datasets(bench_cfg, gen, Path(config).parent)
        metrics = run_bench(bench_cfg, datasets)

    config_echo = {
        **bench_cfg.model_dump(mode="json"),
        "generator": gen.model_dump(mode="json") if gen is not None else None,
    }
    report = build_report("bench", config_echo, metrics, None, watch.ms)
    write_json(out / "bench.json", report)
    display_bench_table(metrics["rows"])
    rich.print(f"Ranking: [bold]{' < '.join(metrics['ranking'])}[/bold]")


@app.command()
@handle_errors
def exponent(
    out: OutDir = DEFAULT_OUTPUT_PATH,
    accuracy: Annotated[float, typer.Option("--accuracy")] = 0.7,
    num_classes: Annotated[int, typer.Option("--num-classes", "-k")] = 2,
    min_annotators: Annotated[int, typer.Option("--min-annotators")] = 3,
    max_annotators: Annotated[int, typer.Option("--max-annotators")] = 31,
    step: Annotated[int, typer.Option("--step")] = 2,
    num_items: Annotated[int, typer.Option("--num-items")] = 10_000,
    seed: Annotated[int, typer.Option("--seed")] = 0,
    plot: Annotated[bool, typer.Option("--plot/--no-plot")] = False,
):
    """Measure how the MAP error decays as annotators are added."""
    with Stopwatch() as watch:
        study = exponent_study(
            accuracy=accuracy,
            num_classes=num_classes,
            annotator_counts=range(min_annotators, max_annotators + 1, step),
            num_items=num_items,
            seed=seed,
        )
    plot_path = plot_exponent_fit(study, out / "exponent.png") if plot else None

    config_echo = {
        "accuracy": accuracy,
        "num_classes": num_classes,
        "annotator_counts": study.annotator_counts,
        "num_items": num_items,
        "seed": seed,
        "plot": str(plot_path) if plot_path else None,
    }
    metrics = study.model_dump(mode="json")
    report = build_report("exponent", config_echo, metrics, None, watch.ms)
    write_json(out / "exponent.json", report)
    fit = study.fit
    rich.print(
        f"P_e ~ {fit.alpha:.4f} * exp(-{fit.beta:.4f} M)  (R^2 = {fit.r_squared:.4f})"
    )


def _click_exceptions(command) -> ModuleType:
    """The exceptions module of whichever click build typer runs on."""
    base = next(c for c in type(command).__mro__ if c.__name__ == "Command")
    package = base.__module__.rsplit(".", 1)[0]
    return importlib.import_module(f"{package}.exceptions")


def run(argv: list[str] | None = None) -> int:
    """Run the CLI on `argv` and return the exit code instead of exiting."""
    if argv is None:
        argv = sys.argv[1:]
    if not argv:
        argv = ["--help"]
    command = typer.main.get_command(app)
    errors = _click_exceptions(command)
    try:
        rv = command.main(args=argv, prog_name="crowdfuse", standalone_mode=False)
    except errors.ClickException as err:
        payload = {"error": "MalformedInputError", "message": err.format_message()}
        typer.echo(json.dumps(payload))
        return EXIT_INPUT
    except errors.Abort:
        return 1
    return rv if isinstance(rv, int) else 0


def main():
    sys.exit(run())
