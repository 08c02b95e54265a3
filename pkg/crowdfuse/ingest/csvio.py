"""
CSV and JSON files exchanged by the command line.

annotations   item,annotator,label        (optional leading `sequence` column)
truth         item,label
features      item,f0,...,f{D-1}
"""

import json
import os
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel

from crowdfuse.core.annotations import AnnotationSet, FeatureSet
from crowdfuse.exceptions import MalformedInputError

ANNOTATION_COLUMNS = ("item", "annotator", "label")
TRUTH_COLUMNS = ("item", "label")


def atomic_write_text(path: Path, text: str) -> Path:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def write_frame(path: Path, frame: pd.DataFrame) -> Path:
    return atomic_write_text(path, frame.to_csv(index=False, lineterminator="\n"))


def write_json(path: Path, payload: dict | BaseModel) -> Path:
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    else:
        text = json.dumps(payload, indent=2, sort_keys=True)
    return atomic_write_text(path, text + "\n")


def _read_csv(path: Path, required: tuple[str, ...]) -> pd.DataFrame:
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise MalformedInputError(f"file not found: {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as err:
        raise MalformedInputError(f"cannot parse {path}: {err}") from None

    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise MalformedInputError(f"{path.name} lacks columns {missing}")
    if frame.empty:
        frame = frame.astype({c: "int64" for c in required})
    for col in required:
        values = frame[col]
        if not pd.api.types.is_integer_dtype(values):
            raise MalformedInputError(
                f"column '{col}' of {path.name} must hold integers"
            )
        if (values < 0).any():
            raise MalformedInputError(f"column '{col}' of {path.name} has negative ids")
    return frame


def read_annotations(
    path: Path,
    num_items: int | None = None,
    num_annotators: int | None = None,
    num_classes: int | None = None,
) -> tuple[AnnotationSet, list[np.ndarray] | None]:
    """
    Load an annotation CSV.

    Returns the annotation set and, when a `sequence` column is present, the
    item ids of every sequence in ascending order.
    """
    frame = _read_csv(path, ANNOTATION_COLUMNS)
    try:
        a = AnnotationSet.from_frame(frame, num_items, num_annotators, num_classes)
    except ValueError as err:
        raise MalformedInputError(
            f"invalid annotations in {Path(path).name}: {err}"
        ) from None

    sequences = None
    if "sequence" in frame.columns:
        grouped = frame.groupby("sequence", sort=True)["item"]
        sequences = [np.unique(items.to_numpy(dtype=np.int64)) for _, items in grouped]
        if frame.groupby("item")["sequence"].nunique().gt(1).any():
            raise MalformedInputError("an item belongs to more than one sequence")
    return a, sequences


def write_annotations(
    path: Path, a: AnnotationSet, sequence_of_item: np.ndarray | None = None
) -> Path:
    frame = a.to_frame()
    if sequence_of_item is not None:
        frame.insert(0, "sequence", np.asarray(sequence_of_item)[a.items])
    return write_frame(path, frame)


def read_truth(path: Path, num_items: int | None = None) -> np.ndarray:
    """Dense label vector indexed by item; every item 0..N-1 must appear once."""
    frame = _read_csv(path, TRUTH_COLUMNS).sort_values("item")
    n = num_items if num_items is not None else len(frame)
    if not np.array_equal(frame["item"].to_numpy(), np.arange(n)):
        raise MalformedInputError(
            f"{Path(path).name} must list items 0..{n - 1} once each"
        )
    return frame["label"].to_numpy(dtype=np.int64)


def write_labels(path: Path, labels: np.ndarray) -> Path:
    labels = np.asarray(labels, dtype=np.int64)
    frame = pd.DataFrame({"item": np.arange(labels.size), "label": labels})
    return write_frame(path, frame)


def read_features(path: Path) -> FeatureSet:
    frame = _read_csv(path, ("item",)).sort_values("item")
    if not np.array_equal(frame["item"].to_numpy(), np.arange(len(frame))):
        raise MalformedInputError(f"{Path(path).name} must list items 0..N-1 once each")
    cols = [c for c in frame.columns if c != "item"]
    if not cols:
        raise MalformedInputError(f"{Path(path).name} has no feature columns")
    try:
        return FeatureSet(x=frame[cols].to_numpy(dtype=float))
    except ValueError as err:
        raise MalformedInputError(f"invalid features: {err}") from None


def write_features(path: Path, features: FeatureSet) -> Path:
    frame = pd.DataFrame(features.x, columns=[f"f{j}" for j in range(features.dim)])
    frame.insert(0, "item", np.arange(features.num_items))
    return write_frame(path, frame)
