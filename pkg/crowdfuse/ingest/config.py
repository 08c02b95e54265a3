"""
Key-value configuration files.

One `key = value` entry per line, read with python-dotenv. Lists are comma
separated, matrix rows are separated by `;` and stacked matrices by `|`:

    num_classes = 2
    prior = 0.3,0.7
    confusions = 0.9,0.2;0.1,0.8 | 0.7,0.3;0.3,0.7
"""

from pathlib import Path
from typing import TypeVar

from dotenv import dotenv_values
from pydantic import BaseModel

from crowdfuse.exceptions import MalformedInputError
from crowdfuse.simgen import E2EGenSpec, GenSpec, GroupGenSpec, HMMGenSpec

ModelT = TypeVar("ModelT", bound=BaseModel)

GENERATORS: dict[str, type[GenSpec]] = {
    "ds": GenSpec,
    "hmm": HMMGenSpec,
    "grouped": GroupGenSpec,
    "e2e": E2EGenSpec,
}


def read_config(path: Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise MalformedInputError(f"config file not found: {path}")
    values = dotenv_values(path)
    empty = [key for key, value in values.items() if value is None or value == ""]
    if empty:
        raise MalformedInputError(f"config keys without a value: {empty}")
    return {key.strip().lower(): value.strip() for key, value in values.items()}


def parse_value(raw: str):
    """Split a raw string into a scalar, a list, a matrix or a stack of matrices."""
    if "|" in raw:
        return [parse_value(block.strip()) for block in raw.split("|")]
    if ";" in raw:
        return [[v.strip() for v in row.split(",")] for row in raw.split(";")]
    if "," in raw:
        return [v.strip() for v in raw.split(",")]
    return raw


def build_model(model_cls: type[ModelT], values: dict[str, str]) -> ModelT:
    """Validate parsed values into `model_cls`, rejecting unknown keys."""
    unknown = sorted(set(values) - set(model_cls.model_fields))
    if unknown:
        raise MalformedInputError(
            f"unknown config keys for {model_cls.__name__}: {unknown}"
        )
    return model_cls.model_validate({k: parse_value(v) for k, v in values.items()})


def load_gen_spec(path: Path) -> GenSpec:
    """
    Generator spec from a config file; the optional `generator` key picks
    ds (default), hmm, grouped or e2e.
    """
    values = read_config(path)
    kind = values.pop("generator", "ds")
    if kind not in GENERATORS:
        raise MalformedInputError(
            f"unknown generator '{kind}', expected one of {sorted(GENERATORS)}"
        )
    return build_model(GENERATORS[kind], values)
