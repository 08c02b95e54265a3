from typing import Annotated

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, PlainSerializer


def _frozen_array(dtype):
    def convert(value) -> np.ndarray:
        # Always copy so the caller's buffer never becomes read-only.
        arr = np.array(value, dtype=dtype)
        arr.flags.writeable = False
        return arr

    return convert


def _to_list(arr: np.ndarray) -> list:
    return arr.tolist()


FloatArray = Annotated[
    np.ndarray,
    BeforeValidator(_frozen_array(np.float64)),
    PlainSerializer(_to_list, return_type=list),
]
IntArray = Annotated[
    np.ndarray,
    BeforeValidator(_frozen_array(np.int64)),
    PlainSerializer(_to_list, return_type=list),
]
BoolArray = Annotated[
    np.ndarray,
    BeforeValidator(_frozen_array(np.bool_)),
    PlainSerializer(_to_list, return_type=list),
]


class FrozenModel(BaseModel):
    """Immutable pydantic model that may hold numpy arrays."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)
