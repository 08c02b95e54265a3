from typing import Self

import numpy as np
import pandas as pd
import scipy.sparse as sp
from pydantic import Field, model_validator

from crowdfuse._types import FloatArray, FrozenModel, IntArray
from crowdfuse.exceptions import DimensionMismatchError


class AnnotationSet(FrozenModel):
    """
    Sparse (item, annotator, label) observations of an N x M crowd over K classes.

    Records are stored column-wise in three aligned integer arrays. At most one
    record per (item, annotator) pair is allowed; items without any record
    are permitted.
    """

    num_items: int = Field(ge=0)
    num_annotators: int = Field(ge=1)
    num_classes: int = Field(ge=2)
    items: IntArray = Field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    annotators: IntArray = Field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    labels: IntArray = Field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @model_validator(mode="after")
    def _check_records(self) -> Self:
        n_rec = self.items.shape[0]
        if self.annotators.shape != (n_rec,) or self.labels.shape != (n_rec,):
            raise ValueError("items, annotators and labels must align")
        for name, arr, bound in (
            ("item", self.items, self.num_items),
            ("annotator", self.annotators, self.num_annotators),
            ("label", self.labels, self.num_classes),
        ):
            if n_rec and (arr.min() < 0 or arr.max() >= bound):
                raise ValueError(f"{name} index out of range [0, {bound})")
        if n_rec:
            keys = self.items * self.num_annotators + self.annotators
            if np.unique(keys).shape[0] != n_rec:
                raise ValueError("duplicate record for an (item, annotator) pair")
        return self

    # ------------------------------------------------------------------
    # Construction
    # ------------------------------------------------------------------
    @classmethod
    def from_records(
        cls,
        records: list[tuple[int, int, int]],
        num_items: int,
        num_annotators: int,
        num_classes: int,
    ) -> Self:
        arr = np.asarray(records, dtype=np.int64).reshape(-1, 3)
        return cls(
            num_items=num_items,
            num_annotators=num_annotators,
            num_classes=num_classes,
            items=arr[:, 0],
            annotators=arr[:, 1],
            labels=arr[:, 2],
        )

    @classmethod
    def from_label_matrix(cls, matrix: np.ndarray, num_classes: int) -> Self:
        """Build from a dense N x M matrix where -1 marks a missing label."""
        matrix = np.asarray(matrix, dtype=np.int64)
        items, annotators = np.nonzero(matrix >= 0)
        return cls(
            num_items=matrix.shape[0],
            num_annotators=matrix.shape[1],
            num_classes=num_classes,
            items=items,
            annotators=annotators,
            labels=matrix[items, annotators],
        )

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        num_items: int | None = None,
        num_annotators: int | None = None,
        num_classes: int | None = None,
    ) -> Self:
        items = frame["item"].to_numpy(dtype=np.int64)
        annotators = frame["annotator"].to_numpy(dtype=np.int64)
        labels = frame["label"].to_numpy(dtype=np.int64)

        def infer(arr: np.ndarray, given: int | None, floor: int) -> int:
            if given is not None:
                return given
            return max(int(arr.max()) + 1 if arr.size else 0, floor)

        return cls(
            num_items=infer(items, num_items, 0),
            num_annotators=infer(annotators, num_annotators, 1),
            num_classes=infer(labels, num_classes, 2),
            items=items,
            annotators=annotators,
            labels=labels,
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"item": self.items, "annotator": self.annotators, "label": self.labels}
        )

    # ------------------------------------------------------------------
    # Views
    # ------------------------------------------------------------------
    @property
    def num_records(self) -> int:
        return int(self.items.shape[0])

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.num_items, self.num_annotators, self.num_classes

    @property
    def records(self) -> list[tuple[int, int, int]]:
        return list(
            zip(self.items.tolist(), self.annotators.tolist(), self.labels.tolist())
        )

    def vote_counts(self) -> np.ndarray:
        """N x K matrix of how many annotators gave each label to each item."""
        counts = np.zeros((self.num_items, self.num_classes), dtype=np.int64)
        np.add.at(counts, (self.items, self.labels), 1)
        return counts

    def records_per_item(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.num_items)

    def records_per_annotator(self) -> np.ndarray:
        return np.bincount(self.annotators, minlength=self.num_annotators)

    def label_matrix(self) -> np.ndarray:
        """Dense N x M label matrix with -1 where no label was given."""
        matrix = np.full((self.num_items, self.num_annotators), -1, dtype=np.int64)
        matrix[self.items, self.annotators] = self.labels
        return matrix

    def indicator_matrix(self) -> sp.csr_matrix:
        """Sparse N x (M*K) one-hot responses; column m*K + k is "m said k"."""
        cols = self.annotators * self.num_classes + self.labels
        data = np.ones(self.num_records)
        return sp.csr_matrix(
            (data, (self.items, cols)),
            shape=(self.num_items, self.num_annotators * self.num_classes),
        )

    def observed_matrix(self) -> sp.csr_matrix:
        """Sparse N x M mask of which annotator labeled which item."""
        data = np.ones(self.num_records)
        return sp.csr_matrix(
            (data, (self.items, self.annotators)),
            shape=(self.num_items, self.num_annotators),
        )

    # ------------------------------------------------------------------
    # Derived sets
    # ------------------------------------------------------------------
    def _replace(self, **changes) -> Self:
        # Rebuild through the constructor so validators run on the new arrays.
        return type(self)(**(dict(self) | changes))

    def subset_annotators(self, annotators: np.ndarray | list[int]) -> Self:
        """Keep only the given annotators, reindexed 0..len-1 in the given order."""
        annotators = np.asarray(annotators, dtype=np.int64)
        remap = np.full(self.num_annotators, -1, dtype=np.int64)
        remap[annotators] = np.arange(annotators.shape[0])
        keep = remap[self.annotators] >= 0
        return self._replace(
            num_annotators=max(int(annotators.shape[0]), 1),
            items=self.items[keep],
            annotators=remap[self.annotators[keep]],
            labels=self.labels[keep],
        )

    def subset_items(self, items: np.ndarray | list[int]) -> "AnnotationSet":
        """Keep only the given items, reindexed 0..len-1 in the given order."""
        items = np.asarray(items, dtype=np.int64)
        remap = np.full(self.num_items, -1, dtype=np.int64)
        remap[items] = np.arange(items.shape[0])
        keep = remap[self.items] >= 0
        return AnnotationSet(
            num_items=int(items.shape[0]),
            num_annotators=self.num_annotators,
            num_classes=self.num_classes,
            items=remap[self.items[keep]],
            annotators=self.annotators[keep],
            labels=self.labels[keep],
        )

    def permute_annotators(self, perm: np.ndarray | list[int]) -> Self:
        """Relabel annotator m as perm[m]."""
        perm = np.asarray(perm, dtype=np.int64)
        return self._replace(annotators=perm[self.annotators])

    def permute_classes(self, perm: np.ndarray | list[int]) -> Self:
        """Relabel class k as perm[k] in every record."""
        perm = np.asarray(perm, dtype=np.int64)
        return self._replace(labels=perm[self.labels])


class LabeledSequence(AnnotationSet):
    """
    Annotations over positions 0..N-1 of one sequence.

    Positions play the role of items; consecutive positions are assumed
    to be dependent through a Markov chain on the true labels.
    """

    sequence_id: int = 0

    @property
    def length(self) -> int:
        return self.num_items

    def as_annotations(self) -> AnnotationSet:
        return AnnotationSet(
            num_items=self.num_items,
            num_annotators=self.num_annotators,
            num_classes=self.num_classes,
            items=self.items,
            annotators=self.annotators,
            labels=self.labels,
        )


class FeatureSet(FrozenModel):
    """N x D feature matrix aligned with the item indices of an AnnotationSet."""

    x: FloatArray

    @model_validator(mode="after")
    def _check_features(self) -> Self:
        if self.x.ndim != 2:
            raise ValueError("features must be an N x D matrix")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("features must be finite")
        return self

    @property
    def num_items(self) -> int:
        return int(self.x.shape[0])

    @property
    def dim(self) -> int:
        return int(self.x.shape[1])

    def check_aligned(self, annotations: AnnotationSet) -> None:
        if self.num_items != annotations.num_items:
            raise DimensionMismatchError(
                f"{self.num_items} feature rows for {annotations.num_items} items"
            )

    def subset(self, items: np.ndarray) -> "FeatureSet":
        return FeatureSet(x=self.x[np.asarray(items, dtype=np.int64)])
