from typing import Self

import numpy as np
from pydantic import model_validator

from crowdfuse._types import FloatArray, FrozenModel, IntArray
from crowdfuse.core.simplex import check_column_stochastic, check_simplex


def uniform_confusion(num_classes: int) -> np.ndarray:
    return np.full((num_classes, num_classes), 1.0 / num_classes)


def one_coin_confusion(p: float, num_classes: int) -> np.ndarray:
    """Correct with probability p, otherwise uniformly wrong."""
    off = (1.0 - p) / (num_classes - 1)
    a = np.full((num_classes, num_classes), off)
    np.fill_diagonal(a, p)
    return a


def confusion_vector_confusion(diag: np.ndarray) -> np.ndarray:
    """Per-class accuracy diag[k] with the error mass spread uniformly."""
    diag = np.asarray(diag, dtype=float)
    k = diag.shape[0]
    a = np.tile((1.0 - diag) / (k - 1), (k, 1))
    np.fill_diagonal(a, diag)
    return a


class DSParams(FrozenModel):
    """
    Dawid-Skene parameters: M column-stochastic confusions and a class prior.

    confusions[m][k', k] is the probability annotator m reports k' when the
    true class is k.
    """

    confusions: FloatArray
    prior: FloatArray

    @model_validator(mode="after")
    def _check_params(self) -> Self:
        if self.confusions.ndim != 3:
            raise ValueError("confusions must have shape (M, K, K)")
        if self.prior.shape != (self.confusions.shape[1],):
            raise ValueError("prior length must match the number of classes")
        check_column_stochastic(self.confusions, "confusion matrix")
        check_simplex(self.prior, "prior")
        return self

    @property
    def num_annotators(self) -> int:
        return int(self.confusions.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.prior.shape[0])

    @classmethod
    def one_coin(cls, p, prior=None) -> Self:
        p = np.asarray(p, dtype=float)
        k = 2 if prior is None else len(prior)
        prior = np.full(k, 1.0 / k) if prior is None else prior
        return cls(
            confusions=np.stack([one_coin_confusion(pm, k) for pm in p]),
            prior=prior,
        )

    def permute_classes(self, perm) -> Self:
        """
        Relabel latent classes: new column j is old column perm[j].

        Only the latent (column) index moves; reported labels keep their meaning.
        """
        perm = np.asarray(perm, dtype=np.int64)
        return type(self)(
            confusions=self.confusions[:, :, perm], prior=self.prior[perm]
        )

    def relabel(self, perm) -> Self:
        """Rename class k as perm[k] everywhere, in both rows and columns."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.argsort(perm)
        return type(self)(
            confusions=self.confusions[:, inv][:, :, inv], prior=self.prior[inv]
        )

    def subset_annotators(self, annotators) -> Self:
        return type(self)(
            confusions=self.confusions[np.asarray(annotators, dtype=np.int64)],
            prior=self.prior,
        )


class HMMParams(FrozenModel):
    """
    DS-HMM parameters.

    transition[k, k'] = Pr(y_n = k | y_{n-1} = k'), so columns sum to one.
    """

    initial: FloatArray
    transition: FloatArray
    confusions: FloatArray

    @model_validator(mode="after")
    def _check_params(self) -> Self:
        k = self.initial.shape[0]
        if self.transition.shape != (k, k):
            raise ValueError("transition must be K x K")
        if self.confusions.ndim != 3 or self.confusions.shape[1:] != (k, k):
            raise ValueError("confusions must have shape (M, K, K)")
        check_simplex(self.initial, "initial distribution")
        check_column_stochastic(self.transition, "transition matrix")
        check_column_stochastic(self.confusions, "confusion matrix")
        return self

    @property
    def num_classes(self) -> int:
        return int(self.initial.shape[0])

    @property
    def num_annotators(self) -> int:
        return int(self.confusions.shape[0])

    @property
    def ds_params(self) -> DSParams:
        return DSParams(confusions=self.confusions, prior=self.initial)


class GroupModel(FrozenModel):
    """
    Two-level model for dependent annotators.

    Annotators in group l share a latent label z_l drawn from
    group_confusions[l][:, y]; annotator m then reports from
    annotator_confusions[m][:, z_{group(m)}].
    """

    assignment: IntArray
    group_confusions: FloatArray
    annotator_confusions: FloatArray
    prior: FloatArray

    @model_validator(mode="after")
    def _check_model(self) -> Self:
        num_groups = self.group_confusions.shape[0]
        if self.assignment.shape != (self.annotator_confusions.shape[0],):
            raise ValueError("one group id per annotator is required")
        if self.assignment.min() < 0 or self.assignment.max() >= num_groups:
            raise ValueError("group id out of range")
        if np.unique(self.assignment).shape[0] != num_groups:
            raise ValueError("every group must be nonempty")
        check_column_stochastic(self.group_confusions, "group confusion")
        check_column_stochastic(self.annotator_confusions, "annotator confusion")
        check_simplex(self.prior, "prior")
        return self

    @property
    def num_groups(self) -> int:
        return int(self.group_confusions.shape[0])

    def effective_params(self) -> DSParams:
        """Marginal per-annotator confusions A_m = Ã_m Ξ_{group(m)}."""
        eff = np.einsum(
            "mij,mjk->mik",
            self.annotator_confusions,
            self.group_confusions[self.assignment],
        )
        return DSParams(confusions=eff, prior=self.prior)
