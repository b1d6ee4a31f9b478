"""Pseudo-label mining from a reference-to-unlabeled distance matrix."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from pls_reid.errors import DimensionMismatchError, InvalidParameterError
from pls_reid.model import EVAL, embed


@dataclass(frozen=True)
class DistanceMatrix:
    """``values[i, j]`` is the L2 distance from reference ``i`` to unlabeled column ``j``.

    ``row_refs`` names each reference (an identity) and ``col_refs`` holds the
    dataset index of each column.
    """

    values: np.ndarray
    row_refs: np.ndarray
    col_refs: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class Assignment:
    identity: int
    iteration: int
    distance: float


@dataclass
class PseudoLabelSet:
    assignments: dict[int, Assignment] = field(default_factory=dict)
    rejected: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.assignments)

    def indices(self) -> np.ndarray:
        return np.array(sorted(self.assignments), dtype=np.int64)

    def labels_for(self, indices) -> np.ndarray:
        return np.array([self.assignments[int(i)].identity for i in indices], dtype=np.int64)

    def by_identity(self, C: int) -> list[np.ndarray]:
        groups = [[] for _ in range(C)]
        for idx in sorted(self.assignments):
            groups[self.assignments[idx].identity].append(idx)
        return [np.array(g, dtype=np.int64) for g in groups]

    def to_json(self) -> dict:
        return {
            "assignments": [
                [idx, a.identity, a.iteration, a.distance] for idx, a in sorted(self.assignments.items())
            ],
            "rejected": list(self.rejected),
        }

    @classmethod
    def from_json(cls, obj) -> PseudoLabelSet:
        return cls(
            {int(i): Assignment(int(ident), int(it), float(d)) for i, ident, it, d in obj["assignments"]},
            [int(r) for r in obj["rejected"]],
        )


@dataclass(frozen=True)
class CameraCenters:
    centers: np.ndarray


def distance_matrix(ref_features, unlabeled_features, row_refs=None, col_refs=None) -> DistanceMatrix:
    ref = np.asarray(ref_features, dtype=np.float64)
    un = np.asarray(unlabeled_features, dtype=np.float64)
    if ref.ndim != 2 or un.ndim != 2 or ref.shape[0] == 0 or un.shape[0] == 0:
        raise InvalidParameterError("need at least one reference and one unlabeled feature")
    if ref.shape[1] != un.shape[1]:
        raise DimensionMismatchError(f"feature dims differ: {ref.shape[1]} vs {un.shape[1]}")
    rows = np.arange(ref.shape[0]) if row_refs is None else np.asarray(row_refs, dtype=np.int64)
    cols = np.arange(un.shape[0]) if col_refs is None else np.asarray(col_refs, dtype=np.int64)
    return DistanceMatrix(cdist(ref, un, metric="euclidean"), rows, cols)


def select_preliminary(M, T: int) -> np.ndarray:
    """Column positions of the ``min(T, U)`` closest columns per row, ``(rows, k)``.

    Columns are matrix positions, not dataset indices. Ties go to the lower column.
    """
    if T < 1:
        raise InvalidParameterError("T must be >= 1")
    values = M.values if isinstance(M, DistanceMatrix) else np.asarray(M, dtype=np.float64)
    k = min(int(T), values.shape[1])
    order = np.argsort(values, axis=1, kind="stable")
    return order[:, :k]


def refine(preliminary, M, iteration: int = 0) -> PseudoLabelSet:
    """Keep a preliminary claim (i, j) only if row i is the strict minimum of column j."""
    dm = M if isinstance(M, DistanceMatrix) else distance_matrix_from_values(M)
    values = dm.values
    col_min = values.min(axis=0)
    n_min = np.sum(values == col_min, axis=0)
    out = PseudoLabelSet()
    rejected = set()
    for i, cols in enumerate(np.asarray(preliminary)):
        for j in cols:
            j = int(j)
            if values[i, j] == col_min[j] and n_min[j] == 1:
                idx = int(dm.col_refs[j])
                out.assignments[idx] = Assignment(int(dm.row_refs[i]), iteration, float(values[i, j]))
            else:
                rejected.add(int(dm.col_refs[j]))
    out.rejected = sorted(rejected - out.assignments.keys())
    return out


def distance_matrix_from_values(values) -> DistanceMatrix:
    v = np.asarray(values, dtype=np.float64)
    return DistanceMatrix(v, np.arange(v.shape[0]), np.arange(v.shape[1]))


def camera_centers(features_by_identity) -> CameraCenters:
    """Mean of each identity's ``A`` per-camera features (real plus generated).

    ``features_by_identity`` is ``(C, A, E)``, or a list of ``(A_i, E)`` arrays
    that must all share the same ``A``.
    """
    groups = [np.asarray(f, dtype=np.float64) for f in features_by_identity]
    if not groups:
        raise InvalidParameterError("no identities given")
    A = groups[0].shape[0]
    for i, g in enumerate(groups):
        if g.ndim != 2 or g.shape[0] != A:
            raise InvalidParameterError(f"identity {i} supplies {g.shape[0] if g.ndim == 2 else 0} camera features, expected {A}")
    return CameraCenters(np.stack([g.mean(axis=0) for g in groups]))


def t_max(num_unlabeled: int, num_references: int) -> int:
    """Iteration count after which every unlabeled sample could have been claimed."""
    return max(1, -(-num_unlabeled // num_references))


def dump_matrix_csv(M: DistanceMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "distance"])
        for i in range(M.values.shape[0]):
            for j in range(M.values.shape[1]):
                w.writerow([int(M.row_refs[i]), int(M.col_refs[j]), repr(float(M.values[i, j]))])


def dump_assignments_csv(pseudo: PseudoLabelSet, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["col", "identity", "iteration"])
        for idx, a in sorted(pseudo.assignments.items()):
            w.writerow([idx, a.identity, a.iteration])


def mine(
    ref_features,
    ref_ids,
    unlabeled_features,
    unlabeled_indices,
    per_reference: int,
    iteration: int = 0,
) -> tuple[PseudoLabelSet, DistanceMatrix]:
    """Distance matrix, closest-``per_reference`` selection and strict refinement."""
    M = distance_matrix(ref_features, unlabeled_features, ref_ids, unlabeled_indices)
    prelim = select_preliminary(M, per_reference)
    return refine(prelim, M, iteration), M


def reference_groups(identities, labeled) -> list[np.ndarray]:
    """Labeled indices grouped by identity, in identity order."""
    labeled = np.asarray(labeled, dtype=np.int64)
    ids = np.asarray(identities)[labeled]
    return [labeled[ids == i] for i in np.unique(ids)]


def mine_iteration(
    params,
    inputs,
    ref_groups,
    unlabeled,
    T: int,
    camera_mode: bool = False,
    A: int = 1,
    iteration: int = 0,
) -> tuple[PseudoLabelSet, DistanceMatrix]:
    """One round of mining from EVAL-mode embeddings.

    ``ref_groups[i]`` lists the labeled indices of identity ``i``; its reference is
    their mean feature (in camera mode the ``A`` per-camera copies, so the mean is
    the camera feature center). Only inputs and labeled groups are consulted.
    """
    inputs = np.asarray(inputs)
    unlabeled = np.asarray(unlabeled, dtype=np.int64)
    feats = embed(params, inputs, EVAL)
    groups = [feats[np.asarray(g)] for g in ref_groups]
    if camera_mode:
        refs = camera_centers(groups).centers
        per_ref = A * T
    else:
        refs = np.stack([g.mean(axis=0) for g in groups])
        per_ref = T
    return mine(refs, np.arange(len(groups)), feats[unlabeled], unlabeled, per_ref, iteration)
