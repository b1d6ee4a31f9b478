"""Corpus data model, synthetic camera-structured data, splits and file I/O.

A dataset is stored column-wise (one array per field) so the numeric code can
index it directly; :class:`Sample` is the per-item view.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from pls_reid.errors import DimensionMismatchError, InvalidParameterError, MalformedFileError

UNKNOWN = -1
REAL = -1  # source_camera marker for real samples

# strength of the per-camera linear distortion; kept small so styles stay invertible
CAMERA_LINEAR_STRENGTH = 0.1


class Provenance(enum.Enum):
    REAL = "R"
    GENERATED = "G"


@dataclass(frozen=True)
class Sample:
    input: np.ndarray
    identity: int
    camera: int
    provenance: Provenance
    source_camera: int | None = None


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class Dataset:
    """Immutable collection of samples with declared ``D``, ``A`` and ``C``.

    ``identities`` uses ``UNKNOWN`` (-1) for blinded samples and
    ``source_cameras`` uses -1 for real samples.
    """

    def __init__(self, inputs, identities, cameras, source_cameras=None, *, A, C):
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 2:
            raise DimensionMismatchError(f"inputs must be 2-D, got shape {inputs.shape}")
        n = inputs.shape[0]
        if source_cameras is None:
            source_cameras = np.full(n, REAL)
        self.inputs = _readonly(inputs, np.float64)
        self.identities = _readonly(identities, np.int64)
        self.cameras = _readonly(cameras, np.int64)
        self.source_cameras = _readonly(source_cameras, np.int64)
        self.A = int(A)
        self.C = int(C)
        self._validate()

    def _validate(self):
        n, _ = self.inputs.shape
        for name in ("identities", "cameras", "source_cameras"):
            if getattr(self, name).shape != (n,):
                raise DimensionMismatchError(f"{name} must have shape ({n},)")
        if self.A < 1 or self.C < 1:
            raise InvalidParameterError("A and C must be positive")
        if not np.all(np.isfinite(self.inputs)):
            raise InvalidParameterError("inputs contain non-finite values")
        if np.any((self.cameras < 0) | (self.cameras >= self.A)):
            raise InvalidParameterError(f"camera ids must lie in [0, {self.A})")
        gen = self.source_cameras != REAL
        if np.any((self.source_cameras[gen] < 0) | (self.source_cameras[gen] >= self.A)):
            raise InvalidParameterError(f"source cameras must lie in [0, {self.A})")
        if np.any((self.identities < UNKNOWN) | (self.identities >= self.C)):
            raise InvalidParameterError(f"identities must lie in [0, {self.C}) or be UNKNOWN")
        known = self.identities[self.identities != UNKNOWN]
        missing = np.setdiff1d(np.arange(self.C), known)
        if missing.size:
            raise InvalidParameterError(f"identities without samples: {missing[:10].tolist()}")

    @property
    def N(self) -> int:
        return self.inputs.shape[0]

    @property
    def D(self) -> int:
        return self.inputs.shape[1]

    @property
    def is_generated(self) -> np.ndarray:
        return self.source_cameras != REAL

    def __len__(self):
        return self.N

    def __getitem__(self, i) -> Sample:
        src = int(self.source_cameras[i])
        return Sample(
            input=self.inputs[i],
            identity=int(self.identities[i]),
            camera=int(self.cameras[i]),
            provenance=Provenance.REAL if src == REAL else Provenance.GENERATED,
            source_camera=None if src == REAL else src,
        )

    def __iter__(self) -> Iterator[Sample]:
        for i in range(self.N):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.A == other.A
            and self.C == other.C
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.identities, other.identities)
            and np.array_equal(self.cameras, other.cameras)
            and np.array_equal(self.source_cameras, other.source_cameras)
        )

    def __repr__(self):
        return f"Dataset(N={self.N}, D={self.D}, A={self.A}, C={self.C})"

    def indices_of(self, identity: int) -> np.ndarray:
        return np.flatnonzero(self.identities == identity)

    def subset(self, indices, identity_map=None, C=None) -> Dataset:
        """Dataset restricted to ``indices``; identities optionally remapped."""
        idx = np.asarray(indices, dtype=np.int64)
        ids = self.identities[idx]
        if identity_map is not None:
            ids = np.array([identity_map.get(int(i), UNKNOWN) for i in ids], dtype=np.int64)
        return Dataset(
            self.inputs[idx], ids, self.cameras[idx], self.source_cameras[idx],
            A=self.A, C=self.C if C is None else C,
        )

    def with_identities(self, identities) -> Dataset:
        return Dataset(self.inputs, identities, self.cameras, self.source_cameras, A=self.A, C=self.C)


@dataclass(frozen=True, eq=False)
class OneShotSplit:
    """Labeled indices (grouped by identity, ``shots`` each) and the unlabeled rest."""

    labeled: np.ndarray
    unlabeled: np.ndarray
    shots: int = 1

    def __post_init__(self):
        object.__setattr__(self, "labeled", _readonly(self.labeled, np.int64))
        object.__setattr__(self, "unlabeled", _readonly(self.unlabeled, np.int64))
        if np.intersect1d(self.labeled, self.unlabeled).size:
            raise InvalidParameterError("labeled and unlabeled indices overlap")

    def __eq__(self, other):
        if not isinstance(other, OneShotSplit):
            return NotImplemented
        return (
            self.shots == other.shots
            and np.array_equal(self.labeled, other.labeled)
            and np.array_equal(self.unlabeled, other.unlabeled)
        )


def generate_synthetic(
    C: int,
    per_identity_count: int,
    D: int,
    A: int,
    identity_spread: float = 10.0,
    camera_shift_scale: float = 1.0,
    noise_scale: float = 0.5,
    seed: int = 0,
    informative_dims: int | None = None,
    nuisance_scale: float = 0.0,
) -> Dataset:
    """Gaussian identity clusters seen through per-camera affine styles.

    Each sample is ``L_a (c_i + eps) + o_a`` where ``c_i ~ N(0, spread^2)``,
    ``eps ~ N(0, noise^2)``, ``o_a ~ N(0, shift^2)`` and ``L_a`` is the identity
    plus a small random matrix. An identity's k-th sample is shown by camera
    ``k mod A``; the sample order is then shuffled.

    With ``informative_dims=k`` the centers vary only in the first ``k`` latent
    coordinates; the remaining ones carry noise alone, plus extra per-sample
    noise of scale ``nuisance_scale``.
    """
    for name, v in (("C", C), ("per_identity_count", per_identity_count), ("D", D), ("A", A)):
        if int(v) != v or v < 2:
            raise InvalidParameterError(f"{name} must be an integer >= 2, got {v!r}")
    for name, v in (
        ("identity_spread", identity_spread),
        ("camera_shift_scale", camera_shift_scale),
        ("noise_scale", noise_scale),
    ):
        if not (np.isfinite(v) and v > 0):
            raise InvalidParameterError(f"{name} must be > 0, got {v!r}")

    if informative_dims is None:
        informative_dims = D
    if not 1 <= informative_dims <= D:
        raise InvalidParameterError(f"informative_dims must lie in [1, {D}]")
    if not (np.isfinite(nuisance_scale) and nuisance_scale >= 0):
        raise InvalidParameterError("nuisance_scale must be >= 0")

    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, identity_spread, size=(C, D))
    centers[:, informative_dims:] = 0.0
    offsets = rng.normal(0.0, camera_shift_scale, size=(A, D))
    linear = np.eye(D) + CAMERA_LINEAR_STRENGTH * rng.normal(0.0, 1.0 / np.sqrt(D), size=(A, D, D))

    n = C * per_identity_count
    identities = np.repeat(np.arange(C), per_identity_count)
    cameras = np.tile(np.arange(per_identity_count), C) % A
    latent = centers[identities] + rng.normal(0.0, noise_scale, size=(n, D))
    if nuisance_scale > 0 and informative_dims < D:
        latent[:, informative_dims:] += rng.normal(0.0, nuisance_scale, size=(n, D - informative_dims))
    inputs = np.einsum("nij,nj->ni", linear[cameras], latent) + offsets[cameras]

    order = rng.permutation(n)
    return Dataset(inputs[order], identities[order], cameras[order], A=A, C=C)


def split_identities(dataset: Dataset, n_first: int) -> tuple[Dataset, Dataset]:
    """Partition by identity: ids ``< n_first`` and the rest, each renumbered from 0."""
    if not 1 <= n_first < dataset.C:
        raise InvalidParameterError(f"n_first must lie in [1, {dataset.C})")
    first = np.flatnonzero((dataset.identities >= 0) & (dataset.identities < n_first))
    second = np.flatnonzero(dataset.identities >= n_first)
    remap = {i: i - n_first for i in range(n_first, dataset.C)}
    return (
        dataset.subset(first, C=n_first),
        dataset.subset(second, identity_map=remap, C=dataset.C - n_first),
    )


def split_one_shot(dataset: Dataset, shots: int = 1, seed: int = 0) -> OneShotSplit:
    """Pick ``shots`` real samples per identity uniformly at random, ignoring cameras."""
    if shots < 1:
        raise InvalidParameterError("shots must be >= 1")
    rng = np.random.default_rng(seed)
    real = ~dataset.is_generated
    labeled = []
    for i in range(dataset.C):
        candidates = np.flatnonzero((dataset.identities == i) & real)
        if candidates.size < shots:
            raise InvalidParameterError(
                f"identity {i} has {candidates.size} samples, fewer than shots={shots}"
            )
        labeled.extend(np.sort(rng.choice(candidates, size=shots, replace=False)).tolist())
    labeled = np.asarray(labeled, dtype=np.int64)
    unlabeled = np.setdiff1d(np.flatnonzero(real), labeled)
    return OneShotSplit(labeled, unlabeled, shots)


def _format_float(v: float) -> str:
    return repr(float(v))


def save_dataset(dataset: Dataset, path) -> None:
    lines = [f"{dataset.D} {dataset.A} {dataset.C}"]
    for i in range(dataset.N):
        ident = dataset.identities[i]
        src = dataset.source_cameras[i]
        prov = "R" if src == REAL else f"G:{src}"
        values = " ".join(_format_float(v) for v in dataset.inputs[i])
        lines.append(f"{'?' if ident == UNKNOWN else ident} {dataset.cameras[i]} {prov} {values}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_int(token: str, lineno: int, field: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise MalformedFileError(f"expected an integer, got {token!r}", lineno, field) from None


def load_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    header = None
    inputs, identities, cameras, sources = [], [], [], []
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if header is None:
            if len(tokens) != 3:
                raise MalformedFileError("header must be 'D A C'", lineno)
            header = tuple(_parse_int(t, lineno, f) for t, f in zip(tokens, "DAC"))
            D, A, C = header
            continue
        if len(tokens) != 3 + D:
            raise DimensionMismatchError(
                f"line {lineno}: expected {D} values, got {len(tokens) - 3}"
            )
        ident = UNKNOWN if tokens[0] == "?" else _parse_int(tokens[0], lineno, "identity")
        cam = _parse_int(tokens[1], lineno, "camera")
        if not 0 <= cam < A:
            raise MalformedFileError(f"camera {cam} outside [0, {A})", lineno, "camera")
        if ident != UNKNOWN and not 0 <= ident < C:
            raise MalformedFileError(f"identity {ident} outside [0, {C})", lineno, "identity")
        prov = tokens[2]
        if prov == "R":
            src = REAL
        elif prov.startswith("G:"):
            src = _parse_int(prov[2:], lineno, "provenance")
            if not 0 <= src < A:
                raise MalformedFileError(f"source camera {src} outside [0, {A})", lineno, "provenance")
        else:
            raise MalformedFileError(f"provenance must be 'R' or 'G:<camera>', got {prov!r}", lineno, "provenance")
        try:
            values = [float(t) for t in tokens[3:]]
        except ValueError as exc:
            raise MalformedFileError(str(exc), lineno, "values") from None
        inputs.append(values)
        identities.append(ident)
        cameras.append(cam)
        sources.append(src)
    if header is None:
        raise MalformedFileError("missing header line")
    D, A, C = header
    arr = np.asarray(inputs, dtype=np.float64).reshape(len(inputs), D)
    return Dataset(arr, identities, cameras, sources, A=A, C=C)


def nearest_center_accuracy(dataset: Dataset) -> float:
    """Fraction of samples whose nearest per-identity input mean is their own."""
    means = np.stack([dataset.inputs[dataset.identities == i].mean(axis=0) for i in range(dataset.C)])
    d = np.linalg.norm(dataset.inputs[:, None, :] - means[None, :, :], axis=2)
    return float(np.mean(np.argmin(d, axis=1) == dataset.identities))


def identity_counts(dataset: Dataset, indices: Sequence[int] | None = None) -> np.ndarray:
    ids = dataset.identities if indices is None else dataset.identities[np.asarray(indices)]
    return np.bincount(ids[ids >= 0], minlength=dataset.C)
