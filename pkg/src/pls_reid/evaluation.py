"""CMC rank-k / mAP retrieval metrics and pseudo-label quality."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from pls_reid.datagen import Dataset
from pls_reid.errors import InvalidParameterError
from pls_reid.model import EVAL, ModelParams, embed


@dataclass(frozen=True)
class EvalProtocol:
    query: np.ndarray
    gallery: np.ndarray
    same_camera_exclusion: bool = True
    ranks: tuple[int, ...] = (1, 5, 10)


@dataclass
class MetricsReport:
    cmc: dict[int, float]
    mAP: float
    ap: list[float] = field(default_factory=list)
    excluded_queries: int = 0
    pseudo_precision: float | None = None
    pseudo_recall: float | None = None
    pseudo_ratio: float | None = None

    def rank(self, k: int) -> float:
        return self.cmc[k]

    def to_json(self) -> dict:
        d = asdict(self)
        d["cmc"] = {str(k): v for k, v in self.cmc.items()}
        return d


def make_protocol(dataset: Dataset, seed: int = 0, same_camera_exclusion: bool = True) -> EvalProtocol:
    """One random query per (identity, camera) pair; every other sample goes to the gallery.

    A pair is skipped when the identity has no sample left elsewhere to match.
    """
    rng = np.random.default_rng(seed)
    query = []
    for i in range(dataset.C):
        idx = dataset.indices_of(i)
        cams = dataset.cameras[idx]
        for a in np.unique(cams):
            own = idx[cams == a]
            if len(idx) - 1 > len(own) - 1 or not same_camera_exclusion and len(idx) > 1:
                query.append(int(rng.choice(own)))
    query = np.array(sorted(query), dtype=np.int64)
    gallery = np.setdiff1d(np.arange(dataset.N), query)
    return EvalProtocol(query, gallery, same_camera_exclusion)


def rank_metrics(distmat, q_ids, g_ids, q_cams=None, g_cams=None, ranks=(1, 5, 10)):
    """CMC at ``ranks`` and per-query AP from a query-by-gallery distance matrix.

    Gallery items sharing both identity and camera with the query are dropped when
    cameras are given. Queries left without a true match are skipped and counted.
    Distance ties are ordered by gallery position.
    """
    distmat = np.asarray(distmat, dtype=np.float64)
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    order = np.argsort(distmat, axis=1, kind="stable")
    hits = np.zeros(max(ranks))
    aps = []
    skipped = 0
    for q in range(distmat.shape[0]):
        ranked = order[q]
        if q_cams is not None:
            junk = (g_ids[ranked] == q_ids[q]) & (np.asarray(g_cams)[ranked] == q_cams[q])
            ranked = ranked[~junk]
        matches = g_ids[ranked] == q_ids[q]
        if not matches.any():
            skipped += 1
            continue
        first = int(np.argmax(matches))
        if first < len(hits):
            hits[first:] += 1
        pos = np.flatnonzero(matches) + 1
        aps.append(float(np.mean(np.arange(1, len(pos) + 1) / pos)))
    valid = len(aps)
    if valid == 0:
        raise InvalidParameterError("no query has a valid match in the gallery")
    cmc = {k: float(hits[k - 1] / valid) for k in ranks}
    return cmc, aps, skipped


def evaluate(params: ModelParams, dataset: Dataset, protocol: EvalProtocol) -> MetricsReport:
    feats = embed(params, dataset.inputs, EVAL)
    return evaluate_features(feats, dataset, protocol)


def evaluate_features(features, dataset: Dataset, protocol: EvalProtocol) -> MetricsReport:
    q, g = protocol.query, protocol.gallery
    dist = cdist(features[q], features[g])
    cams = (dataset.cameras[q], dataset.cameras[g]) if protocol.same_camera_exclusion else (None, None)
    cmc, aps, skipped = rank_metrics(
        dist, dataset.identities[q], dataset.identities[g], *cams, ranks=protocol.ranks
    )
    return MetricsReport(cmc, float(np.mean(aps)), aps, skipped)


@dataclass(frozen=True)
class PseudoQuality:
    precision: float
    recall: float
    ratio: float
    empty: bool = False


def pseudo_quality(pseudo_set, ground_truth, num_unlabeled: int) -> PseudoQuality:
    """Precision, recall and coverage ratio of pseudo labels against withheld labels.

    ``ground_truth`` maps dataset index to true identity (array or mapping).
    """
    if num_unlabeled <= 0:
        raise InvalidParameterError("num_unlabeled must be positive")
    total = len(pseudo_set.assignments)
    if total == 0:
        return PseudoQuality(1.0, 0.0, 0.0, empty=True)
    correct = sum(int(ground_truth[idx]) == a.identity for idx, a in pseudo_set.assignments.items())
    return PseudoQuality(correct / total, correct / num_unlabeled, total / num_unlabeled)


def write_report(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


CURVE_COLUMNS = ("ratio", "rank1", "mAP", "precision", "recall")


def write_curve(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in CURVE_COLUMNS])
