"""The progressive pseudo-label sampling loop.

Initial training on the labeled samples, then repeatedly: mine pseudo labels with
the latest model, reset to the initial snapshot, and retrain on labeled anchors
plus their pseudo-labeled group members under softmax + triplet loss.

Unlabeled ground truth is only ever read by :func:`_diagnostics`.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pls_reid import gan
from pls_reid.datagen import UNKNOWN, Dataset, OneShotSplit
from pls_reid.errors import InfeasibleBatchError, InvalidParameterError, MalformedFileError
from pls_reid.evaluation import EvalProtocol, evaluate, pseudo_quality
from pls_reid.loss import Role, TripletBatch, overall_loss, softmax_ce
from pls_reid.mining import PseudoLabelSet, mine_iteration, reference_groups, t_max
from pls_reid.model import (
    TRAIN,
    AdamState,
    ModelParams,
    ModelSnapshot,
    Trace,
    adam_step,
    backward,
    classify,
    embed,
    init_model,
    input_statistics,
    load_checkpoint,
    restore,
    save_checkpoint,
)

log = logging.getLogger(__name__)

STATE_VERSION = 1
LOG_FIELDS = ("iteration", "T", "ratio", "pseudo_precision", "pseudo_recall", "rank1", "rank5", "rank10", "mAP")


@dataclass
class TrainConfig:
    B: int = 16
    S: int = 6
    alpha: float = 0.3
    epochs_per_iteration: int = 25
    initial_epochs: int = 25
    T_step: int = 1
    camera_mode: bool = False
    loss_mode: str = "hsoften"
    seed: int = 0
    model_seed: int = 0
    split_seed: int = 0
    eval_seed: int = 0
    shots: int = 1
    hidden_sizes: tuple[int, ...] = (64,)
    embedding_dim: int = 32
    activation: str = "tanh"
    dropout_rate: float = 0.5
    lr_backbone: float = 0.00035
    lr_head: float = 0.0035
    beta1: float = 0.9
    beta2: float = 0.999
    triplet_reduction: str = "sum"
    hinge: bool = True
    batch_fallback: bool = True
    same_camera_exclusion: bool = True
    gan_epochs: int = 200
    gan_lambda: float = 10.0
    gan_seed: int = 0
    gan_generator: str = "affine"

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self.validate()

    def validate(self):
        if self.B < 2:
            raise InvalidParameterError("B must be >= 2")
        if self.S < 2:
            raise InvalidParameterError("S must be >= 2")
        if self.alpha < 0:
            raise InvalidParameterError("alpha must be >= 0")
        if self.T_step < 1:
            raise InvalidParameterError("T_step must be >= 1")
        if self.loss_mode not in ("hsoften", "msm"):
            raise InvalidParameterError(f"loss_mode must be 'hsoften' or 'msm', got {self.loss_mode!r}")
        if self.triplet_reduction not in ("sum", "mean"):
            raise InvalidParameterError("triplet_reduction must be 'sum' or 'mean'")
        if self.epochs_per_iteration < 0 or self.initial_epochs < 0:
            raise InvalidParameterError("epoch counts must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise InvalidParameterError("dropout_rate must lie in [0, 1)")


def _parse_value(raw: str, typ, key: str):
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise InvalidParameterError(f"{key}: expected a boolean, got {raw!r}")
    if typ == "tuple":
        return tuple(int(t) for t in raw.replace(",", " ").split())
    try:
        return typ(raw)
    except ValueError:
        raise InvalidParameterError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def _field_types():
    out = {}
    for f in dataclasses.fields(TrainConfig):
        default = f.default
        out[f.name] = "tuple" if isinstance(default, tuple) else type(default)
    return out


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """``key = value`` lines; keys are TrainConfig field names, ``#`` starts a comment."""
    types = _field_types()
    values = dataclasses.asdict(base) if base is not None else {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MalformedFileError("expected 'key = value'", lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise MalformedFileError(f"unknown key {key!r}", lineno, key)
        values[key] = _parse_value(value, types[key], key)
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(config: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(h) for h in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class TrainingView:
    """Everything the optimizer and miner may see: inputs and known labels only.

    ``anchors[i]`` is identity i's real labeled sample, ``support[i]`` its other
    known-label samples (extra shots or generated copies), ``ref_groups[i]`` the
    indices averaged into its mining reference.
    """

    inputs: np.ndarray
    C: int
    A: int
    anchors: np.ndarray
    support: list[np.ndarray]
    ref_groups: list[np.ndarray]
    unlabeled: np.ndarray
    camera_mode: bool

    @property
    def per_reference_T_max(self) -> int:
        return t_max(len(self.unlabeled), self.C * (self.A if self.camera_mode else 1))


def build_view(dataset: Dataset, split: OneShotSplit, enhanced: gan.EnhancedDataset | None = None) -> TrainingView:
    if enhanced is not None:
        groups = enhanced.labeled_groups(split)
        data = enhanced.dataset
        unlabeled = enhanced.enhanced_split(split).unlabeled
        A = data.A
    else:
        groups = reference_groups(dataset.identities, split.labeled)
        data = dataset
        unlabeled = split.unlabeled
        A = dataset.A
    anchors = np.array([g[0] for g in groups], dtype=np.int64)
    support = [g[1:] for g in groups]
    return TrainingView(data.inputs, len(groups), A, anchors, support, groups, unlabeled, enhanced is not None)


@dataclass
class RunState:
    config: TrainConfig
    params: ModelParams
    initial: ModelSnapshot
    iteration: int = 0
    T: int = 0
    pseudo: PseudoLabelSet = field(default_factory=PseudoLabelSet)
    history: list[dict] = field(default_factory=list)
    baseline: dict | None = None
    rng_state: dict | None = None
    start_fingerprints: list[str] = field(default_factory=list)
    finished: bool = False


def group_size(config: TrainConfig, T: int, view: TrainingView) -> int:
    """Group size honoring ``S - 1 <= T``; camera mode also counts the A-1 generated copies."""
    per_ref = T * view.A + view.A - 1 if view.camera_mode else T
    return max(2, min(config.S, per_ref + 1))


def form_batch(
    anchors,
    pools,
    pool_roles,
    B: int,
    S: int,
    rng: np.random.Generator,
    fallback: bool = True,
) -> TripletBatch:
    """``B`` distinct identities, each an anchor plus ``S-1`` members drawn from its pool.

    Identities with at least ``S-1`` pool members are preferred. A scarce pool is
    used in full and then resampled with replacement (recorded in ``repeated``).
    Identities with an empty pool are never chosen.
    """
    sizes = np.array([len(p) for p in pools])
    eligible = np.flatnonzero(sizes > 0)
    if len(eligible) < B:
        if not fallback or len(eligible) < 2:
            raise InfeasibleBatchError(
                f"only {len(eligible)} identities have group members, need {B if not fallback else 2}"
            )
        log.debug("shrinking batch from %d to %d identities", B, len(eligible))
        B = len(eligible)
    rich = eligible[sizes[eligible] >= S - 1]
    if len(rich) >= B:
        chosen = rng.choice(rich, size=B, replace=False)
    else:
        poor = np.setdiff1d(eligible, rich)
        chosen = np.concatenate([rich, rng.choice(poor, size=B - len(rich), replace=False)])
        chosen = rng.permutation(chosen)
    rows, roles, repeated = [], [], []
    for ident in chosen:
        pool = np.asarray(pools[ident])
        prole = pool_roles[ident]
        if len(pool) >= S - 1:
            pick = rng.choice(len(pool), size=S - 1, replace=False)
        else:
            extra = rng.choice(len(pool), size=S - 1 - len(pool), replace=True)
            pick = np.concatenate([rng.permutation(len(pool)), extra])
            repeated.append(int(ident))
        rows.append([int(anchors[ident]), *pool[pick].tolist()])
        roles.append([Role.LABELED, *(prole[k] for k in pick)])
    return TripletBatch(np.asarray(chosen, dtype=np.int64), np.array(rows), roles, repeated)


def _train_step(params, adam, view, flat_idx, class_labels, group_labels, config, rng, triplet=True):
    x = view.inputs[flat_idx]
    trace = Trace()
    emb = embed(params, x, TRAIN, trace)
    logits = classify(params, emb, TRAIN, dropout_seed=int(rng.integers(2**63)), trace=trace)
    if triplet:
        lv = overall_loss(
            emb, group_labels, logits, class_labels, config.alpha,
            triplet=config.loss_mode, clamp=config.hinge, reduction=config.triplet_reduction,
        )
    else:
        lv = softmax_ce(logits, class_labels)
    grads = backward(params, trace, lv.grad_embeddings, lv.grad_logits)
    adam_step(params, grads, adam, config.lr_backbone, config.lr_head)
    return lv.value


def _new_adam(config):
    return AdamState(beta1=config.beta1, beta2=config.beta2)


def train_initial(params: ModelParams, view: TrainingView, config: TrainConfig, rng) -> list[float]:
    """Train on labeled samples only; returns the mean loss per epoch.

    Softmax alone when no identity has a second known-label sample (pure one-shot);
    otherwise groups of anchor + support samples feed the full objective.
    """
    adam = _new_adam(config)
    losses = []
    has_groups = sum(len(s) > 0 for s in view.support) >= 2
    if has_groups:
        S = max(2, min(config.S, 1 + min(len(s) for s in view.support if len(s))))
        pools = view.support
        roles = [[Role.SUPPORT] * len(p) for p in pools]
        steps = -(-view.C // config.B)
        for _ in range(config.initial_epochs):
            epoch = []
            for _ in range(steps):
                batch = form_batch(view.anchors, pools, roles, config.B, S, rng, config.batch_fallback)
                epoch.append(
                    _train_step(params, adam, view, batch.flat_indices, batch.labels, batch.labels, config, rng)
                )
            losses.append(float(np.mean(epoch)))
        return losses

    labels = np.arange(view.C)
    chunk = config.B * config.S
    for _ in range(config.initial_epochs):
        order = rng.permutation(view.C)
        epoch = []
        for start in range(0, view.C, chunk):
            sel = order[start : start + chunk]
            if len(sel) < 2:
                continue
            epoch.append(
                _train_step(params, adam, view, view.anchors[sel], labels[sel], None, config, rng, triplet=False)
            )
        losses.append(float(np.mean(epoch)))
    return losses


def train_iteration(params: ModelParams, view: TrainingView, pseudo: PseudoLabelSet, T: int, config: TrainConfig, rng):
    """Inner epochs over batches of labeled anchors and their pseudo-labeled members."""
    by_id = pseudo.by_identity(view.C)
    pools, roles = [], []
    for i in range(view.C):
        pools.append(np.concatenate([view.support[i], by_id[i]]).astype(np.int64))
        roles.append([Role.SUPPORT] * len(view.support[i]) + [Role.PSEUDO] * len(by_id[i]))
    S = group_size(config, T, view)
    eligible = sum(len(p) > 0 for p in pools)
    steps = max(1, -(-eligible // config.B))
    adam = _new_adam(config)
    losses = []
    for _ in range(config.epochs_per_iteration):
        epoch = []
        for _ in range(steps):
            batch = form_batch(view.anchors, pools, roles, config.B, S, rng, config.batch_fallback)
            epoch.append(_train_step(params, adam, view, batch.flat_indices, batch.labels, batch.labels, config, rng))
        losses.append(float(np.mean(epoch)))
    return losses


def _diagnostics(pseudo, ground_truth, num_unlabeled, params, eval_data):
    q = pseudo_quality(pseudo, ground_truth, num_unlabeled)
    row = {"ratio": q.ratio, "pseudo_precision": q.precision, "pseudo_recall": q.recall}
    row.update(_eval_row(params, eval_data))
    return row


def _eval_row(params, eval_data):
    if eval_data is None:
        return {"rank1": None, "rank5": None, "rank10": None, "mAP": None}
    dataset, protocol = eval_data
    rep = evaluate(params, dataset, protocol)
    return {
        "rank1": rep.cmc.get(1),
        "rank5": rep.cmc.get(5),
        "rank10": rep.cmc.get(10),
        "mAP": rep.mAP,
    }


def prepare(dataset: Dataset, split: OneShotSplit, config: TrainConfig, enhanced=None, translators=None):
    """Training view and ground-truth vector (diagnostics only) for a run."""
    if config.camera_mode and enhanced is None:
        if translators is None:
            translators = gan.train_translators(
                dataset, config.gan_epochs, config.gan_lambda, config.gan_seed, generator=config.gan_generator
            )
        enhanced = gan.augment_dataset(dataset, translators)
    if not config.camera_mode:
        enhanced = None
    view = build_view(dataset, split, enhanced)
    truth = (enhanced.dataset if enhanced is not None else dataset).identities
    return view, truth


def new_run(view: TrainingView, config: TrainConfig) -> RunState:
    params, initial = init_model(
        view.inputs.shape[1], config.hidden_sizes, config.embedding_dim, view.C,
        config.dropout_rate, config.model_seed, config.activation,
        input_stats=input_statistics(view.inputs),
    )
    return RunState(config, params, initial, rng_state=np.random.default_rng(config.seed).bit_generator.state)


def run_pls(
    dataset: Dataset,
    split: OneShotSplit,
    config: TrainConfig,
    eval_data: tuple[Dataset, EvalProtocol] | None = None,
    *,
    enhanced: gan.EnhancedDataset | None = None,
    translators=None,
    state: RunState | None = None,
    checkpoint_dir=None,
    log_path=None,
    max_iterations: int | None = None,
) -> RunState:
    """Run (or resume) the full loop until the T schedule saturates.

    ``max_iterations`` stops early after that many mining iterations in this call,
    leaving a resumable state. ``eval_data`` is a held-out (dataset, protocol).
    """
    view, truth = prepare(dataset, split, config, enhanced, translators)
    if state is None:
        state = new_run(view, config)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state

    if state.baseline is None:
        train_initial(state.params, view, config, rng)
        state.baseline = _eval_row(state.params, eval_data)
        state.rng_state = rng.bit_generator.state
        _persist(state, checkpoint_dir, log_path)

    T_max = view.per_reference_T_max
    done_now = 0
    while not state.finished:
        if max_iterations is not None and done_now >= max_iterations:
            break
        it = state.iteration + 1
        T = min(it * config.T_step, T_max)
        pseudo, _ = mine_iteration(
            state.params, view.inputs, view.ref_groups, view.unlabeled, T,
            camera_mode=view.camera_mode, A=view.A, iteration=it,
        )
        params = restore(state.initial)
        state.start_fingerprints.append(params.fingerprint())
        train_iteration(params, view, pseudo, T, config, rng)
        row = {"iteration": it, "T": T}
        row.update(_diagnostics(pseudo, truth, len(view.unlabeled), params, eval_data))
        state.params, state.pseudo, state.T, state.iteration = params, pseudo, T, it
        state.history.append({k: row[k] for k in LOG_FIELDS})
        state.finished = T >= T_max
        state.rng_state = rng.bit_generator.state
        done_now += 1
        log.info("iteration %d T=%d ratio=%.3f precision=%.3f mAP=%s", it, T, row["ratio"], row["pseudo_precision"], row["mAP"])
        _persist(state, checkpoint_dir, log_path)
    return state


def write_log(history, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps({k: row[k] for k in LOG_FIELDS}) + "\n")


def _persist(state, checkpoint_dir, log_path):
    if log_path is not None:
        write_log(state.history, log_path)
    if checkpoint_dir is not None:
        save_state(state, checkpoint_dir)


def save_state(state: RunState, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state.params, d / "model.npz")
    save_checkpoint(state.initial.params, d / "initial.npz")
    meta = {
        "format_version": STATE_VERSION,
        "config": format_config(state.config),
        "iteration": state.iteration,
        "T": state.T,
        "pseudo": state.pseudo.to_json(),
        "history": state.history,
        "baseline": state.baseline,
        "rng_state": state.rng_state,
        "initial_rng_state": state.initial.rng_state,
        "start_fingerprints": state.start_fingerprints,
        "finished": state.finished,
    }
    tmp = d / "state.json.tmp"
    tmp.write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(d / "state.json")


def load_state(directory) -> RunState:
    d = Path(directory)
    try:
        meta = json.loads((d / "state.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedFileError(f"unreadable run state: {exc}") from None
    if meta.get("format_version") != STATE_VERSION:
        raise MalformedFileError(f"unsupported run state version {meta.get('format_version')!r}")
    return RunState(
        config=parse_config(meta["config"]),
        params=load_checkpoint(d / "model.npz"),
        initial=ModelSnapshot(load_checkpoint(d / "initial.npz"), meta["initial_rng_state"]),
        iteration=meta["iteration"],
        T=meta["T"],
        pseudo=PseudoLabelSet.from_json(meta["pseudo"]),
        history=meta["history"],
        baseline=meta["baseline"],
        rng_state=meta["rng_state"],
        start_fingerprints=meta["start_fingerprints"],
        finished=meta["finished"],
    )


def blind(dataset: Dataset, split: OneShotSplit) -> Dataset:
    """Copy of ``dataset`` with every unlabeled identity replaced by UNKNOWN."""
    ids = np.full(dataset.N, UNKNOWN, dtype=np.int64)
    ids[split.labeled] = dataset.identities[split.labeled]
    return dataset.with_identities(ids)
