import dataclasses
from pathlib import Path

import numpy as np
import pytest

from pls_reid import gan
from pls_reid.datagen import generate_synthetic, split_identities, split_one_shot
from pls_reid.errors import InfeasibleBatchError, InvalidParameterError, MalformedFileError
from pls_reid.evaluation import make_protocol
from pls_reid.loss import Role
from pls_reid.model import init_model
from pls_reid.trainer import (
    LOG_FIELDS,
    TrainConfig,
    blind,
    build_view,
    form_batch,
    format_config,
    group_size,
    load_config,
    load_state,
    parse_config,
    run_pls,
    save_state,
    train_initial,
    train_iteration,
)
from pls_reid.mining import PseudoLabelSet

ROOT = Path(__file__).resolve().parents[1]

SMALL = dict(B=4, S=3, epochs_per_iteration=3, initial_epochs=3, hidden_sizes=(8,), embedding_dim=4,
             lr_backbone=0.003, gan_epochs=5)


@pytest.fixture(scope="module")
def clean():
    full = generate_synthetic(16, 6, 6, 2, identity_spread=4, camera_shift_scale=0.3, noise_scale=0.5, seed=4)
    train, test = split_identities(full, 8)
    return train, split_one_shot(train, 1, seed=0), (test, make_protocol(test, seed=0))


# ---------------------------------------------------------------- configuration


def test_defaults_and_defaults_file():
    c = TrainConfig()
    assert (c.B, c.S, c.alpha) == (16, 6, 0.3)
    assert (c.lr_backbone, c.lr_head, c.dropout_rate) == (0.00035, 0.0035, 0.5)
    assert load_config(ROOT / "configs" / "defaults.txt") == c


def test_config_text_round_trip():
    c = TrainConfig(B=5, camera_mode=True, hidden_sizes=(7, 3), loss_mode="msm", alpha=1.25)
    assert parse_config(format_config(c)) == c
    assert parse_config("S = 4  # comment\n\n# only a comment\n").S == 4


def test_config_errors():
    with pytest.raises(MalformedFileError):
        parse_config("batch = 3\n")
    with pytest.raises(MalformedFileError):
        parse_config("B 3\n")
    with pytest.raises(InvalidParameterError):
        parse_config("camera_mode = maybe\n")
    with pytest.raises(InvalidParameterError):
        parse_config("loss_mode = center\n")
    with pytest.raises(InvalidParameterError):
        TrainConfig(S=1)


# ---------------------------------------------------------------- batches


def _pools(sizes, start=100):
    pools, roles = [], []
    for s in sizes:
        pools.append(np.arange(start, start + s))
        roles.append([Role.PSEUDO] * s)
        start += s
    return pools, roles


def test_default_batch_has_96_samples():
    pools, roles = _pools([8] * 20)
    b = form_batch(np.arange(20), pools, roles, 16, 6, np.random.default_rng(0))
    assert b.flat_indices.size == 96
    assert len(set(b.identities.tolist())) == 16
    for ident, row in zip(b.identities, b.indices):
        assert row[0] == ident
        assert set(row[1:]) <= set(pools[ident].tolist())


def test_pool_of_exactly_s_minus_one_is_used_once():
    pools, roles = _pools([5, 5])
    b = form_batch(np.arange(2), pools, roles, 2, 6, np.random.default_rng(1))
    for ident, row in zip(b.identities, b.indices):
        assert sorted(row[1:].tolist()) == pools[ident].tolist()
    assert b.repeated == []


def test_single_member_pool_is_repeated_and_flagged():
    pools, roles = _pools([1, 5])
    b = form_batch(np.arange(2), pools, roles, 2, 6, np.random.default_rng(2))
    row = b.indices[b.identities.tolist().index(0)]
    assert row[1:].tolist() == [100] * 5
    assert b.repeated == [0]


def test_batch_shrinks_or_fails_when_identities_are_scarce():
    pools, roles = _pools([3, 0, 2, 0])
    b = form_batch(np.arange(4), pools, roles, 4, 3, np.random.default_rng(3))
    assert sorted(b.identities.tolist()) == [0, 2]
    with pytest.raises(InfeasibleBatchError):
        form_batch(np.arange(4), pools, roles, 4, 3, np.random.default_rng(3), fallback=False)
    with pytest.raises(InfeasibleBatchError):
        form_batch(np.arange(4), *_pools([3, 0, 0, 0]), 4, 3, np.random.default_rng(3))


def test_group_size_respects_t(clean):
    train, split, _ = clean
    view = build_view(train, split)
    c = TrainConfig()
    assert [group_size(c, T, view) for T in (1, 2, 5, 9)] == [2, 3, 6, 6]


def test_camera_mode_groups_form_from_enhanced_labeled_set():
    ds = generate_synthetic(6, 8, 3, 4, seed=0)
    split = split_one_shot(ds, 1, seed=0)
    enh = gan.augment_dataset(ds, gan.train_translators(ds, epochs=0, init="identity"))
    view = build_view(ds, split, enh)
    assert all(len(s) == 3 for s in view.support)
    roles = [[Role.SUPPORT] * 3 for _ in range(6)]
    b = form_batch(view.anchors, view.support, roles, 6, min(6, 4), np.random.default_rng(0))
    assert b.S == 4 and b.repeated == []
    assert group_size(TrainConfig(), 1, view) == 6
    assert view.per_reference_T_max == -(-(4 * 48 - 4 * 6) // 24)


# ---------------------------------------------------------------- training


def test_one_shot_initial_training_is_softmax_and_descends(clean):
    train, split, _ = clean
    config = TrainConfig(**{**SMALL, "initial_epochs": 60, "lr_backbone": 0.01, "lr_head": 0.01})
    params, _ = init_model(train.D, (8,), 4, train.C, seed=0, dropout_rate=0.0)
    losses = train_initial(params, build_view(train, split), config, np.random.default_rng(0))
    assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])


def test_zero_epochs_leave_params_unchanged(clean):
    train, split, _ = clean
    config = TrainConfig(**{**SMALL, "initial_epochs": 0, "epochs_per_iteration": 0})
    params, snap = init_model(train.D, (8,), 4, train.C, seed=0)
    view = build_view(train, split)
    train_initial(params, view, config, np.random.default_rng(0))
    train_iteration(params, view, PseudoLabelSet(), 1, config, np.random.default_rng(0))
    assert params.fingerprint() == snap.params.fingerprint()


def test_single_iteration_when_t_step_covers_everything(clean):
    train, split, ev = clean
    state = run_pls(train, split, TrainConfig(**{**SMALL, "T_step": 100}), ev)
    assert state.finished and len(state.history) == 1
    assert state.history[0]["ratio"] > 0


def test_full_run_bookkeeping_and_snapshot_reset(clean):
    train, split, ev = clean
    state = run_pls(train, split, TrainConfig(**SMALL), ev)
    T_max = -(-len(split.unlabeled) // train.C)
    assert [r["T"] for r in state.history] == list(range(1, T_max + 1))
    assert [r["iteration"] for r in state.history] == list(range(1, T_max + 1))
    assert all(set(r) == set(LOG_FIELDS) for r in state.history)
    assert set(state.start_fingerprints) == {state.initial.params.fingerprint()}
    assert state.baseline["mAP"] is not None


def test_pls_beats_one_shot_baseline_on_clean_data(clean):
    train, split, ev = clean
    config = TrainConfig(**{**SMALL, "epochs_per_iteration": 20, "initial_epochs": 20})
    state = run_pls(train, split, config, ev)
    assert state.history[-1]["rank1"] > state.baseline["rank1"]


def test_unlabeled_identities_never_influence_training(clean):
    train, split, ev = clean
    a = run_pls(train, split, TrainConfig(**SMALL), ev)
    b = run_pls(blind(train, split), split, TrainConfig(**SMALL), ev)
    assert a.params.fingerprint() == b.params.fingerprint()
    assert [r["mAP"] for r in a.history] == [r["mAP"] for r in b.history]


def test_interrupted_run_resumes_identically(clean, tmp_path):
    train, split, ev = clean
    config = TrainConfig(**SMALL)
    whole = run_pls(train, split, config, ev)
    part = run_pls(train, split, config, ev, checkpoint_dir=tmp_path / "s", max_iterations=2)
    assert len(part.history) == 2 and not part.finished
    resumed = run_pls(train, split, config, ev, state=load_state(tmp_path / "s"))
    assert resumed.history == whole.history
    assert resumed.params.fingerprint() == whole.params.fingerprint()


def test_camera_mode_run(clean):
    train, split, ev = clean
    state = run_pls(train, split, TrainConfig(**{**SMALL, "camera_mode": True}), ev)
    assert state.finished
    assert all(0 <= r["pseudo_precision"] <= 1 for r in state.history)


def test_state_round_trip(clean, tmp_path):
    train, split, ev = clean
    state = run_pls(train, split, TrainConfig(**SMALL), ev, max_iterations=1)
    save_state(state, tmp_path)
    back = load_state(tmp_path)
    assert back.params.fingerprint() == state.params.fingerprint()
    assert back.pseudo.assignments == state.pseudo.assignments
    assert back.history == state.history and back.config == state.config
    (tmp_path / "state.json").write_text("{}")
    with pytest.raises(MalformedFileError):
        load_state(tmp_path)


def test_msm_mode_routes_loss(clean):
    train, split, ev = clean
    a = run_pls(train, split, TrainConfig(**SMALL), ev, max_iterations=1)
    b = run_pls(train, split, dataclasses.replace(TrainConfig(**SMALL), loss_mode="msm"), ev, max_iterations=1)
    assert a.params.fingerprint() != b.params.fingerprint()
