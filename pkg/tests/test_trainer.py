import logging
import math

import numpy as np
import numpy.testing as npt
import pytest

from platescope import backbone as bb
from platescope import data
from platescope import trainer
from platescope.autodiff import Tensor
from platescope.backbone import ModelParams
from platescope.errors import ConfigError, DataFormatError, NumericError, ShapeError


class ScriptedRng:
    """Stand-in generator yielding a fixed draw sequence."""

    def __init__(self, randoms=(), uniforms=(), ints=()):
        self.randoms = list(randoms)
        self.uniforms = list(uniforms)
        self.ints = list(ints)

    def random(self):
        return self.randoms.pop(0)

    def uniform(self, lo, hi):
        return self.uniforms.pop(0)

    def integers(self, lo, hi):
        return self.ints.pop(0)


def toy_data(num_classes=4, num_experiments=2, hide=0.0, seed=0, **over):
    base = dict(
        num_classes=num_classes,
        num_experiments=num_experiments,
        plates_per_experiment=1,
        num_cell_types=2,
        channels=2,
        height=8,
        width=8,
        seed=seed,
    )
    manifest, images = data.generate_synthetic(data.SyntheticConfig(**{**base, **over}))
    stats = data.compute_norm_stats(manifest, images, "plate")
    normed = data.normalize_all(manifest, images, stats)
    return trainer.assemble_training_data(manifest, normed, hide_label_fraction=hide, seed=seed)


def micro_bcfg(num_classes=4):
    return bb.BackboneConfig(num_classes=num_classes, input_channels=2, stem_channels=4, num_blocks=2, embedding_dim=8)


def micro_tcfg(**over):
    base = dict(batch_size=8, total_epochs=8, consistency_rampup_epochs=4, seed=0)
    return trainer.TrainConfig(**{**base, **over})


def params_of(values):
    cfg = bb.BackboneConfig(num_classes=2)
    return ModelParams(cfg, {name: Tensor(np.array(v, dtype=np.float64)) for name, v in values.items()})


# --- config -----------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        micro_tcfg(ema_decay=1.5)
    with pytest.raises(ConfigError):
        micro_tcfg(lr_schedule=[(0.8, 1e-4), (0.5, 1e-5)])
    with pytest.raises(ConfigError):
        micro_tcfg(lr_schedule=[(1.5, 1e-4)])
    with pytest.raises(ConfigError):
        micro_tcfg(classifier="margin")
    with pytest.raises(ConfigError):
        micro_tcfg(hide_label_fraction=1.0)
    with pytest.raises(ConfigError):
        micro_tcfg(batch_size=0)


def test_lr_schedule_breakpoints():
    cfg = trainer.TrainConfig(total_epochs=160)
    assert cfg.lr_at(0) == cfg.lr_at(99) == 3e-4
    assert cfg.lr_at(100) == cfg.lr_at(139) == 1e-4
    assert cfg.lr_at(140) == cfg.lr_at(200) == 1e-5
    short = trainer.TrainConfig(total_epochs=16)
    assert short.lr_at(9) == 3e-4
    assert short.lr_at(10) == 1e-4
    assert short.lr_at(14) == 1e-5


def test_consistency_rampup():
    cfg = micro_tcfg(consistency_weight_max=2.0, consistency_rampup_epochs=10)
    npt.assert_allclose(cfg.consistency_weight(0), 2.0 * math.exp(-5.0), rtol=0, atol=1e-15)
    npt.assert_allclose(cfg.consistency_weight(5), 2.0 * math.exp(-5.0 * 0.25), rtol=0, atol=1e-15)
    assert cfg.consistency_weight(10) == cfg.consistency_weight(50) == 2.0
    assert micro_tcfg(consistency_weight_max=0.0).consistency_weight(3) == 0.0
    assert micro_tcfg(consistency_rampup_epochs=0, consistency_weight_max=1.5).consistency_weight(0) == 1.5


# --- augmentation -----------------------------------------------------------


def test_augment_all_off_is_identity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 8, 8))
    out = trainer.augment(x, rng, flips=False, erase=False, scale=False)
    npt.assert_array_equal(out, x)


def test_augment_hflip_twice_is_identity():
    x = np.random.default_rng(1).normal(size=(2, 6, 6))
    once = trainer.augment(x, ScriptedRng(randoms=[0.0, 0.9, 0.9]), erase=False, scale=False)
    assert not np.array_equal(once, x)
    twice = trainer.augment(once, ScriptedRng(randoms=[0.0, 0.9, 0.9]), erase=False, scale=False)
    npt.assert_array_equal(twice, x)


def test_augment_rot90_four_times_is_identity():
    x = np.random.default_rng(2).normal(size=(3, 6, 6))
    out = x
    for _ in range(4):
        out = trainer.augment(out, ScriptedRng(randoms=[0.9, 0.9, 0.0]), erase=False, scale=False)
    npt.assert_array_equal(out, x)
    assert not np.array_equal(trainer.augment(x, ScriptedRng(randoms=[0.9, 0.9, 0.0]), erase=False, scale=False), x)


@pytest.mark.parametrize("seed", range(25))
def test_augment_erase_fraction(seed):
    rng = np.random.default_rng(seed)
    x = np.ones((2, 32, 32))
    out = trainer.augment(x, rng, flips=False, erase=True, scale=False)
    if np.array_equal(out, x):
        return  # the 0.5 coin said no erase
    frac = float((out == 0).mean())
    # one pixel row/column of rounding slack around the configured range
    assert 0.012 <= frac <= 0.24


def test_augment_scale_factor_one_is_identity():
    x = np.random.default_rng(3).normal(size=(2, 8, 8))
    out = trainer.augment(x, ScriptedRng(randoms=[0.0], uniforms=[1.0]), flips=False, erase=False, scale=True)
    npt.assert_array_equal(out, x)


def test_augment_scale_changes_values_but_not_shape():
    x = np.random.default_rng(4).normal(size=(2, 16, 16))
    down = trainer.augment(x, ScriptedRng(randoms=[0.0], uniforms=[0.9]), flips=False, erase=False, scale=True)
    up = trainer.augment(x, ScriptedRng(randoms=[0.0], uniforms=[1.1]), flips=False, erase=False, scale=True)
    assert down.shape == up.shape == x.shape
    assert not np.array_equal(down, x) and not np.array_equal(up, x)
    # downscale pads the border with zeros
    assert np.all(down[:, 0, :] == 0)


def test_augment_requires_square():
    with pytest.raises(ShapeError):
        trainer.augment(np.zeros((1, 4, 6)), np.random.default_rng(0))


def test_augment_deterministic_per_seed():
    x = np.random.default_rng(5).normal(size=(2, 8, 8))
    a = trainer.augment(x, np.random.default_rng(7))
    b = trainer.augment(x, np.random.default_rng(7))
    npt.assert_array_equal(a, b)


def test_bilinear_resize_constant_preserved():
    x = np.full((1, 5, 5), 3.25)
    out = trainer._bilinear_resize(x, 9, 7)
    npt.assert_allclose(out, np.full((1, 9, 7), 3.25), rtol=0, atol=1e-12)


# --- ema and adam -----------------------------------------------------------


def test_ema_endpoints():
    teacher = params_of({"w": [0.0, 0.0]})
    student = params_of({"w": [1.0, 2.0]})
    trainer.ema_update(teacher, student, alpha=1.0)
    npt.assert_array_equal(teacher["w"].data, [0.0, 0.0])
    trainer.ema_update(teacher, student, alpha=0.0)
    npt.assert_array_equal(teacher["w"].data, [1.0, 2.0])


def test_ema_convex_combination():
    teacher = params_of({"w": [0.0]})
    student = params_of({"w": [1.0]})
    trainer.ema_update(teacher, student, alpha=0.99)
    npt.assert_allclose(teacher["w"].data, [0.01], rtol=0, atol=1e-15)


def test_ema_name_mismatch():
    with pytest.raises(ShapeError):
        trainer.ema_update(params_of({"a": [0.0]}), params_of({"b": [0.0]}), alpha=0.5)
    with pytest.raises(ShapeError):
        trainer.ema_update(params_of({"a": [0.0]}), params_of({"a": [0.0, 1.0]}), alpha=0.5)


def test_adam_zero_grads_no_decay_is_identity():
    params = params_of({"w": [1.0, -2.0]})
    params["w"].grad = np.zeros(2)
    adam = trainer.AdamState.for_params(params)
    trainer.adam_step(params, adam, lr=0.1, weight_decay=0.0)
    npt.assert_array_equal(params["w"].data, [1.0, -2.0])
    assert adam.t == 1


def test_adam_first_step_hand_value():
    params = params_of({"w": 1.0})
    params["w"].grad = np.float64(1.0)
    adam = trainer.AdamState.for_params(params)
    trainer.adam_step(params, adam, lr=0.1, weight_decay=0.0)
    npt.assert_allclose(params["w"].data, 0.9, rtol=0, atol=1e-7)


def test_adam_weight_decay_shrinks_params():
    params = params_of({"w": [1.0, -3.0]})
    adam = trainer.AdamState.for_params(params)
    previous = np.abs(params["w"].data).copy()
    for _ in range(5):
        params["w"].grad = np.zeros(2)
        trainer.adam_step(params, adam, lr=0.01, weight_decay=2e-4)
        current = np.abs(params["w"].data)
        assert np.all(current < previous)
        previous = current.copy()


def test_adam_rejects_non_finite_grads():
    params = params_of({"bad.weight": [1.0]})
    params["bad.weight"].grad = np.array([np.nan])
    adam = trainer.AdamState.for_params(params)
    with pytest.raises(NumericError, match="bad.weight"):
        trainer.adam_step(params, adam, lr=0.1, weight_decay=0.0)


# --- data assembly ----------------------------------------------------------


def test_assemble_pools_partition():
    td = toy_data(num_classes=8, hide=0.25)
    train_count = len(td.manifest.split_records("train"))
    hidden = int(round(0.25 * train_count))
    assert td.labeled_idx.size == train_count - hidden
    assert td.unlabeled_idx.size == hidden + len(td.manifest.split_records("test"))
    assert set(td.labeled_idx) | set(td.unlabeled_idx) | set(td.val_idx) == set(range(td.manifest.num_images))
    assert np.all(td.labels[td.labeled_idx] >= 0)
    assert np.all(td.labels[td.unlabeled_idx] == -1)
    assert np.all(td.labels[td.val_idx] == -1)


def test_assemble_hiding_is_seeded():
    a = toy_data(num_classes=8, hide=0.3, seed=2)
    b = toy_data(num_classes=8, hide=0.3, seed=2)
    npt.assert_array_equal(a.labeled_idx, b.labeled_idx)


def test_subset_for_cell_type():
    td = toy_data(num_classes=8)
    sub = td.subset_for_cell_type(0)
    keep = {r.image_index for r in td.manifest.records if r.cell_type == 0}
    assert set(sub.labeled_idx) <= keep and set(sub.val_idx) <= keep
    assert sub.labeled_idx.size + sub.unlabeled_idx.size + sub.val_idx.size == len(keep)


# --- training loop ----------------------------------------------------------


def test_epoch_smoke_finite_losses():
    td = toy_data(num_classes=8)
    state = trainer.init_trainer(micro_bcfg(8), micro_tcfg())
    stats = trainer.train_epoch(state, td, pseudo_labels={int(td.unlabeled_idx[0]): (1, True)})
    for key in ("loss", "cls", "consistency", "pseudo"):
        assert np.isfinite(stats[key])
    assert stats["epoch"] == 1 and stats["steps"] >= 1


def test_deterministic_trajectory():
    def run():
        td = toy_data(num_classes=4)
        state = trainer.init_trainer(micro_bcfg(4), micro_tcfg())
        history = [trainer.train_epoch(state, td, pseudo_labels={int(td.unlabeled_idx[0]): (2, True)}) for _ in range(3)]
        return history, state

    h1, s1 = run()
    h2, s2 = run()
    assert h1 == h2
    for name in s1.student.names():
        assert s1.student[name].data.tobytes() == s2.student[name].data.tobytes()
        assert s1.teacher[name].data.tobytes() == s2.teacher[name].data.tobytes()


def test_teacher_never_accumulates_gradients():
    td = toy_data(num_classes=4)
    state = trainer.init_trainer(micro_bcfg(4), micro_tcfg())
    trainer.train_epoch(state, td)
    assert all(t.grad is None for _, t in state.teacher.items())


def test_degenerate_config_teacher_mirrors_student():
    td = toy_data(num_classes=4)
    cfg = micro_tcfg(consistency_weight_max=0.0, pseudo_label_weight=0.0, ema_decay=0.0)
    state = trainer.init_trainer(micro_bcfg(4), cfg)
    for _ in range(2):
        trainer.train_epoch(state, td)
        for name in state.student.names():
            assert state.teacher[name].data.tobytes() == state.student[name].data.tobytes()


def test_degenerate_config_ignores_unlabeled_pixels():
    def run(garble):
        td = toy_data(num_classes=4, hide=0.25)
        if garble:
            td.images[td.unlabeled_idx] = np.random.default_rng(99).normal(size=td.images[td.unlabeled_idx].shape) * 50
        cfg = micro_tcfg(consistency_weight_max=0.0, pseudo_label_weight=0.0, ema_decay=0.0)
        state = trainer.init_trainer(micro_bcfg(4), cfg)
        for _ in range(3):
            trainer.train_epoch(state, td)
        return state

    a, b = run(False), run(True)
    for name in a.student.names():
        assert a.student[name].data.tobytes() == b.student[name].data.tobytes()


def test_unlabeled_pixels_matter_when_consistency_is_on():
    def run(garble):
        td = toy_data(num_classes=4, hide=0.25)
        if garble:
            td.images[td.unlabeled_idx] = np.random.default_rng(99).normal(size=td.images[td.unlabeled_idx].shape) * 50
        cfg = micro_tcfg(consistency_weight_max=10.0, consistency_rampup_epochs=0)
        state = trainer.init_trainer(micro_bcfg(4), cfg)
        for _ in range(3):
            trainer.train_epoch(state, td)
        return state

    a, b = run(False), run(True)
    assert any(a.student[n].data.tobytes() != b.student[n].data.tobytes() for n in a.student.names())


def test_loss_decreases_on_easy_data():
    td = toy_data(num_classes=4, pixel_noise_std=0.01)
    cfg = micro_tcfg(base_lr=3e-3, total_epochs=12)
    state = trainer.init_trainer(micro_bcfg(4), cfg)
    history = [trainer.train_epoch(state, td) for _ in range(12)]
    assert history[-1]["cls"] < history[0]["cls"]


def test_ema_stays_in_convex_hull_of_history():
    td = toy_data(num_classes=4)
    state = trainer.init_trainer(micro_bcfg(4), micro_tcfg(ema_decay=0.9))
    lo = {n: state.teacher[n].data.copy() for n in state.teacher.names()}
    hi = {n: state.teacher[n].data.copy() for n in state.teacher.names()}
    for _ in range(4):
        trainer.train_epoch(state, td)
        for name in state.student.names():
            lo[name] = np.minimum(lo[name], state.student[name].data)
            hi[name] = np.maximum(hi[name], state.student[name].data)
            assert np.all(state.teacher[name].data >= lo[name] - 1e-12)
            assert np.all(state.teacher[name].data <= hi[name] + 1e-12)


def test_replay_recomputes_logged_loss(tmp_path):
    td = toy_data(num_classes=4)
    cfg = micro_tcfg(augment_flips=False, augment_erase=False, augment_scale=False, consistency_weight_max=0.0, pseudo_label_weight=0.0)
    state = trainer.init_trainer(micro_bcfg(4), cfg)
    trainer.save_checkpoint(tmp_path / "t0.ckpt", state)
    stats = trainer.train_epoch(state, td)

    saved = trainer.load_checkpoint(tmp_path / "t0.ckpt", micro_bcfg(4), cfg)
    from platescope import losses

    emb = bb.forward(saved.student, td.images[td.labeled_idx])
    recomputed = losses.arcface_loss(emb, saved.student[bb.CLASS_WEIGHT_NAME], td.labels[td.labeled_idx], cfg.arcface(4)).item()
    npt.assert_allclose(stats["cls"], recomputed, rtol=0, atol=1e-12)


# --- prediction -------------------------------------------------------------


def test_predict_probs_rows_sum_to_one():
    td = toy_data(num_classes=4)
    state = trainer.init_trainer(micro_bcfg(4), micro_tcfg())
    probs = trainer.predict_probs(state.teacher, td.images, td.val_idx, state.train_config)
    assert probs.shape == (td.val_idx.size, 4)
    npt.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-10)


def test_predict_probs_batch_size_invariant():
    td = toy_data(num_classes=4)
    state = trainer.init_trainer(micro_bcfg(4), micro_tcfg())
    idx = np.arange(td.manifest.num_images)
    a = trainer.predict_probs(state.teacher, td.images, idx, state.train_config, batch_size=3)
    b = trainer.predict_probs(state.teacher, td.images, idx, state.train_config, batch_size=64)
    npt.assert_allclose(a, b, rtol=0, atol=1e-10)


# --- fine-tuning ------------------------------------------------------------


def test_finetune_single_cell_type_continues_joint_run():
    td = toy_data(num_classes=4, num_cell_types=1)
    cfg = micro_tcfg(finetune_epochs=2)
    state = trainer.init_trainer(micro_bcfg(4), cfg)
    trainer.train_epoch(state, td)

    continued = trainer.TrainerState(
        backbone_config=state.backbone_config,
        train_config=cfg,
        student=state.student.copy(),
        teacher=state.teacher.copy(),
        adam=trainer.AdamState(m={n: a.copy() for n, a in state.adam.m.items()}, v={n: a.copy() for n, a in state.adam.v.items()}, t=state.adam.t),
        rng=trainer.clone_rng(state.rng),
        epoch=state.epoch,
    )
    for _ in range(2):
        trainer.train_epoch(continued, td)

    tuned = trainer.finetune_per_celltype(state, td)
    assert list(tuned) == [0]
    for name in continued.student.names():
        assert tuned[0].student[name].data.tobytes() == continued.student[name].data.tobytes()


def test_finetune_routes_each_cell_type():
    td = toy_data(num_classes=4)
    cfg = micro_tcfg(finetune_epochs=1)
    state = trainer.init_trainer(micro_bcfg(4), cfg)
    trainer.train_epoch(state, td)
    before = {n: state.student[n].data.tobytes() for n in state.student.names()}
    tuned = trainer.finetune_per_celltype(state, td)
    assert sorted(tuned) == [0, 1]
    assert all(tuned[ct].epoch == state.epoch + 1 for ct in tuned)
    # the joint state is untouched, and the two branches diverge
    assert {n: state.student[n].data.tobytes() for n in state.student.names()} == before
    assert any(tuned[0].student[n].data.tobytes() != tuned[1].student[n].data.tobytes() for n in before)


def test_finetune_improves_celltype_validation_loss_majority():
    from platescope import losses

    def val_loss(params, td, cell_type, cfg):
        idx = np.array([i for i in td.val_idx if td.manifest.records[int(i)].cell_type == cell_type], dtype=np.intp)
        truth = np.array([td.manifest.records[int(i)].class_label for i in idx])
        emb = bb.forward(params, td.images[idx])
        return losses.arcface_loss(emb, params[bb.CLASS_WEIGHT_NAME], truth, cfg.arcface(8)).item()

    wins, total = 0, 0
    for seed in range(5):
        td = toy_data(
            num_classes=8, plates_per_experiment=3, seed=seed, val_fraction=0.25, pixel_noise_std=0.02
        )
        cfg = micro_tcfg(
            batch_size=16, total_epochs=20, base_lr=3e-3, finetune_epochs=3, finetune_lr=1e-3, seed=seed
        )
        state = trainer.init_trainer(micro_bcfg(8), cfg)
        for _ in range(8):
            trainer.train_epoch(state, td)
        tuned = trainer.finetune_per_celltype(state, td)
        for cell_type, branch in tuned.items():
            total += 1
            wins += val_loss(branch.student, td, cell_type, cfg) <= val_loss(state.student, td, cell_type, cfg)
    assert total == 10 and wins * 2 > total  # majority across seeds x cell types


def test_finetune_skips_cell_type_without_labels(caplog):
    td = toy_data(num_classes=4)
    empty = np.asarray([i for i in td.labeled_idx if td.manifest.records[i].cell_type == 0], dtype=np.intp)
    crippled = trainer.TrainingData(
        manifest=td.manifest, images=td.images, labels=td.labels, labeled_idx=empty, unlabeled_idx=td.unlabeled_idx, val_idx=td.val_idx
    )
    state = trainer.init_trainer(micro_bcfg(4), micro_tcfg(finetune_epochs=1))
    with caplog.at_level(logging.WARNING, logger="platescope.trainer"):
        tuned = trainer.finetune_per_celltype(state, crippled)
    assert sorted(tuned) == [0]
    assert any("skipping fine-tune" in r.message for r in caplog.records)


# --- checkpointing ----------------------------------------------------------


def test_checkpoint_resume_is_bitwise():
    def uninterrupted():
        td = toy_data(num_classes=4)
        state = trainer.init_trainer(micro_bcfg(4), micro_tcfg())
        return [trainer.train_epoch(state, td, pseudo_labels={int(td.unlabeled_idx[0]): (2, True)}) for _ in range(4)], state

    ref_history, ref_state = uninterrupted()

    td = toy_data(num_classes=4)
    state = trainer.init_trainer(micro_bcfg(4), micro_tcfg())
    pl = {int(td.unlabeled_idx[0]): (2, True)}
    first = [trainer.train_epoch(state, td, pl) for _ in range(2)]
    import tempfile, os

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "mid.ckpt")
        trainer.save_checkpoint(path, state)
        resumed = trainer.load_checkpoint(path, micro_bcfg(4), micro_tcfg())
    second = [trainer.train_epoch(resumed, td, pl) for _ in range(2)]

    assert first + second == ref_history
    assert resumed.epoch == ref_state.epoch and resumed.adam.t == ref_state.adam.t
    for name in ref_state.student.names():
        assert resumed.student[name].data.tobytes() == ref_state.student[name].data.tobytes()
        assert resumed.teacher[name].data.tobytes() == ref_state.teacher[name].data.tobytes()
    assert resumed.rng.bit_generator.state == ref_state.rng.bit_generator.state


def test_checkpoint_preserves_metadata(tmp_path):
    state = trainer.init_trainer(micro_bcfg(4), micro_tcfg())
    state.epoch = 7
    state.adam.t = 21
    state.best_val_accuracy = 0.625
    trainer.save_checkpoint(tmp_path / "a.ckpt", state)
    back = trainer.load_checkpoint(tmp_path / "a.ckpt", micro_bcfg(4), micro_tcfg())
    assert back.epoch == 7 and back.adam.t == 21 and back.best_val_accuracy == 0.625
    fresh = trainer.init_trainer(micro_bcfg(4), micro_tcfg())
    assert fresh.best_val_accuracy == float("-inf")


def test_checkpoint_corruption_detected(tmp_path):
    state = trainer.init_trainer(micro_bcfg(4), micro_tcfg())
    path = tmp_path / "a.ckpt"
    trainer.save_checkpoint(path, state)
    raw = bytearray(path.read_bytes())
    raw[50] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError):
        trainer.load_checkpoint(path, micro_bcfg(4), micro_tcfg())


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "a.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(DataFormatError):
        trainer.load_checkpoint(path, micro_bcfg(4), micro_tcfg())


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        trainer.load_checkpoint(tmp_path / "none.ckpt", micro_bcfg(4), micro_tcfg())


def test_checkpoint_config_mismatch(tmp_path):
    state = trainer.init_trainer(micro_bcfg(4), micro_tcfg())
    path = tmp_path / "a.ckpt"
    trainer.save_checkpoint(path, state)
    with pytest.raises(DataFormatError):
        trainer.load_checkpoint(path, micro_bcfg(8), micro_tcfg())
