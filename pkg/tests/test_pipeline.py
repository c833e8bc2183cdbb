import dataclasses

import numpy as np
import pytest

from strokeforge.autodiff import Tensor
from strokeforge.cases import PerfusionMaps
from strokeforge.phantom import PhantomSpec, generate_phantom_case
from strokeforge.pipeline import (GENERATOR_CHANNELS, PipelineState,
                                  TrainConfig, assemble_generator_input,
                                  config_from_dict, config_to_dict,
                                  cross_validate, dice_score,
                                  fold_assignments, forward_pipeline, infer,
                                  lr_schedule, prepare_case, rmsprop_step,
                                  train_fold)


def desk_cfg(**kw):
    base = dict(seed=0, image_size=32, total_epochs=3, warmup_epochs=1,
                lr_decay_epochs=(2,), batch_size=4, folds=2, heatmap_sigma=3.0,
                unet_depth=2, unet_base=4)
    base.update(kw)
    return TrainConfig.desk(**base)


def small_cases(n=6, seed=21, image_size=32):
    spec = PhantomSpec(n_cases=n, image_size=image_size, seed=seed,
                       lesion_radius_range=(3, 6), noise_sigma=0.05)
    return [generate_phantom_case(spec, i) for i in range(n)]


class TestLrSchedule:
    def test_paper_scale_milestones(self):
        cfg = TrainConfig()    # paper defaults: 0.002, decay 0.2 at 180/300
        assert lr_schedule(100, cfg) == pytest.approx(0.002)
        assert lr_schedule(179, cfg) == pytest.approx(0.002)
        assert lr_schedule(180, cfg) == pytest.approx(4e-4)
        assert lr_schedule(200, cfg) == pytest.approx(4e-4)
        assert lr_schedule(300, cfg) == pytest.approx(8e-5)
        assert lr_schedule(359, cfg) == pytest.approx(8e-5)

    def test_warmup_start_is_tenth(self):
        cfg = TrainConfig()
        assert lr_schedule(0, cfg) == pytest.approx(0.1 * 0.002)
        assert lr_schedule(5, cfg) == pytest.approx(0.002)

    def test_nonincreasing_after_warmup_piecewise_constant(self):
        cfg = TrainConfig()
        lrs = [lr_schedule(e, cfg) for e in range(cfg.warmup_epochs, 360)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        assert len(set(lrs)) == 3

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            lr_schedule(-1, TrainConfig())


class TestRmsprop:
    def test_zero_gradient_no_change(self):
        p = np.array([1.0, 2.0])
        s = np.zeros(2)
        rmsprop_step([p], [np.zeros(2)], [s], lr=0.1, rho=0.9, eps=1e-8)
        assert np.array_equal(p, [1.0, 2.0])

    def test_single_step_hand_evaluated(self):
        p = np.array([0.0])
        s = np.zeros(1)
        rmsprop_step([p], [np.array([1.0])], [s], lr=0.1, rho=0.9, eps=0.0)
        assert p[0] == pytest.approx(-0.1 / np.sqrt(0.1))
        assert p[0] == pytest.approx(-0.31623, abs=1e-5)

    def test_rho_zero_signed_steps(self):
        p = np.array([0.0])
        s = np.zeros(1)
        g = np.array([2.5])
        rmsprop_step([p], [g], [s], lr=0.05, rho=0.0, eps=0.0)
        first = p[0]
        rmsprop_step([p], [g], [s], lr=0.05, rho=0.0, eps=0.0)
        assert first == pytest.approx(-0.05)
        assert p[0] - first == pytest.approx(-0.05)


class TestDice:
    def test_identical(self, rng):
        m = rng.random((8, 8)) < 0.4
        assert dice_score(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, 0], b[3, 3] = True, True
        assert dice_score(a, b) == 0.0

    def test_worked_example(self):
        pred = np.zeros((4, 4))
        truth = np.zeros((4, 4))
        pred[0, :2] = 1
        truth[0, :4] = 1
        assert dice_score(pred, truth) == pytest.approx(2 * 2 / 6)

    def test_both_empty_is_one(self):
        assert dice_score(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


class TestAssembly:
    def test_channel_order_and_count(self, rng):
        h = w = 8
        arrays = {name: rng.normal(size=(h, w)) for name in GENERATOR_CHANNELS}
        maps = PerfusionMaps(arrays["cbf"], arrays["cbv"], arrays["mtt"],
                             arrays["tmax"])
        out = assemble_generator_input(arrays["map_pre"], arrays["map_prob"],
                                       maps, arrays["ctp_mean"])
        assert out.shape == (7, h, w)
        for i, name in enumerate(GENERATOR_CHANNELS):
            assert np.array_equal(out.data[i], arrays[name]), name

    def test_cbf_passthrough(self, rng):
        h = w = 4
        cbf = rng.normal(size=(h, w))
        maps = PerfusionMaps(cbf, *(rng.normal(size=(h, w)) for _ in range(3)))
        out = assemble_generator_input(np.zeros((h, w)), np.zeros((h, w)), maps,
                                       np.zeros((h, w)))
        assert np.array_equal(out.data[2], cbf)

    def test_shape_mismatch_names_channel(self, rng):
        maps = PerfusionMaps(*(rng.normal(size=(4, 4)) for _ in range(4)))
        with pytest.raises(ValueError, match="ctp_mean"):
            assemble_generator_input(np.zeros((4, 4)), np.zeros((4, 4)), maps,
                                     np.zeros((5, 5)))

    def test_gradient_flows_through_stack(self, rng):
        maps = PerfusionMaps(*(rng.normal(size=(4, 4)) for _ in range(4)))
        pre = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        out = assemble_generator_input(pre, np.zeros((4, 4)), maps,
                                       np.zeros((4, 4)))
        (out * out).sum().backward()
        assert pre.grad is not None and np.any(pre.grad != 0)


class TestFoldAssignment:
    def test_partition_and_evenness(self):
        ids = [f"case_{i:03d}" for i in range(60)]
        assign = fold_assignments(ids, 4, seed=5)
        sizes = [sum(1 for v in assign.values() if v == f) for f in range(4)]
        assert sorted(assign) == ids          # every case exactly once
        assert sizes == [15, 15, 15, 15]

    def test_deterministic_under_seed(self):
        ids = [f"c{i}" for i in range(11)]
        assert fold_assignments(ids, 3, 9) == fold_assignments(ids, 3, 9)
        assert fold_assignments(ids, 3, 9) != fold_assignments(ids, 3, 10)

    def test_too_few_cases_rejected(self):
        with pytest.raises(ValueError):
            fold_assignments(["a", "b"], 3, 0)


class TestForwardPipeline:
    def test_shapes_and_softmax_rows(self):
        cfg = desk_cfg()
        case = small_cases(1)[0]
        state = PipelineState(cfg)
        map_pre, map_prob, dwi_g, seg_prob = forward_pipeline(case, state)
        assert map_pre.shape == (1, 1, 32, 32)
        assert dwi_g.shape == (1, 1, 32, 32)
        assert seg_prob.shape == (1, 2, 32, 32)
        assert np.abs(seg_prob.sum(axis=1) - 1.0).max() < 1e-12
        assert np.array_equal(map_prob, 1 / (1 + np.exp(-map_pre)))

    def test_variant_outputs(self):
        case = small_cases(1)[0]
        for variant, has_gen, has_ext in (("gen", True, False),
                                          ("segonly", False, False)):
            state = PipelineState(desk_cfg(variant=variant))
            map_pre, _, dwi_g, seg_prob = forward_pipeline(case, state)
            assert (map_pre is not None) == has_ext
            assert (dwi_g is not None) == has_gen
            assert seg_prob is not None

    def test_end_to_end_gradient_reaches_extractor(self):
        # with the extractor's own loss silenced, gradient can only arrive
        # through the generator path
        cfg = desk_cfg()
        cfg.loss_weights = dataclasses.replace(cfg.loss_weights, alpha=0.0)
        state = PipelineState(cfg)
        prepared = [prepare_case(c, cfg) for c in small_cases(2)]
        outputs = state.forward_batch(prepared, training=True)
        loss, _ = state.total_loss(outputs, prepared)
        state.zero_grad()
        loss.backward()
        got = state.nets["extractor"].params["enc1.conv1.w"].grad
        assert got is not None and np.any(got != 0)

    def test_detach_stages_blocks_cross_gradients(self):
        # stage detach plus silenced upstream losses: the segmentation loss
        # alone must not reach generator or extractor parameters
        cfg = desk_cfg(detach_stages=True)
        cfg.loss_weights = dataclasses.replace(cfg.loss_weights,
                                               alpha=0.0, beta=0.0, gamma=0.0)
        state = PipelineState(cfg)
        prepared = [prepare_case(c, cfg) for c in small_cases(2)]
        outputs = state.forward_batch(prepared, training=True)
        loss, _ = state.total_loss(outputs, prepared)
        state.zero_grad()
        loss.backward()

        def effective_grad(net, name):
            g = state.nets[net].params[name].grad
            return g is not None and np.any(g != 0)

        assert not effective_grad("generator", "head.w")
        assert not effective_grad("extractor", "head.w")
        assert effective_grad("segmentor", "head.w")

    def test_total_loss_requires_truth(self):
        cfg = desk_cfg()
        state = PipelineState(cfg)
        case = small_cases(1)[0]
        case.dwi = None
        case.mask = None
        pc = prepare_case(case, cfg)
        outputs = state.forward_batch([pc], training=False)
        with pytest.raises(ValueError):
            state.total_loss(outputs, [pc])

    def test_loss_composition_reduces_to_pr_loss(self):
        cfg = desk_cfg()
        cfg.loss_weights = dataclasses.replace(cfg.loss_weights,
                                               alpha=0.0, beta=0.0, gamma=0.0)
        state = PipelineState(cfg)
        prepared = [prepare_case(c, cfg) for c in small_cases(2)]
        outputs = state.forward_batch(prepared, training=True)
        total, comps = state.total_loss(outputs, prepared)
        from strokeforge.losses import pr_loss
        onehot = np.stack([pc.onehot for pc in prepared])
        weight = np.stack([pc.weight for pc in prepared])
        want = float(pr_loss(outputs["seg_prob"], onehot, weight,
                             cfg.loss_weights.delta).data)
        assert float(total.data) == pytest.approx(want, rel=1e-12)


class TestInfer:
    def test_binary_mask_and_threshold_idempotence(self):
        cfg = desk_cfg()
        state = PipelineState(cfg)
        case = small_cases(1)[0]
        pred, seg_prob, dwi_g = infer(case, state)
        assert set(np.unique(pred)) <= {0.0, 1.0}
        again = (seg_prob[1] > 0.5).astype(np.float64)
        assert np.array_equal(pred, again)

    def test_works_without_truth(self):
        cfg = desk_cfg()
        state = PipelineState(cfg)
        case = small_cases(1)[0]
        case.dwi = None
        case.mask = None
        pred, _, dwi_g = infer(case, state)
        assert pred.shape == (32, 32)
        assert dwi_g is not None


class TestDeterminismAndPersistence:
    def test_same_config_same_losses(self):
        cfg = desk_cfg(total_epochs=2)
        cases = small_cases(4)
        rows = []
        for _ in range(2):
            prepared = [prepare_case(c, cfg) for c in cases]
            state, loss_rows = train_fold(prepared, cfg, seed=7)
            rows.append(loss_rows)
        assert rows[0] == rows[1]

    def test_checkpoint_resume_bit_identical(self, tmp_path):
        cfg = desk_cfg(total_epochs=4)
        prepared = [prepare_case(c, cfg) for c in small_cases(4)]

        straight, rows_straight = train_fold(prepared, cfg, seed=3)

        half, rows_half = train_fold(prepared, cfg, seed=3, epochs=2)
        half.save(tmp_path / "mid.ckpt")
        resumed = PipelineState.load(tmp_path / "mid.ckpt")
        resumed, rows_resumed = train_fold(prepared, cfg, seed=3, state=resumed,
                                           loss_rows=rows_half)
        assert rows_resumed == rows_straight
        for name, t in straight._named_params():
            assert np.array_equal(t.data, dict(resumed._named_params())[name].data), name
        for name, arr in straight.optimizer.buffers.items():
            assert np.array_equal(arr, resumed.optimizer.buffers[name]), name

    def test_checkpoint_restores_config(self, tmp_path):
        cfg = desk_cfg(variant="gen")
        state = PipelineState(cfg)
        state.save(tmp_path / "s.ckpt")
        loaded = PipelineState.load(tmp_path / "s.ckpt")
        assert loaded.cfg == cfg
        assert list(dict(loaded._named_params())) == list(dict(state._named_params()))

    def test_config_dict_round_trip(self):
        cfg = desk_cfg(variant="gen", detach_stages=True)
        assert config_from_dict(config_to_dict(cfg)) == cfg


class TestCrossValidate:
    def test_report_structure_and_partition(self):
        cfg = desk_cfg(total_epochs=1, folds=2)
        cases = small_cases(6)
        report = cross_validate(cases, cfg)
        assert len(report["folds"]) == 2
        seen = [c for f in report["folds"] for c in f["val_cases"]]
        assert sorted(seen) == sorted(c.case_id for c in cases)
        assert 0.0 <= report["mean_dice"] <= 1.0
        assert len(report["loss_table"]) == 2  # one epoch per fold

    def test_too_few_cases(self):
        cfg = desk_cfg(folds=8)
        with pytest.raises(ValueError):
            cross_validate(small_cases(4), cfg)
