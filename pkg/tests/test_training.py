"""Soft labels, losses, the AdamW update, checkpoints, and a short
end-to-end training smoke run."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raydepth import autodiff as ad
from raydepth import training as tr
from raydepth.autodiff import Tensor
from raydepth.config import LossConfig, OptimizerConfig, RunConfig, PlanesConfig
from raydepth.cost_volume import RGBImage, SparseDepthMap
from raydepth.errors import CheckpointError, EmptySupervisionError, TrainingError
from raydepth.geometry import make_planes
from raydepth.regression import DepthMap, ProbabilityVolume

PLANES = make_planes(4, 1.0, 4.0)


def sparse(depth, valid):
    depth = np.asarray(depth, dtype=np.float64)
    return SparseDepthMap(depth.shape[1], depth.shape[0], depth, np.asarray(valid, bool))


class TestSoftLabel:
    def test_exact_plane_hit_is_one_hot(self):
        np.testing.assert_array_equal(tr.soft_label(2.0, PLANES), [0, 1, 0, 0])

    def test_midpoint_splits_evenly(self):
        label = tr.soft_label(2.5, PLANES)
        np.testing.assert_allclose(label, [0, 0.5, 0.5, 0])
        np.testing.assert_allclose(label @ PLANES.depths, 2.5, atol=1e-12)

    def test_quarter_split(self):
        label = tr.soft_label(1.25, PLANES)
        np.testing.assert_allclose(label, [0.75, 0.25, 0, 0])
        np.testing.assert_allclose(label @ PLANES.depths, 1.25, atol=1e-12)

    def test_out_of_range_clamps_with_warning(self):
        with pytest.warns(UserWarning):
            label = tr.soft_label(9.0, PLANES)
        np.testing.assert_array_equal(label, [0, 0, 0, 1])
        with pytest.warns(UserWarning):
            label = tr.soft_label(0.1, PLANES)
        np.testing.assert_array_equal(label, [1, 0, 0, 0])

    @given(st.floats(min_value=1.0, max_value=4.0))
    @settings(max_examples=200, deadline=None)
    def test_expectation_identity_and_support(self, gt):
        label = tr.soft_label(gt, PLANES)
        assert abs(label @ PLANES.depths - gt) < 1e-9
        assert abs(label.sum() - 1.0) < 1e-12
        assert (label > 0).sum() <= 2


class TestLosses:
    def test_l1_zero_on_exact_match(self):
        gt = sparse([[2.0, 3.0]], [[True, True]])
        pred = DepthMap(2, 1, Tensor([[2.0, 3.0]]))
        assert tr.l1_loss(pred, gt).item() == 0.0

    def test_l1_single_pixel(self):
        gt = sparse([[1.0, 5.0]], [[True, False]])
        pred = DepthMap(2, 1, Tensor([[2.0, 100.0]]))
        assert tr.l1_loss(pred, gt).item() == 1.0

    def test_l1_mean_oracle(self):
        gt = sparse([[1.0, 1.0]], [[True, True]])
        pred = DepthMap(2, 1, Tensor([[2.0, 4.0]]))
        assert tr.l1_loss(pred, gt).item() == 2.0

    def test_l2_mean_square_oracle(self):
        gt = sparse([[1.0, 1.0]], [[True, True]])
        pred = DepthMap(2, 1, Tensor([[2.0, 4.0]]))
        assert tr.l2_loss(pred, gt).item() == 5.0

    def test_losses_ignore_invalid_pixels(self):
        gt_a = sparse([[2.0, 7.7]], [[True, False]])
        gt_b = sparse([[2.0, 1.1]], [[True, False]])
        pred = DepthMap(2, 1, Tensor([[2.5, 3.0]]))
        assert tr.l1_loss(pred, gt_a).item() == tr.l1_loss(pred, gt_b).item()

    def test_empty_supervision_rejected(self):
        gt = sparse([[1.0]], [[False]])
        pred = DepthMap(1, 1, Tensor([[2.0]]))
        with pytest.raises(EmptySupervisionError):
            tr.l1_loss(pred, gt)

    def _prob(self, p):
        arr = np.asarray(p, dtype=np.float64).reshape(-1, 1, 1)
        return ProbabilityVolume(PLANES, Tensor(arr))

    def test_ce_zero_at_matching_one_hot(self):
        gt = sparse([[2.0]], [[True]])
        prob = self._prob([1e-12, 1.0 - 3e-12, 1e-12, 1e-12])
        assert tr.ce_loss(prob, gt, PLANES).item() < 1e-9

    def test_ce_uniform_against_one_hot_is_log4(self):
        gt = sparse([[2.0]], [[True]])
        prob = self._prob([0.25, 0.25, 0.25, 0.25])
        np.testing.assert_allclose(tr.ce_loss(prob, gt, PLANES).item(), np.log(4.0), atol=1e-9)

    def test_ce_soft_label_floor_is_label_entropy(self):
        gt = sparse([[2.5]], [[True]])  # label (0, .5, .5, 0)
        prob = self._prob([0.0, 0.5, 0.5, 0.0])
        np.testing.assert_allclose(tr.ce_loss(prob, gt, PLANES).item(), np.log(2.0), atol=1e-9)

    @given(st.integers(min_value=0, max_value=10**6))
    @settings(max_examples=100, deadline=None)
    def test_gibbs_inequality(self, seed):
        rng = np.random.default_rng(seed)
        gt_depth = rng.uniform(1.0, 4.0)
        label = tr.soft_label(gt_depth, PLANES)
        p = rng.dirichlet(np.ones(4))
        gt = sparse([[gt_depth]], [[True]])
        ce = tr.ce_loss(self._prob(p), gt, PLANES).item()
        entropy = -np.sum(label[label > 0] * np.log(label[label > 0]))
        assert ce >= entropy - 1e-9

    def test_total_loss_sums_enabled_terms(self):
        parts = {"l1": Tensor(0.25), "l2": Tensor(5.0), "ce": Tensor(0.5)}
        cfg = LossConfig(use_l1=True, use_l2=False, use_ce=True)
        assert tr.total_loss(cfg, parts).item() == 0.75
        cfg = LossConfig(use_l1=True, use_l2=False, use_ce=False)
        assert tr.total_loss(cfg, parts).item() == 0.25
        cfg = LossConfig(use_l1=True, use_l2=True, use_ce=True)
        assert tr.total_loss(cfg, parts).item() == 5.75

    def test_total_loss_missing_component(self):
        with pytest.raises(TrainingError):
            tr.total_loss(LossConfig(use_l1=True), {"ce": Tensor(1.0)})


class TestOptimizer:
    def _single(self, value, lr=1e-3, wd=0.0):
        params = ad.ParameterStore()
        params.add("w", [value])
        state = tr.init_optimizer(params, OptimizerConfig(learning_rate=lr, weight_decay=wd))
        return params, state

    def test_zero_gradient_no_decay_keeps_parameters(self):
        params, state = self._single(1.5)
        params["w"].grad = np.zeros(1)
        tr.optimizer_step(params, state)
        np.testing.assert_array_equal(params["w"].data, [1.5])

    def test_first_step_moves_by_learning_rate(self):
        # closed-form single step: bias correction makes the update lr * sign(g)
        params, state = self._single(0.0)
        params["w"].grad = np.ones(1)
        tr.optimizer_step(params, state)
        np.testing.assert_allclose(params["w"].data, [-1e-3], rtol=1e-7)

    def test_decoupled_decay_formula(self):
        params, state = self._single(2.0, lr=1e-3, wd=1e-4)
        params["w"].grad = np.zeros(1)
        tr.optimizer_step(params, state)
        np.testing.assert_allclose(params["w"].data, [2.0 * (1.0 - 1e-7)], rtol=1e-15)

    def test_missing_gradient_names_parameter(self):
        params, state = self._single(1.0)
        with pytest.raises(TrainingError, match="'w'"):
            tr.optimizer_step(params, state)

    def test_milestones_halve_learning_rate(self):
        params, state = self._single(0.0)
        state = tr.init_optimizer(
            params, OptimizerConfig(learning_rate=1.0, weight_decay=0.0, milestones=(2,))
        )
        params["w"].grad = np.ones(1)
        tr.optimizer_step(params, state)
        assert state.learning_rate == 1.0
        params["w"].grad = np.ones(1)
        tr.optimizer_step(params, state)
        assert state.learning_rate == 0.5

    def test_converges_on_quadratic(self):
        params = ad.ParameterStore()
        params.add("w", [4.0])
        state = tr.init_optimizer(params, OptimizerConfig(learning_rate=0.1, weight_decay=0.0))
        for _ in range(200):
            params.zero_grad()
            loss = (params["w"] * params["w"]).sum()
            loss.backward()
            tr.optimizer_step(params, state)
        assert abs(params["w"].data[0]) < 0.05


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        params = ad.ParameterStore()
        params.add("a.weight", rng.normal(size=(3, 4)))
        params.add("a.bias", rng.normal(size=4))
        params.add("b", rng.normal(size=(2, 2, 2)))
        path = tmp_path / "ck.bin"
        tr.save_checkpoint(path, params)
        loaded = tr.load_checkpoint(path)
        assert loaded.paths() == params.paths()
        for p in params.paths():
            np.testing.assert_array_equal(loaded[p].data, params[p].data)

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(CheckpointError):
            tr.load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        params = ad.ParameterStore()
        params.add("w", np.ones((4, 4)))
        path = tmp_path / "ck.bin"
        tr.save_checkpoint(path, params)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            tr.load_checkpoint(path)

    def test_mismatch_lists_names(self, tmp_path):
        a = ad.ParameterStore()
        a.add("present", np.ones(2))
        b = ad.ParameterStore()
        b.add("other", np.ones(2))
        with pytest.raises(CheckpointError, match="present.*other"):
            tr.check_same_parameters(a, b)


def tiny_config():
    return RunConfig(
        planes=PlanesConfig(count=4, d_min=1.0, d_max=5.0),
        channels=4,
        image_channels=(1, 1, 1),
        downscale=4,
        refine_iterations=2,
        refine_channels=2,
        optimizer=OptimizerConfig(learning_rate=3e-3, weight_decay=1e-4, epochs=2),
    )


def tiny_frames(cfg, n_frames=2, size=(16, 16), seed=0):
    from raydepth import synth

    w, h = size
    spec, K = synth.default_scene(seed, width=w, height=h, frame_count=n_frames, step=0.03)
    frames, gts = [], []
    for t in range(n_frames):
        img, dense, pose = synth.render_frame(spec, t, K)
        frames.append((img, synth.sample_sparse(dense, 8, seed + 100 + t), pose))
        gts.append(dense)
    return frames, gts, K


class TestTrainSequence:
    def test_zero_epochs_keeps_parameters(self):
        from raydepth.pipeline import init_parameters

        cfg = tiny_config()
        frames, gts, K = tiny_frames(cfg, n_frames=1)
        params = init_parameters(cfg, seed=0)
        before = {p: params[p].data.copy() for p in params.paths()}
        state = tr.init_optimizer(params, cfg.optimizer)
        params, trace = tr.train_sequence(frames, gts, K, params, state, cfg, epochs=0)
        assert trace.epoch_means == []
        for p in params.paths():
            np.testing.assert_array_equal(params[p].data, before[p])

    def test_trace_length_matches_epochs(self):
        from raydepth.pipeline import init_parameters

        cfg = tiny_config()
        frames, gts, K = tiny_frames(cfg)
        params = init_parameters(cfg, seed=0)
        state = tr.init_optimizer(params, cfg.optimizer)
        params, trace = tr.train_sequence(frames, gts, K, params, state, cfg, epochs=3)
        assert len(trace.epoch_means) == 3
        assert len(trace.rows) == 3 * len(frames)
        assert np.isfinite(trace.epoch_means).all()

    def test_loss_decreases_with_training(self):
        from raydepth.pipeline import init_parameters

        cfg = tiny_config()
        frames, gts, K = tiny_frames(cfg, n_frames=1)
        params = init_parameters(cfg, seed=0)
        state = tr.init_optimizer(params, cfg.optimizer)
        params, trace = tr.train_sequence(frames, gts, K, params, state, cfg, epochs=30)
        assert trace.epoch_means[-1] < trace.epoch_means[0]

    def test_loss_trace_csv(self, tmp_path):
        trace = tr.LossTrace(rows=[(0, 0, 0.5, 0.25, 0.75)], epoch_means=[0.75])
        path = tmp_path / "trace.csv"
        tr.write_loss_trace(path, trace)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,frame,l1,ce,total"
        assert lines[1] == "0,0,0.5,0.25,0.75"
