"""Unit tests for the two-stage trainer: Adam, train_step, density
control, the orchestration loop, and checkpointing."""

import json
import os

import numpy as np
import pytest

from bodysplat.body import Pose, lbs_pose
from bodysplat.data import FrameSample, load_frame
from bodysplat.deform import deform_avatar
from bodysplat.losses import LossWeights
from bodysplat.raster import make_lookat_camera, render
from bodysplat.rcn import rcn_forward
from bodysplat.train import (
    Adam,
    TrainConfig,
    config_hash,
    density_control,
    init_state,
    load_checkpoint,
    run_training,
    save_checkpoint,
    start_stage2,
    train_step,
)

PARAM_FIELDS = ("bary", "offset", "scale", "rot", "opacity", "sh")


def tiny_config(**kw):
    """A fast config for unit-level trainer tests."""
    base = dict(stage1_iters=4, stage2_iters=2, seed=0, n_splats=20,
                splat_budget=30, joint_radius=0.05, prune_interval=0,
                eval_interval=0)
    base.update(kw)
    return TrainConfig(**base)


def away_facing_frame(bundle, size=16):
    """A frame whose camera looks away from the body: everything culls."""
    cam = make_lookat_camera(
        eye=np.array([0.0, 0.0, 5.0]), target=np.array([0.0, 0.0, 10.0]),
        fx=30.0, fy=30.0, cx=(size - 1) / 2.0, cy=(size - 1) / 2.0,
        width=size, height=size)
    return FrameSample(frame_id=0,
                       image=np.zeros((size, size, 3)),
                       mask=np.ones((size, size), dtype=bool),
                       pose=Pose.rest(bundle), camera=cam)


class TestTrainConfig:
    """Hyperparameter defaults and validation."""

    def test_default_values(self):
        """Published defaults for iteration counts, Adam, and pruning."""
        cfg = TrainConfig()
        assert cfg.stage1_iters == 30000
        assert cfg.stage2_iters == 10000
        assert cfg.learning_rate == 5e-4
        assert (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) == \
            (0.9, 0.999, 1e-8)
        assert cfg.prune_opacity == 0.005
        assert cfg.prune_interval == 500
        assert cfg.stabilization_window == 2000
        assert cfg.stabilization_tolerance == 0.01
        assert cfg.splat_budget == 30000
        assert cfg.initial_splats == 30000

    @pytest.mark.parametrize("kw", [
        {"stage1_iters": -1},
        {"stage2_iters": -5},
        {"learning_rate": 0.0},
        {"adam_beta1": -0.1},
        {"splat_budget": 0},
    ])
    def test_invalid_values_rejected(self, kw):
        """Negative iteration counts and non-positive rates fail."""
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_dict_round_trip(self):
        """to_dict/from_dict reproduces the config and its hash."""
        cfg = tiny_config(learning_rate=1e-3)
        back = TrainConfig.from_dict(cfg.to_dict())
        assert back == cfg
        assert config_hash(back) == config_hash(cfg)
        assert config_hash(back) != config_hash(tiny_config(seed=7))


class TestAdam:
    """The from-scratch Adam optimizer."""

    def test_first_step_is_signed_learning_rate(self):
        """Bias correction makes step one move by lr * sign(grad)."""
        params = {"x": np.array([1.0, 1.0])}
        opt = Adam(params, lr=0.01)
        opt.step(params, {"x": np.array([0.5, -2.0])})
        np.testing.assert_allclose(params["x"], [1.0 - 0.01, 1.0 + 0.01],
                                   atol=1e-9)

    def test_lr_scale_multiplies_step(self):
        """A per-tensor multiplier rescales that tensor's update."""
        params = {"a": np.array([0.0]), "b": np.array([0.0])}
        opt = Adam(params, lr=0.01, lr_scale={"a": 0.1})
        opt.step(params, {"a": np.array([1.0]), "b": np.array([1.0])})
        np.testing.assert_allclose(params["a"][0], 0.1 * params["b"][0],
                                   rtol=1e-12)

    def test_quadratic_convergence(self):
        """Minimizing (x - 3)^2 walks x to the minimum."""
        params = {"x": np.array([0.0])}
        opt = Adam(params, lr=0.1)
        for _ in range(200):
            grad = 2.0 * (params["x"] - 3.0)
            opt.step(params, {"x": grad})
        assert abs(params["x"][0] - 3.0) < 0.2

    def test_select_rows_keeps_moments(self):
        """Row pruning drops the matching optimizer state rows."""
        params = {"x": np.arange(4, dtype=np.float64)}
        opt = Adam(params, lr=0.1)
        opt.step(params, {"x": np.array([1.0, 2.0, 3.0, 4.0])})
        m_before = opt.m["x"].copy()
        opt.select_rows(np.array([0, 2]))
        np.testing.assert_array_equal(opt.m["x"], m_before[[0, 2]])
        assert opt.v["x"].shape == (2,)


class TestTrainStep:
    """Single-iteration behavior."""

    def test_zero_loss_leaves_parameters_fixed(self, bundle):
        """A frame the render already matches moves nothing."""
        state = init_state(bundle, tiny_config())
        state.model.scale[:] = 0.004     # under every scale threshold
        frame = away_facing_frame(bundle)
        before = {n: getattr(state.model, n).copy() for n in PARAM_FIELDS}
        state, report = train_step(state, frame)
        assert report.total == 0.0
        for name in PARAM_FIELDS:
            drift = np.abs(getattr(state.model, name) - before[name]).max()
            assert drift < 1e-7, name

    def test_loss_decreases_on_reachable_target(self, bundle, dataset):
        """A brightened copy of the model's own render is descended on."""
        cfg = tiny_config(n_splats=8, joint_radius=1e-9,
                          weights=LossWeights(l1=0.0, mse=1.0, perceptual=0.0,
                                              scaling=0.0, joint=0.0,
                                              normal=0.0, rcn=0.0))
        state = init_state(bundle, cfg)
        state.model.scale[:] = 0.05
        state.model.opacity[:] = 0.6
        cam = dataset.manifest.camera
        posed = lbs_pose(bundle, Pose.rest(bundle))
        batch, _ = deform_avatar(state.model, posed)
        out = render(batch, cam)
        assert out.alpha.max() > 0.5
        bump = 0.15 * (out.alpha[..., None] > 0.3)
        target = np.clip(out.color + bump, 0.0, 0.95)
        frame = FrameSample(frame_id=0, image=target,
                            mask=np.ones(out.alpha.shape, dtype=bool),
                            pose=Pose.rest(bundle), camera=cam)
        totals = []
        for _ in range(50):
            state, report = train_step(state, frame)
            totals.append(report.total)
        assert all(b < a for a, b in zip(totals, totals[1:]))
        assert totals[-1] < totals[0]

    def test_identical_seeds_identical_reports(self, bundle, dataset):
        """Two states with one seed emit bit-identical loss streams."""
        frames = [load_frame(dataset.manifest, fid)
                  for fid in dataset.manifest.train_ids]
        streams = []
        for _ in range(2):
            state = init_state(bundle, tiny_config())
            reports = []
            for k in range(5):
                state, report = train_step(state, frames[k % len(frames)])
                reports.append(report.to_dict())
            streams.append((reports, state))
        assert streams[0][0] == streams[1][0]
        for name in PARAM_FIELDS:
            np.testing.assert_array_equal(
                getattr(streams[0][1].model, name),
                getattr(streams[1][1].model, name))

    def test_non_finite_loss_aborts_with_diagnostics(self, bundle, tmp_path):
        """A poisoned target makes the step abort and dump a report."""
        state = init_state(bundle, tiny_config(), out_dir=str(tmp_path))
        frame = away_facing_frame(bundle)
        frame.image[0, 0, 0] = np.inf
        with pytest.raises(RuntimeError, match="non-finite"):
            train_step(state, frame)
        dumps = [n for n in os.listdir(tmp_path) if n.startswith("diag")]
        assert len(dumps) == 1
        blob = json.load(open(tmp_path / dumps[0]))
        assert blob["iteration"] == 0 and "losses" in blob

    def test_stage1_never_touches_rcn(self, bundle, dataset):
        """Stage 1 has no correction network at all."""
        state = init_state(bundle, tiny_config())
        frame = load_frame(dataset.manifest, 0)
        for _ in range(3):
            state, _ = train_step(state, frame)
        assert state.stage == 1
        assert state.rcn is None and state.opt_rcn is None


class TestDensityControl:
    """Opacity pruning and the stabilization flag."""

    def test_no_violators_keeps_count(self, bundle):
        """All opacities above threshold: nothing is removed."""
        state = init_state(bundle, tiny_config())
        state.model.opacity[:] = 0.5
        n = state.model.count
        state = density_control(state)
        assert state.model.count == n

    def test_transparent_splat_removed(self, bundle):
        """One alpha = 0.001 splat off the joint set is pruned."""
        state = init_state(bundle, tiny_config())
        state.model.opacity[:] = 0.5
        hosted = state.joint_set.mask[state.model.face]
        victim = int(np.flatnonzero(~hosted)[0])
        state.model.opacity[victim] = 0.001
        faces_before = state.model.face.copy()
        n = state.model.count
        state = density_control(state)
        assert state.model.count == n - 1
        np.testing.assert_array_equal(state.model.face,
                                      np.delete(faces_before, victim))
        assert state.opt.m["sh"].shape[0] == n - 1

    def test_joint_faces_keep_brightest_member(self, bundle, rng):
        """Pruning everything still leaves one splat per joint face."""
        state = init_state(bundle, tiny_config())
        state.model.opacity[:] = rng.uniform(1e-4, 0.004,
                                             size=state.model.count)
        hosted = state.joint_set.mask[state.model.face]
        expect_faces = np.unique(state.model.face[hosted])
        expect_alpha = {
            int(f): state.model.opacity[state.model.face == f].max()
            for f in expect_faces}
        state = density_control(state)
        assert state.model.count == len(expect_faces)
        np.testing.assert_array_equal(np.sort(state.model.face), expect_faces)
        assert state.joint_set.mask[state.model.face].all()
        for f, a in zip(state.model.face, state.model.opacity):
            assert a == expect_alpha[int(f)]

    def test_stabilization_flag(self, bundle):
        """Flat count over the window sets the flag; motion does not."""
        cfg = tiny_config(stabilization_window=10)
        state = init_state(bundle, cfg)
        state.model.opacity[:] = 0.5
        n = state.model.count
        state.iteration = 5                       # window not yet spanned
        state = density_control(state)
        assert not state.stabilized
        state.iteration = 10
        state.count_history = [[0, n]]
        state = density_control(state)
        assert state.stabilized
        fresh = init_state(bundle, cfg)
        fresh.model.opacity[:] = 0.5
        fresh.iteration = 10
        fresh.count_history = [[0, 4 * fresh.model.count]]
        fresh = density_control(fresh)
        assert not fresh.stabilized

    def test_inactive_in_stage2(self, bundle):
        """Stage 2 never prunes, whatever the opacities say."""
        state = init_state(bundle, tiny_config())
        start_stage2(state)
        state.model.opacity[:] = 1e-4
        n = state.model.count
        history = [list(x) for x in state.count_history]
        state = density_control(state)
        assert state.model.count == n
        assert state.count_history == history


class TestStageTransition:
    """Stage 2 startup must not change what the model renders."""

    def test_identity_rcn_preserves_renders(self, bundle, dataset):
        """First stage-2 render equals the last stage-1 render."""
        state = init_state(bundle, tiny_config())
        frame = load_frame(dataset.manifest, 1)
        for _ in range(3):
            state, _ = train_step(state, frame)
        posed = lbs_pose(bundle, frame.pose)
        batch1, _ = deform_avatar(state.model, posed)
        out1 = render(batch1, frame.camera)
        start_stage2(state)
        comp, _ = rcn_forward(state.rcn, state.model.face, state.model.bary,
                              state.model.offset, state.model.rot,
                              frame.pose.theta.ravel())
        batch2, _ = deform_avatar(state.model, posed, comp)
        out2 = render(batch2, frame.camera)
        np.testing.assert_allclose(out2.color, out1.color, atol=1e-6)
        np.testing.assert_allclose(out2.alpha, out1.alpha, atol=1e-6)

    def test_stage2_updates_rcn_parameters(self, bundle, dataset):
        """Stage-2 steps move the network away from identity."""
        state = init_state(bundle, tiny_config())
        start_stage2(state)
        frame = load_frame(dataset.manifest, 2)
        dec = state.rcn.dec_w2.copy()
        for _ in range(3):
            state, report = train_step(state, frame)
        assert "rcn" in report.to_dict()
        assert np.abs(state.rcn.dec_w2 - dec).max() > 0.0


class TestRunTraining:
    """The orchestration loop and its artifacts."""

    def test_zero_iterations_initial_checkpoint(self, bundle, dataset,
                                                tmp_path):
        """No steps: the checkpoint is the freshly initialized state."""
        cfg = tiny_config(stage1_iters=0, stage2_iters=0)
        state = run_training(bundle, dataset.manifest, cfg, str(tmp_path))
        assert state.iteration == 0 and state.stage == 1
        log = open(tmp_path / "train_log.jsonl").read()
        assert log == ""
        loaded = load_checkpoint(str(tmp_path / "checkpoint"), bundle)
        assert loaded.iteration == 0 and loaded.stage == 1
        assert loaded.rcn is None
        assert loaded.model.count == cfg.initial_splats
        fresh = init_state(bundle, cfg)
        np.testing.assert_allclose(loaded.model.sh, fresh.model.sh,
                                   rtol=1e-6, atol=1e-7)

    def test_smoke_run_artifacts(self, bundle, dataset, tmp_path):
        """A 10-iteration run logs, evaluates, prunes, and checkpoints."""
        cfg = tiny_config(stage1_iters=6, stage2_iters=4, prune_interval=3,
                          eval_interval=5)
        state = run_training(bundle, dataset.manifest, cfg, str(tmp_path))
        assert state.iteration == 10
        assert state.stage == 2 and state.rcn is not None
        assert state.model.count <= cfg.splat_budget

        lines = [json.loads(l) for l in
                 open(tmp_path / "train_log.jsonl", encoding="utf-8")]
        assert len(lines) == 10
        assert [e["iteration"] for e in lines] == list(range(1, 11))
        assert [e["stage"] for e in lines] == [1] * 6 + [2] * 4
        for e in lines:
            assert e["frame"] in dataset.manifest.train_ids
            assert {"total", "l1", "mse", "splats", "stabilized"} <= set(e)
        assert [("psnr_eval" in e) for e in lines] == \
            [False] * 4 + [True] + [False] * 4 + [True]
        stage2_counts = {e["splats"] for e in lines[6:]}
        assert len(stage2_counts) == 1

        ckpt = tmp_path / "checkpoint"
        for rel in ("checkpoint.json", "optimizer.bin", "avatar/avatar.json",
                    "avatar/avatar.bin", "rcn/rcn.json", "rcn/rcn.bin"):
            assert (ckpt / rel).is_file(), rel

    def test_runs_are_byte_identical(self, bundle, dataset, tmp_path):
        """Same seed/config/dataset: logs and checkpoints match exactly."""
        cfg = tiny_config(stage1_iters=4, stage2_iters=2, eval_interval=3)
        run_training(bundle, dataset.manifest, cfg, str(tmp_path / "a"))
        run_training(bundle, dataset.manifest, cfg, str(tmp_path / "b"))
        rels = ["train_log.jsonl", "checkpoint/checkpoint.json",
                "checkpoint/optimizer.bin", "checkpoint/avatar/avatar.json",
                "checkpoint/avatar/avatar.bin", "checkpoint/rcn/rcn.json",
                "checkpoint/rcn/rcn.bin"]
        for rel in rels:
            a = open(tmp_path / "a" / rel, "rb").read()
            b = open(tmp_path / "b" / rel, "rb").read()
            assert a == b, rel


class TestCheckpoint:
    """Round trips and corruption handling."""

    def make_trained(self, bundle, dataset, out_dir, stage2=True):
        cfg = tiny_config(stage1_iters=2, stage2_iters=2 if stage2 else 0)
        return run_training(bundle, dataset.manifest, cfg, out_dir), cfg

    def test_save_load_save_byte_identical(self, bundle, dataset, tmp_path):
        """Reserializing a loaded checkpoint changes no bytes."""
        state, _ = self.make_trained(bundle, dataset, str(tmp_path / "run"))
        first = str(tmp_path / "run" / "checkpoint")
        loaded = load_checkpoint(first, bundle)
        second = str(tmp_path / "again")
        save_checkpoint(loaded, second)
        for base, _, names in os.walk(first):
            for name in names:
                rel = os.path.relpath(os.path.join(base, name), first)
                a = open(os.path.join(first, rel), "rb").read()
                b = open(os.path.join(second, rel), "rb").read()
                assert a == b, rel

    def test_counters_and_rng_restored(self, bundle, dataset, tmp_path):
        """Iteration, stage, flags and the RNG stream survive the trip."""
        state, cfg = self.make_trained(bundle, dataset, str(tmp_path / "run"))
        loaded = load_checkpoint(str(tmp_path / "run" / "checkpoint"), bundle)
        assert loaded.iteration == state.iteration == 4
        assert loaded.stage == state.stage == 2
        assert loaded.stabilized == state.stabilized
        assert loaded.config == cfg
        assert loaded.opt.t == state.opt.t
        np.testing.assert_array_equal(loaded.rng.integers(1 << 30, size=8),
                                      state.rng.integers(1 << 30, size=8))
        np.testing.assert_allclose(loaded.model.rot, state.model.rot,
                                   rtol=1e-6, atol=1e-7)
        np.testing.assert_allclose(loaded.opt.m["sh"], state.opt.m["sh"],
                                   rtol=1e-6, atol=1e-9)

    def test_version_mismatch_rejected(self, bundle, dataset, tmp_path):
        """A future version number refuses to load."""
        self.make_trained(bundle, dataset, str(tmp_path / "run"),
                          stage2=False)
        ckpt = tmp_path / "run" / "checkpoint"
        meta = json.load(open(ckpt / "checkpoint.json"))
        meta["version"] = 999
        json.dump(meta, open(ckpt / "checkpoint.json", "w"))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(str(ckpt), bundle)

    def test_truncated_optimizer_rejected(self, bundle, dataset, tmp_path):
        """A short optimizer blob fails the length check."""
        self.make_trained(bundle, dataset, str(tmp_path / "run"),
                          stage2=False)
        ckpt = tmp_path / "run" / "checkpoint"
        blob = open(ckpt / "optimizer.bin", "rb").read()
        open(ckpt / "optimizer.bin", "wb").write(blob[:-16])
        with pytest.raises(ValueError):
            load_checkpoint(str(ckpt), bundle)
