import os

import pytest
import torch

import trainer as trainer_module
from dataio import EmptyDatasetError, SequenceManifest, generate_orbit_dataset
from nets import GROUPS_3D, ParamSet, VoxelRepNet, read_checkpoint
from trainer import (CHECKPOINT_DIR, CONFIG_SNAPSHOT, LOG_NAME, META_NAME, TrainLog, Trainer, cell_id,
                     run_ablation, run_seeds)
from worldsim import ManipulationEnv


def fresh_params(config, groups):
    torch.manual_seed(config.seed)
    return ParamSet.from_model(VoxelRepNet(config), groups)


def make_env(config):
    return ManipulationEnv(config.task, config.phi, config.image_size, seed=config.seed)


# ---- TrainLog ----------------------------------------------------------------

def test_log_rejects_decreasing_steps():
    log = TrainLog()
    log.add(3, "a", 1.0)
    log.add(3, "b", 2.0)
    with pytest.raises(ValueError):
        log.add(2, "a", 0.0)


def test_log_file_round_trip(tmp_path):
    log = TrainLog(meta={"config": {"task": "push"}})
    log.add(1, "critic_loss", 0.5)
    log.add(2, "success_rate", 0.25)
    log.add(2, "critic_loss", 0.125)
    log.save_to_file(str(tmp_path))
    loaded = TrainLog.load_from_file(str(tmp_path / LOG_NAME))
    assert loaded.records == log.records
    assert loaded.meta["config"] == {"task": "push"}
    assert loaded.meta["version"] == "2.0"
    steps, values = loaded.series("critic_loss")
    assert steps.tolist() == [1, 2] and values.tolist() == [0.5, 0.125]
    assert loaded.last("success_rate") == 0.25


def test_log_load_names_bad_line(tmp_path):
    path = tmp_path / LOG_NAME
    path.write_text("step,metric,value\n1,a,0.5\n2,a\n")
    with pytest.raises(ValueError, match="line 3"):
        TrainLog.load_from_file(str(path))


# ---- pretraining -------------------------------------------------------------

def test_pretrain_without_steps_returns_initialization(qapp, tiny_config, orbit_dataset):
    _, manifests = orbit_dataset
    config = tiny_config.copy(pretrain_steps=0)
    params = Trainer(config).pretrain(manifests)
    assert params.digest() == fresh_params(config, GROUPS_3D).digest()


def test_pretrain_needs_pairs(qapp, tiny_config):
    with pytest.raises(EmptyDatasetError):
        Trainer(tiny_config).pretrain([])
    with pytest.raises(EmptyDatasetError):
        Trainer(tiny_config).pretrain([SequenceManifest("s", "c", ["a.png"])])


def test_pretrain_logs_and_writes_run_files(qapp, tiny_config, orbit_dataset, tmp_path):
    _, manifests = orbit_dataset
    run_dir = str(tmp_path / "run")
    trainer = Trainer(tiny_config, run_dir=run_dir)
    params = trainer.pretrain(manifests)
    assert params.all_finite()
    assert params.digest() != fresh_params(tiny_config, GROUPS_3D).digest()
    steps, _ = trainer.log.series("pretrain_recon_loss")
    assert steps.tolist() == [1, 2, 3]
    for name in (LOG_NAME, META_NAME, CONFIG_SNAPSHOT):
        assert os.path.isfile(os.path.join(run_dir, name))
    assert os.path.isfile(os.path.join(run_dir, CHECKPOINT_DIR, "pretrain_final.pt"))


def test_status_signal_carries_messages(qapp, tiny_config):
    trainer = Trainer(tiny_config)
    seen = []
    trainer.status_signal.connect(seen.append)
    trainer.log_status("hello")
    assert seen == ["[Trainer] hello"]


# ---- joint training ------------------------------------------------------------

def test_3d_learning_rate_is_scaled_rl_rate(qapp, tiny_config):
    config = tiny_config.copy(lambda_ft=0.1, lr_rl=2e-3)
    trainer = Trainer(config)
    trainer._setup_joint(None)
    assert trainer.optimizer_3d.param_groups[0]["lr"] == pytest.approx(2e-4)


def test_joint_train_rejects_mismatched_env(qapp, tiny_config):
    with pytest.raises(ValueError):
        Trainer(tiny_config).joint_train(ManipulationEnv("push", image_size=8))


def test_joint_train_rejects_foreign_init(qapp, tiny_config):
    other = tiny_config.copy(enc_channels=8)
    with pytest.raises(ValueError):
        Trainer(tiny_config).joint_train(make_env(tiny_config), init_params=fresh_params(other, GROUPS_3D))


def test_joint_train_logs_updates(qapp, tiny_config):
    params, log = Trainer(tiny_config).joint_train(make_env(tiny_config))
    assert params.all_finite()
    steps, values = log.series("critic_loss")
    assert len(steps) > 0 and steps.min() >= tiny_config.seed_steps
    assert len(log.series("recon_loss")[0]) == len(steps)


def test_frozen_encoder_does_not_move(qapp, tiny_config):
    config = tiny_config.copy(freeze_encoder=True)
    params, _ = Trainer(config).joint_train(make_env(config))
    trained = ParamSet({k: v for k, v in params.tensors.items() if k.startswith("encoder.")}, ("encoder",))
    assert trained.digest() == fresh_params(config, ("encoder",)).digest()


def test_rl_disabled_leaves_policy_heads_alone(qapp, tiny_config):
    config = tiny_config.copy(rl_enabled=False)
    params, log = Trainer(config).joint_train(make_env(config))
    heads = ParamSet({k: v for k, v in params.tensors.items() if k.split(".")[0] in ("actor", "critic")},
                     ("actor", "critic"))
    assert heads.digest() == fresh_params(config, ("actor", "critic")).digest()
    assert len(log.series("critic_loss")[0]) == 0
    assert len(log.series("recon_loss")[0]) > 0


def test_no_finetune_leaves_3d_heads_alone(qapp, tiny_config):
    config = tiny_config.copy(finetune_3d=False)
    params, _ = Trainer(config).joint_train(make_env(config))
    groups = ("lift", "decoder", "posenet")
    heads = ParamSet({k: v for k, v in params.tensors.items() if k.split(".")[0] in groups}, groups)
    assert heads.digest() == fresh_params(config, groups).digest()


def test_zero_lambda_keeps_3d_updates_off_the_encoder(qapp, tiny_config):
    config = tiny_config.copy(lambda_ft=0.0, rl_enabled=False)
    trainer = Trainer(config)
    params, log = trainer.joint_train(make_env(config))
    assert len(log.series("recon_loss")[0]) > 0
    encoder = ParamSet({k: v for k, v in params.tensors.items() if k.startswith("encoder.")}, ("encoder",))
    assert encoder.digest() == fresh_params(config, ("encoder",)).digest()


def test_encoder_is_shared_by_critic_and_3d_updates(qapp, tiny_config):
    trainer = Trainer(tiny_config)
    model = trainer._setup_joint(None)
    encoder_ids = {id(p) for p in model.encoder.parameters()}
    critic_ids = {id(p) for group in trainer.agent.critic_optimizer.param_groups for p in group["params"]}
    recon_ids = {id(p) for group in trainer.optimizer_3d.param_groups for p in group["params"]}
    assert encoder_ids <= critic_ids and encoder_ids <= recon_ids
    assert trainer.agent.model is model
    features = model.encoder(torch.rand(1, 3, 8, 8))
    assert model.critic.trunk.fc.in_features == features.shape[1] == model.lift.feature_channels


def test_joint_train_is_deterministic(qapp, tiny_config):
    a, _ = Trainer(tiny_config).joint_train(make_env(tiny_config))
    b, _ = Trainer(tiny_config).joint_train(make_env(tiny_config))
    assert a.digest() == b.digest()


def test_resume_reproduces_uninterrupted_run(qapp, tiny_config, tmp_path):
    config = tiny_config.copy(checkpoint_every=6)
    full, _ = Trainer(config, run_dir=str(tmp_path / "full")).joint_train(make_env(config))

    checkpoint = os.path.join(str(tmp_path / "full"), CHECKPOINT_DIR, "joint_0000006.pt")
    assert os.path.isfile(checkpoint)
    resumed, _ = Trainer(config, run_dir=str(tmp_path / "resumed")).joint_train(make_env(config), resume=checkpoint)
    assert resumed.digest() == full.digest()


def test_pretrained_init_carries_into_joint_training(qapp, tiny_config, orbit_dataset):
    _, manifests = orbit_dataset
    pre = Trainer(tiny_config).pretrain(manifests)
    config = tiny_config.copy(total_env_steps=1)
    trainer = Trainer(config)
    trainer.joint_train(make_env(config), init_params=pre)
    assert ParamSet.from_model(trainer.model, ("posenet",)).digest() == \
        ParamSet({k: v for k, v in pre.tensors.items() if k.startswith("posenet.")}, ("posenet",)).digest()


# ---- seeds and ablations -------------------------------------------------------

def test_run_seeds_keeps_seed_order(qapp, tiny_config):
    results = run_seeds(tiny_config, [3, 1, 2], lambda cfg: cfg.seed * 10)
    assert list(results.items()) == [(3, 30), (1, 10), (2, 20)]


def test_run_seeds_propagates_failures(qapp, tiny_config):
    def fn(cfg):
        if cfg.seed == 2:
            raise RuntimeError("boom")
        return cfg.seed

    with pytest.raises(RuntimeError, match="boom"):
        run_seeds(tiny_config, [1, 2], fn, parallel=False)


def test_cell_id_format():
    assert cell_id(0.01, True, False, 3) == "lft0.01_pre1_frz0_s3"


def test_ablation_rejects_empty_grid(qapp, tiny_config):
    with pytest.raises(ValueError):
        run_ablation(tiny_config, {})
    with pytest.raises(ValueError):
        run_ablation(tiny_config, {"lambda_ft": []})


def test_ablation_runs_every_cell(qapp, tiny_config):
    grid = {"lambda_ft": [0.0, 0.01], "pretrain_3d": [False], "freeze_encoder": [False], "seeds": [0]}
    logs = run_ablation(tiny_config, grid)
    assert list(logs) == ["lft0_pre0_frz0_s0", "lft0.01_pre0_frz0_s0"]
    assert all(log.meta["cell_id"] == name for name, log in logs.items())


def test_pipelined_mode_trains_and_flags_nondeterminism(qapp, tiny_config):
    config = tiny_config.copy(pipelined=True)
    params, log = Trainer(config).joint_train(make_env(config))
    assert params.all_finite()
    assert log.meta["deterministic"] is False
    assert len(log.series("critic_loss")[0]) > 0


def test_parallel_seeds_match_serial_runs(qapp, tiny_config):
    def losses(cfg):
        _, log = Trainer(cfg).joint_train(make_env(cfg))
        return log.series("critic_loss")[1].tolist()

    serial = run_seeds(tiny_config, [0, 1], losses, parallel=False)
    parallel = run_seeds(tiny_config, [0, 1], losses, parallel=True)
    assert serial == parallel
    assert serial[0] != serial[1]


def test_training_ignores_global_torch_rng(qapp, tiny_config):
    a, _ = Trainer(tiny_config).joint_train(make_env(tiny_config))
    torch.manual_seed(12345)
    torch.rand(1000)
    b, _ = Trainer(tiny_config).joint_train(make_env(tiny_config))
    assert a.digest() == b.digest()


# ---- crash checkpoints -----------------------------------------------------------

class FailingEnv(ManipulationEnv):
    """Raises after the state change of its `fail_at`-th step"""

    def __init__(self, config, fail_at):
        super().__init__(config.task, config.phi, config.image_size, seed=config.seed)
        self.fail_at = fail_at
        self.calls = 0

    def step(self, action):
        result = super().step(action)
        self.calls += 1
        if self.calls == self.fail_at:
            raise RuntimeError("simulator fault")
        return result


def test_joint_crash_checkpoint_sits_on_step_boundary(qapp, tiny_config, tmp_path):
    full, _ = Trainer(tiny_config).joint_train(make_env(tiny_config))

    crashed_dir = str(tmp_path / "crashed")
    with pytest.raises(RuntimeError, match="simulator fault"):
        Trainer(tiny_config, run_dir=crashed_dir).joint_train(FailingEnv(tiny_config, fail_at=8))
    crash = os.path.join(crashed_dir, CHECKPOINT_DIR, "joint_crash.pt")
    assert read_checkpoint(crash)["step"] == 7

    resumed, _ = Trainer(tiny_config, run_dir=str(tmp_path / "resumed")).joint_train(
        make_env(tiny_config), resume=crash)
    assert resumed.digest() == full.digest()


def test_pretrain_crash_checkpoint_resumes_failed_step(qapp, tiny_config, orbit_dataset, tmp_path, monkeypatch):
    _, manifests = orbit_dataset
    full_trainer = Trainer(tiny_config)
    full = full_trainer.pretrain(manifests)

    real = trainer_module.sample_pair_batch
    calls = []

    def flaky(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise OSError("frame store unavailable")
        return real(*args, **kwargs)

    monkeypatch.setattr(trainer_module, "sample_pair_batch", flaky)
    crashed_dir = str(tmp_path / "crashed")
    with pytest.raises(OSError):
        Trainer(tiny_config, run_dir=crashed_dir).pretrain(manifests)
    monkeypatch.undo()
    crash = os.path.join(crashed_dir, CHECKPOINT_DIR, "pretrain_crash.pt")
    assert read_checkpoint(crash)["step"] == 1

    resumed_trainer = Trainer(tiny_config, run_dir=str(tmp_path / "resumed"))
    resumed = resumed_trainer.pretrain(manifests, resume=crash)
    assert resumed.digest() == full.digest()
    steps, values = resumed_trainer.log.series("pretrain_recon_loss")
    _, full_values = full_trainer.log.series("pretrain_recon_loss")
    assert steps.tolist() == [2, 3]
    assert values.tolist() == full_values[1:].tolist()


def test_pretrain_resamples_frames_of_another_size(qapp, tiny_config, tmp_path):
    manifests = generate_orbit_dataset(2, 3, 16, seed=1, out_path=str(tmp_path / "orbits16"))
    params = Trainer(tiny_config).pretrain(manifests)
    assert params.all_finite()
