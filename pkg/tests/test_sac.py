import numpy as np
import pytest
import torch

from Geo_Math import ShapeMismatchError
from nets import VoxelRepNet
from sac import (EmptyBatchError, EntropyTuner, ReplayBuffer, SacAgent, UnderfullBufferError, actor_loss,
                 apply_augment, augment, batch_to_tensors, critic_loss, sample_augment_params, target_update)
from worldsim import DualObservation


def make_obs(value, size=8, phi_d=0.0):
    view = np.full((size, size, 3), value)
    return DualObservation(view, view * 0.5, phi_d, np.array([value, 0.0, 0.0, 1.0], dtype=np.float32))


def fill(buffer, n, start=0):
    for k in range(start, start + n):
        buffer.add(make_obs(k / 100.0), np.zeros(3), float(k), make_obs((k + 1) / 100.0), done=False)


def tensor_batch(config, n=4, seed=0):
    buffer = ReplayBuffer(16, config.image_size, config.action_dim)
    rng = np.random.default_rng(seed)
    for k in range(8):
        buffer.add(make_obs(rng.uniform()), rng.uniform(-1, 1, 3), rng.uniform(-1, 0),
                   make_obs(rng.uniform()), done=(k == 7))
    return batch_to_tensors(buffer.sample(n, rng))


# ---- replay buffer ---------------------------------------------------------

def test_buffer_evicts_oldest():
    buffer = ReplayBuffer(5, 8, 3)
    fill(buffer, 8)
    assert len(buffer) == 5
    assert sorted(buffer.reward.tolist()) == [3.0, 4.0, 5.0, 6.0, 7.0]


def test_buffer_rejects_oversized_request():
    buffer = ReplayBuffer(10, 8, 3)
    fill(buffer, 3)
    with pytest.raises(UnderfullBufferError):
        buffer.sample(4, np.random.default_rng(0))
    with pytest.raises(EmptyBatchError):
        buffer.sample(0, np.random.default_rng(0))


def test_buffer_checks_action_shape():
    buffer = ReplayBuffer(4, 8, 3)
    with pytest.raises(ShapeMismatchError):
        buffer.add(make_obs(0.1), np.zeros(2), 0.0, make_obs(0.2), False)


def test_buffer_sample_contents():
    buffer = ReplayBuffer(8, 8, 3)
    buffer.add(make_obs(0.2, phi_d=12.0), np.array([0.1, -0.2, 0.3]), -0.5, make_obs(0.4), done=True)
    batch = buffer.sample(1, np.random.default_rng(0))
    assert batch["obs"].shape == (1, 8, 8, 3)
    assert batch["obs"][0, 0, 0, 0] == pytest.approx(51 / 255.0)
    assert batch["dynamic"][0, 0, 0, 0] == pytest.approx(26 / 255.0)
    assert batch["not_done"][0] == 0.0
    assert batch["reward"][0] == -0.5
    assert batch["phi_d"][0] == 12.0


def test_recent_sample_stays_in_window():
    buffer = ReplayBuffer(10, 8, 3)
    fill(buffer, 25)
    batch = buffer.sample_recent(200, np.random.default_rng(0), window=3)
    assert set(batch["reward"].tolist()) <= {22.0, 23.0, 24.0}


def test_buffer_file_round_trip(tmp_path):
    buffer = ReplayBuffer(6, 8, 3)
    fill(buffer, 9)
    path = str(tmp_path / "buffer.npz")
    buffer.save_to_file(path)
    restored = ReplayBuffer(6, 8, 3)
    restored.load_from_file(path)
    assert len(restored) == 6 and restored.ptr == buffer.ptr
    assert np.array_equal(restored.static, buffer.static)


# ---- losses ------------------------------------------------------------------

def test_critic_loss_without_discount_is_squared_reward_error(tiny_config):
    config = tiny_config.copy(gamma=0.0)
    torch.manual_seed(0)
    model = VoxelRepNet(config)
    agent = SacAgent(model, config)
    batch = tensor_batch(config)
    loss = critic_loss(batch, model, agent.target, alpha=0.1, gamma=0.0)
    with torch.no_grad():
        q1, q2 = model.critic(model.encoder(batch["obs"]), batch["state"], batch["action"])
        expected = ((q1 - batch["reward"]) ** 2).mean() + ((q2 - batch["reward"]) ** 2).mean()
    assert loss.item() == pytest.approx(expected.item(), rel=1e-5)


def test_critic_loss_trains_encoder_and_critic_only(tiny_config):
    torch.manual_seed(0)
    model = VoxelRepNet(tiny_config)
    agent = SacAgent(model, tiny_config)
    critic_loss(tensor_batch(tiny_config), model, agent.target, 0.1, 0.99).backward()
    assert any(p.grad is not None for p in model.encoder.parameters())
    assert all(p.grad is None for p in model.actor.parameters())
    assert all(p.grad is None for p in agent.target.parameters())


def test_actor_loss_leaves_encoder_untouched(tiny_config):
    torch.manual_seed(0)
    model = VoxelRepNet(tiny_config)
    loss, log_prob = actor_loss(tensor_batch(tiny_config), model, 0.1)
    loss.backward()
    assert log_prob.shape == (4,)
    assert all(p.grad is None for p in model.encoder.parameters())
    assert any(p.grad is not None for p in model.actor.parameters())


def test_losses_reject_empty_batch(tiny_config):
    torch.manual_seed(0)
    model = VoxelRepNet(tiny_config)
    batch = {key: value[:0] for key, value in tensor_batch(tiny_config).items()}
    with pytest.raises(EmptyBatchError):
        actor_loss(batch, model, 0.1)
    agent = SacAgent(model, tiny_config)
    with pytest.raises(EmptyBatchError):
        critic_loss(batch, model, agent.target, 0.1, 0.99)


def double_setup(config, seed=0):
    torch.manual_seed(seed)
    model = VoxelRepNet(config).double()
    agent = SacAgent(model, config)
    batch = {key: value.double() for key, value in tensor_batch(config, n=6, seed=seed).items()}
    return model, agent, batch


def squashed_sample(dist, generator):
    """Independent tanh-Gaussian draw: (action, log-prob)"""
    noise = torch.randn(dist.mean.shape, generator=generator, dtype=dist.mean.dtype)
    std = dist.log_std.exp()
    u = dist.mean + std * noise
    normal = torch.distributions.Normal(dist.mean, std)
    log_prob = (normal.log_prob(u) - torch.log(1.0 - torch.tanh(u) ** 2)).sum(-1)
    return torch.tanh(u), log_prob


def test_discounted_critic_loss_matches_recomputation(tiny_config):
    model, agent, batch = double_setup(tiny_config)
    with torch.no_grad():
        for p in agent.target.critic.parameters():
            p.mul_(0.5)
    alpha, gamma = 0.2, 0.9
    loss = critic_loss(batch, model, agent.target, alpha, gamma, generator=torch.Generator().manual_seed(9))

    with torch.no_grad():
        dist = model.actor(model.encoder(batch["next_obs"]), batch["next_state"])
        next_action, next_log_prob = squashed_sample(dist, torch.Generator().manual_seed(9))
        tq1, tq2 = agent.target.critic(agent.target.encoder(batch["next_obs"]), batch["next_state"], next_action)
        y = batch["reward"] + gamma * batch["not_done"] * (torch.min(tq1, tq2) - alpha * next_log_prob)
        q1, q2 = model.critic(model.encoder(batch["obs"]), batch["state"], batch["action"])
        expected = ((q1 - y) ** 2).mean() + ((q2 - y) ** 2).mean()
    assert loss.item() == pytest.approx(expected.item(), rel=1e-7)


def test_critic_target_term_carries_no_gradient(tiny_config):
    model, agent, batch = double_setup(tiny_config)
    batch["next_obs"].requires_grad_(True)
    batch["next_state"].requires_grad_(True)
    critic_loss(batch, model, agent.target, 0.1, 0.99).backward()
    assert batch["next_obs"].grad is None and batch["next_state"].grad is None


def test_actor_loss_matches_formula(tiny_config):
    model, _, batch = double_setup(tiny_config)
    loss, log_prob = actor_loss(batch, model, 0.3, generator=torch.Generator().manual_seed(4))
    with torch.no_grad():
        features = model.encoder(batch["obs"])
        action, expected_log_prob = squashed_sample(model.actor(features, batch["state"]),
                                                    torch.Generator().manual_seed(4))
        q1, q2 = model.critic(features, batch["state"], action)
        expected = (0.3 * expected_log_prob - torch.min(q1, q2)).mean()
    assert torch.allclose(log_prob, expected_log_prob, rtol=1e-8)
    assert loss.item() == pytest.approx(expected.item(), rel=1e-8)


def test_actor_loss_grows_with_alpha_for_narrow_policy(tiny_config):
    model, _, batch = double_setup(tiny_config)
    dims = tiny_config.action_dim
    with torch.no_grad():
        model.actor.policy[-1].weight[dims:].zero_()
        model.actor.policy[-1].bias[dims:].fill_(-50.0)
    losses = [actor_loss(batch, model, alpha, generator=torch.Generator().manual_seed(2))
              for alpha in (0.0, 0.1, 0.5)]
    values = [loss.item() for loss, _ in losses]
    assert values[0] < values[1] < values[2]
    # linear in alpha with the mean log-probability as slope
    slope = losses[0][1].mean().item()
    assert values[2] - values[1] == pytest.approx(0.4 * slope, rel=1e-6)


def test_actor_gradient_vanishes_without_entropy_and_flat_critic(tiny_config):
    model, _, batch = double_setup(tiny_config)
    with torch.no_grad():
        model.critic.q1[-1].weight.zero_()
        model.critic.q2[-1].weight.zero_()
    loss, _ = actor_loss(batch, model, 0.0)
    loss.backward()
    for p in model.actor.parameters():
        assert p.grad is None or float(p.grad.abs().max()) == 0.0


def test_buffer_sampling_is_uniform():
    buffer = ReplayBuffer(10, 8, 3)
    fill(buffer, 10)
    rng = np.random.default_rng(0)
    rewards = np.concatenate([buffer.sample(10, rng)["reward"] for _ in range(2000)])
    counts = np.bincount(rewards.astype(int), minlength=10)
    assert counts.sum() == 20000
    assert np.all(np.abs(counts - 2000) < 200)


def test_agent_noise_ignores_global_rng(tiny_config):
    torch.manual_seed(0)
    model = VoxelRepNet(tiny_config)
    obs = make_obs(0.3)
    first = SacAgent(model, tiny_config).act(obs)
    torch.manual_seed(99)
    torch.rand(10)
    second = SacAgent(model, tiny_config).act(obs)
    assert np.array_equal(first, second)


def test_agent_generator_survives_state_round_trip(tiny_config):
    torch.manual_seed(0)
    model = VoxelRepNet(tiny_config)
    agent = SacAgent(model, tiny_config)
    agent.act(make_obs(0.1))
    state = agent.state_dict()
    expected = agent.act(make_obs(0.2))
    other = SacAgent(model, tiny_config.copy(seed=5))
    other.load_state_dict(state)
    assert np.array_equal(other.act(make_obs(0.2)), expected)


# ---- temperature -----------------------------------------------------------

def test_alpha_stays_positive_and_rises_when_entropy_is_low():
    tuner = EntropyTuner(0.1, target_entropy=-3.0, lr=0.1)
    # log-probs of +5 mean entropy -5, below the target
    for _ in range(5):
        alpha = tuner.update(torch.full((8,), 5.0))
        assert alpha > 0
    assert tuner.alpha > 0.1


def test_alpha_falls_when_entropy_is_high():
    tuner = EntropyTuner(0.1, target_entropy=-3.0, lr=0.1)
    tuner.update(torch.full((8,), -1.0))
    assert tuner.alpha < 0.1


def test_alpha_stationary_at_target():
    tuner = EntropyTuner(0.5, target_entropy=-2.0, lr=0.1)
    tuner.update(torch.full((8,), 2.0))
    assert tuner.alpha == pytest.approx(0.5)


def test_alpha_must_start_positive():
    with pytest.raises(ValueError):
        EntropyTuner(0.0, -1.0, 1e-3)


# ---- target networks ---------------------------------------------------------

def test_target_update_interpolates():
    p = [torch.ones(3)]
    t = [torch.zeros(3)]
    target_update(p, t, 0.3)
    assert torch.allclose(t[0], torch.full((3,), 0.3))
    target_update(p, t, 1.0)
    assert torch.equal(t[0], p[0])
    before = torch.full((3,), 7.0)
    t = [before.clone()]
    target_update(p, t, 0.0)
    assert torch.equal(t[0], before)


def test_target_update_checks_shapes():
    with pytest.raises(ShapeMismatchError):
        target_update([torch.ones(3)], [torch.zeros(2)], 0.5)


def test_agent_update_reports_metrics(tiny_config):
    torch.manual_seed(0)
    agent = SacAgent(VoxelRepNet(tiny_config), tiny_config)
    metrics = agent.update(tensor_batch(tiny_config))
    assert set(metrics) == {"critic_loss", "actor_loss", "alpha", "entropy"}
    assert all(np.isfinite(v) for v in metrics.values())


def test_frozen_encoder_is_not_in_critic_optimizer(tiny_config):
    config = tiny_config.copy(freeze_encoder=True)
    model = VoxelRepNet(config)
    agent = SacAgent(model, config)
    owned = {id(p) for group in agent.critic_optimizer.param_groups for p in group["params"]}
    assert not owned & {id(p) for p in model.encoder.parameters()}


def test_agent_actions_stay_in_box(tiny_config):
    agent = SacAgent(VoxelRepNet(tiny_config), tiny_config)
    obs = make_obs(0.3)
    for sample in (True, False):
        action = agent.act(obs, sample=sample)
        assert action.shape == (3,)
        assert np.all(np.abs(action) < 1.0)


# ---- augmentation -------------------------------------------------------------

def test_zero_augment_is_identity():
    images = torch.rand(2, 3, 8, 8)
    params = {"shift": np.zeros((2, 2), dtype=int), "brightness": np.zeros(2), "contrast": np.ones(2)}
    assert torch.allclose(apply_augment(images, params), images)


def test_shift_moves_content_and_replicates_edges():
    image = torch.arange(16, dtype=torch.float32).view(1, 1, 4, 4).repeat(1, 3, 1, 1) / 16.0
    params = {"shift": np.array([[1, 0]]), "brightness": np.zeros(1), "contrast": np.ones(1)}
    out = apply_augment(image, params)
    assert torch.equal(out[0, 0, :, 1:], image[0, 0, :, :3])
    assert torch.equal(out[0, 0, :, 0], image[0, 0, :, 0])


def test_augment_params_ranges(rng):
    params = sample_augment_params(rng, 500)
    assert np.abs(params["shift"]).max() <= 4
    assert np.all((params["contrast"] >= 0.8) & (params["contrast"] <= 1.2))
    assert np.all(np.abs(params["brightness"]) <= 0.2)


def test_augment_keeps_shape_and_range(rng):
    image = rng.uniform(size=(8, 8, 3))
    out = augment(image, rng)
    assert out.shape == (8, 8, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0
