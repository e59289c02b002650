import copy
import threading

import numpy as np
import torch
import torch.nn as nn

from Geo_Math import ShapeMismatchError
from nets import image_to_tensor


SHIFT_PAD = 4
BRIGHTNESS_RANGE = 0.2
CONTRAST_RANGE = (0.8, 1.2)


class UnderfullBufferError(RuntimeError):
    """Requested more samples than the buffer holds"""


class EmptyBatchError(ValueError):
    """Loss computed on a batch with no transitions"""


def _to_uint8(image):
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


class ReplayBuffer:
    """
    FIFO ring buffer of transitions. Views are stored as uint8; both the
    static and the dynamic view of each observation are kept so the 3D
    objective can reuse RL-collected data. The dynamic half of next_obs is
    never read and is not stored.
    """

    def __init__(self, capacity, image_size, action_dim, state_dim=4):
        if capacity < 1:
            raise ValueError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.image_size = image_size
        image_shape = (self.capacity, image_size, image_size, 3)
        self.static = np.zeros(image_shape, dtype=np.uint8)
        self.dynamic = np.zeros(image_shape, dtype=np.uint8)
        self.next_static = np.zeros(image_shape, dtype=np.uint8)
        self.state = np.zeros((self.capacity, state_dim), dtype=np.float32)
        self.next_state = np.zeros((self.capacity, state_dim), dtype=np.float32)
        self.action = np.zeros((self.capacity, action_dim), dtype=np.float32)
        self.reward = np.zeros(self.capacity, dtype=np.float32)
        self.not_done = np.zeros(self.capacity, dtype=np.float32)
        self.phi_d = np.zeros(self.capacity, dtype=np.float32)

        self.ptr = 0
        self.size = 0
        self.lock = threading.Lock()

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, next_obs, done):
        """
        Store one transition, evicting the oldest when full

        Args:
            obs: DualObservation before the action
            action: Action in [-1, 1]^|A|
            reward: Scalar reward
            next_obs: DualObservation after the action
            done: True when the transition ends in a terminal state (no bootstrap)
        """
        action = np.asarray(action, dtype=np.float32)
        if action.shape != self.action.shape[1:]:
            raise ShapeMismatchError(f"action shape {action.shape} does not match buffer {self.action.shape[1:]}")
        if not np.isfinite(reward):
            raise ValueError(f"reward must be finite, got {reward}")

        with self.lock:
            i = self.ptr
            self.static[i] = _to_uint8(obs.static_view)
            self.dynamic[i] = _to_uint8(obs.dynamic_view)
            self.next_static[i] = _to_uint8(next_obs.static_view)
            self.state[i] = obs.robot_state
            self.next_state[i] = next_obs.robot_state
            self.action[i] = action
            self.reward[i] = reward
            self.not_done[i] = 0.0 if done else 1.0
            self.phi_d[i] = obs.phi_d
            self.ptr = (self.ptr + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def _gather(self, idxs):
        return {
            "obs": self.static[idxs].astype(np.float32) / 255.0,
            "dynamic": self.dynamic[idxs].astype(np.float32) / 255.0,
            "next_obs": self.next_static[idxs].astype(np.float32) / 255.0,
            "state": self.state[idxs].copy(),
            "next_state": self.next_state[idxs].copy(),
            "action": self.action[idxs].copy(),
            "reward": self.reward[idxs].copy(),
            "not_done": self.not_done[idxs].copy(),
            "phi_d": self.phi_d[idxs].copy(),
            "index": np.asarray(idxs),
        }

    def sample(self, n, rng):
        """Uniform sample with replacement; numpy batch dictionary"""
        if n < 1:
            raise EmptyBatchError(f"batch size must be >= 1, got {n}")
        with self.lock:
            if self.size < n:
                raise UnderfullBufferError(f"buffer holds {self.size} transitions, {n} requested")
            idxs = rng.integers(0, self.size, size=n)
            return self._gather(idxs)

    def sample_recent(self, n, rng, window=10000):
        """Uniform sample from the `window` most recent transitions"""
        if n < 1:
            raise EmptyBatchError(f"batch size must be >= 1, got {n}")
        with self.lock:
            if self.size < 1:
                raise UnderfullBufferError("buffer is empty")
            span = min(window, self.size)
            offsets = rng.integers(0, span, size=n)
            idxs = (self.ptr - 1 - offsets) % self.capacity
            return self._gather(idxs)

    def get_state(self):
        with self.lock:
            arrays = {name: getattr(self, name)[:self.size].copy() for name in self._array_names()}
            return dict(arrays, ptr=self.ptr, size=self.size)

    def set_state(self, snapshot):
        with self.lock:
            size = int(snapshot["size"])
            for name in self._array_names():
                getattr(self, name)[:size] = snapshot[name]
            self.ptr = int(snapshot["ptr"])
            self.size = size

    def mark(self):
        """Pointer, size and the slot the next add overwrites"""
        with self.lock:
            slot = {name: getattr(self, name)[self.ptr].copy() for name in self._array_names()}
            return {"ptr": self.ptr, "size": self.size, "slot": slot}

    def rollback(self, mark):
        """Undo the adds made since `mark` (at most one)"""
        with self.lock:
            for name, value in mark["slot"].items():
                getattr(self, name)[mark["ptr"]] = value
            self.ptr = mark["ptr"]
            self.size = mark["size"]

    @staticmethod
    def _array_names():
        return ("static", "dynamic", "next_static", "state", "next_state", "action", "reward", "not_done", "phi_d")

    def save_to_file(self, filename):
        try:
            np.savez(filename, **self.get_state())
        except Exception as e:
            print(f"ERROR [ReplayBuffer] Failed to save buffer to {filename}: {e}")
            raise

    def load_from_file(self, filename):
        with np.load(filename) as data:
            self.set_state({key: data[key] for key in data.files})


def batch_to_tensors(batch, device=None):
    """numpy batch dictionary -> torch tensors with images as (N, 3, H, W)"""
    tensors = {}
    for key, value in batch.items():
        if key in ("obs", "dynamic", "next_obs"):
            tensors[key] = image_to_tensor(value, device)
        elif key != "index":
            tensors[key] = torch.as_tensor(value, device=device)
    return tensors


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def sample_augment_params(rng, n):
    """
    Draw shift and color-jitter parameters for n images

    Returns:
        dict with integer shifts (n, 2) as (dx, dy) in [-4, 4], brightness
        offsets (n,) in [-0.2, 0.2] and contrast factors (n,) in [0.8, 1.2]
    """
    return {
        "shift": rng.integers(-SHIFT_PAD, SHIFT_PAD + 1, size=(n, 2)),
        "brightness": rng.uniform(-BRIGHTNESS_RANGE, BRIGHTNESS_RANGE, size=n),
        "contrast": rng.uniform(CONTRAST_RANGE[0], CONTRAST_RANGE[1], size=n),
    }


def apply_augment(images, params):
    """
    Shift with replicate padding, then brightness/contrast jitter, clipped to [0, 1]

    Args:
        images: (N, 3, H, W) tensor
        params: dict from sample_augment_params

    Returns:
        Augmented tensor, same shape
    """
    n_batch, _, height, width = images.shape
    device = images.device
    shift = torch.as_tensor(params["shift"], dtype=torch.long, device=device)
    rows = torch.arange(height, device=device).view(1, height) - shift[:, 1:2]
    cols = torch.arange(width, device=device).view(1, width) - shift[:, 0:1]
    rows = rows.clamp(0, height - 1)
    cols = cols.clamp(0, width - 1)

    batch_idx = torch.arange(n_batch, device=device).view(n_batch, 1, 1)
    shifted = images.permute(0, 2, 3, 1)[batch_idx, rows.view(n_batch, height, 1), cols.view(n_batch, 1, width)]
    shifted = shifted.permute(0, 3, 1, 2)

    contrast = torch.as_tensor(params["contrast"], dtype=images.dtype, device=device).view(n_batch, 1, 1, 1)
    brightness = torch.as_tensor(params["brightness"], dtype=images.dtype, device=device).view(n_batch, 1, 1, 1)
    mean = shifted.mean(dim=(1, 2, 3), keepdim=True)
    out = shifted * contrast + mean * (1.0 - contrast) + brightness
    return out.clamp(0.0, 1.0)


def augment(image, rng, params=None):
    """
    Augment a single H x W x 3 image

    Args:
        image: numpy image in [0, 1]
        rng: numpy Generator used when params is None
        params: Optional explicit parameters (see sample_augment_params)

    Returns:
        Augmented numpy image, same shape, clipped to [0, 1]
    """
    if params is None:
        params = sample_augment_params(rng, 1)
    tensor = image_to_tensor(np.asarray(image, dtype=np.float32))
    out = apply_augment(tensor, params)
    return out[0].permute(1, 2, 0).numpy()


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _check_batch(batch):
    if batch["action"].shape[0] == 0:
        raise EmptyBatchError("batch has no transitions")


def critic_loss(batch, model, target, alpha, gamma, generator=None):
    """
    Soft Bellman error summed over the twin critics

    Args:
        batch: Tensor batch (obs, state, action, reward, next_obs, next_state, not_done)
        model: VoxelRepNet with encoder, actor, critic
        target: Module with slow-moving `encoder` and `critic`
        alpha: Entropy temperature (float or tensor)
        gamma: Discount
        generator: Optional torch.Generator for the next-action sample

    Returns:
        Scalar loss tensor (gradients flow into model.encoder and model.critic)
    """
    _check_batch(batch)
    with torch.no_grad():
        next_features = model.encoder(batch["next_obs"])
        dist = model.actor(next_features, batch["next_state"])
        next_action, next_log_prob, _ = dist.rsample(generator)
        target_features = target.encoder(batch["next_obs"])
        tq1, tq2 = target.critic(target_features, batch["next_state"], next_action)
        soft_value = torch.min(tq1, tq2) - alpha * next_log_prob
        target_q = batch["reward"] + gamma * batch["not_done"] * soft_value

    q1, q2 = model.critic(model.encoder(batch["obs"]), batch["state"], batch["action"])
    return ((q1 - target_q) ** 2).mean() + ((q2 - target_q) ** 2).mean()


def actor_loss(batch, model, alpha, generator=None):
    """
    Entropy-regularized policy loss on detached encoder features

    Returns:
        (loss, log_probs) where log_probs feed the temperature update
    """
    _check_batch(batch)
    features = model.encoder(batch["obs"]).detach()
    dist = model.actor(features, batch["state"])
    action, log_prob, _ = dist.rsample(generator)
    q1, q2 = model.critic(features, batch["state"], action)
    loss = (alpha * log_prob - torch.min(q1, q2)).mean()
    return loss, log_prob


class EntropyTuner:
    """Temperature alpha optimized in log space with Adam"""

    def __init__(self, alpha_init, target_entropy, lr):
        if alpha_init <= 0:
            raise ValueError(f"alpha must be positive, got {alpha_init}")
        self.target_entropy = float(target_entropy)
        self.log_alpha = torch.tensor(float(np.log(alpha_init)), requires_grad=True)
        self.optimizer = torch.optim.Adam([self.log_alpha], lr=lr)

    @property
    def alpha(self):
        return float(self.log_alpha.exp())

    def loss(self, log_probs):
        return -(self.log_alpha * (log_probs.detach() + self.target_entropy)).mean()

    def update(self, log_probs):
        """One gradient step; returns the new alpha"""
        self.optimizer.zero_grad(set_to_none=True)
        self.loss(log_probs).backward()
        self.optimizer.step()
        return self.alpha

    def state_dict(self):
        return {"log_alpha": self.log_alpha.detach().clone(), "optimizer": self.optimizer.state_dict()}

    def load_state_dict(self, state):
        with torch.no_grad():
            self.log_alpha.copy_(state["log_alpha"])
        self.optimizer.load_state_dict(state["optimizer"])


def alpha_update(log_probs, tuner):
    """Temperature step for a batch of policy log-probabilities; returns alpha'"""
    return tuner.update(log_probs)


def target_update(params, target_params, tau):
    """In place: target <- tau * param + (1 - tau) * target"""
    params = list(params)
    target_params = list(target_params)
    if len(params) != len(target_params):
        raise ShapeMismatchError(f"{len(params)} parameters vs {len(target_params)} targets")
    with torch.no_grad():
        for p, t in zip(params, target_params):
            if p.shape != t.shape:
                raise ShapeMismatchError(f"parameter shape {tuple(p.shape)} vs target {tuple(t.shape)}")
            t.mul_(1.0 - tau).add_(p, alpha=tau)
    return target_params


# ---------------------------------------------------------------------------
# Agent
# ---------------------------------------------------------------------------

class TargetNetworks(nn.Module):
    """Slow-moving copies of the encoder and twin critic"""

    def __init__(self, model):
        super().__init__()
        self.encoder = copy.deepcopy(model.encoder)
        self.critic = copy.deepcopy(model.critic)
        for p in self.parameters():
            p.requires_grad_(False)


@torch.no_grad()
def policy_action(model, observation, generator=None, sample=True):
    """Action for one DualObservation; only the static view is used"""
    device = next(model.parameters()).device
    features = model.encoder(image_to_tensor(observation.static_view, device))
    state = torch.as_tensor(observation.robot_state, dtype=torch.float32, device=device).unsqueeze(0)
    dist = model.actor(features, state)
    action = dist.rsample(generator)[0] if sample else dist.mode()
    return action[0].cpu().numpy().astype(np.float64)


def seeded_generator(seed, device="cpu"):
    return torch.Generator(device=device).manual_seed(int(seed))


class SacAgent:
    """
    Soft actor-critic over a VoxelRepNet. The critic optimizer also owns
    the encoder unless it is frozen; the actor reads detached features.
    All action noise comes from the agent's own generator, seeded from the
    config, so agents in different threads do not share RNG state.
    """

    def __init__(self, model, config):
        self.model = model
        self.config = config
        self.target = TargetNetworks(model)
        self.debug = False
        self.generator = seeded_generator(config.seed, next(model.parameters()).device)

        lr = config.lr_rl
        critic_params = list(model.critic.parameters())
        if not config.freeze_encoder:
            critic_params = list(model.encoder.parameters()) + critic_params
        self.critic_optimizer = torch.optim.Adam(critic_params, lr=lr)
        self.actor_optimizer = torch.optim.Adam(model.actor.parameters(), lr=lr)
        self.entropy = EntropyTuner(config.alpha_init, -float(config.action_dim), lr)

    @property
    def alpha(self):
        return self.entropy.alpha

    def optimizers(self):
        return {"critic": self.critic_optimizer, "actor": self.actor_optimizer}

    def act(self, observation, sample=True):
        return policy_action(self.model, observation, self.generator, sample)

    def snapshot(self, seed):
        """Frozen copy of the current policy with its own noise stream"""
        return PolicySnapshot(self.model, seed)

    def update(self, batch):
        """
        One critic, actor and temperature update, then a target EMA step

        Args:
            batch: Tensor batch (already augmented)

        Returns:
            dict of scalar metrics
        """
        alpha = self.entropy.alpha

        c_loss = critic_loss(batch, self.model, self.target, alpha, self.config.gamma, self.generator)
        self.critic_optimizer.zero_grad(set_to_none=True)
        c_loss.backward()
        self.critic_optimizer.step()

        a_loss, log_prob = actor_loss(batch, self.model, alpha, self.generator)
        self.actor_optimizer.zero_grad(set_to_none=True)
        a_loss.backward()
        self.actor_optimizer.step()

        new_alpha = alpha_update(log_prob, self.entropy)

        target_update(self.model.critic.parameters(), self.target.critic.parameters(), self.config.tau)
        target_update(self.model.encoder.parameters(), self.target.encoder.parameters(), self.config.tau)

        return {
            "critic_loss": float(c_loss.detach()),
            "actor_loss": float(a_loss.detach()),
            "alpha": new_alpha,
            "entropy": float(-log_prob.detach().mean()),
        }

    def state_dict(self):
        return {"target": self.target.state_dict(), "entropy": self.entropy.state_dict(),
                "generator": self.generator.get_state()}

    def load_state_dict(self, state):
        self.target.load_state_dict(state["target"])
        self.entropy.load_state_dict(state["entropy"])
        if "generator" in state:
            self.generator.set_state(state["generator"])


class PolicySnapshot:
    """Detached copy of a model used to act off the training thread"""

    def __init__(self, model, seed):
        self.model = copy.deepcopy(model)
        self.generator = seeded_generator(seed, next(self.model.parameters()).device)

    def act(self, observation, sample=True):
        return policy_action(self.model, observation, self.generator, sample)


class AgentPolicy:
    """Adapter giving a SacAgent the `act(observation, env)` policy interface"""

    def __init__(self, agent, deterministic=True):
        self.agent = agent
        self.deterministic = deterministic

    def act(self, observation, env=None):
        return self.agent.act(observation, sample=not self.deterministic)
