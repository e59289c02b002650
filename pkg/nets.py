import hashlib
import math
import os
import threading
from collections import OrderedDict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from Geo_Math import EulerPose, ShapeMismatchError, warp_voxels


CHECKPOINT_FORMAT = "voxrep-checkpoint"
CHECKPOINT_VERSION = "2.0"

PARAM_GROUPS = ("encoder", "lift", "decoder", "posenet", "actor", "critic")
GROUPS_3D = ("encoder", "lift", "decoder", "posenet")

# Squashed-action clamp keeps atanh finite
ACTION_EPS = 1e-6

# Module init draws from the global torch RNG
_INIT_LOCK = threading.Lock()


class DivisibilityError(ValueError):
    """Feature channels cannot be split evenly into voxel depth slices"""


class CheckpointError(RuntimeError):
    """Checkpoint is unreadable or was written for different network shapes"""


def image_to_tensor(images, device=None):
    """
    Convert H x W x 3 image(s) in [0, 1] to an (N, 3, H, W) float tensor

    Args:
        images: numpy array (H, W, 3) or (N, H, W, 3), or an (N, 3, H, W) tensor
    """
    if isinstance(images, torch.Tensor):
        return images if images.dim() == 4 else images.unsqueeze(0)
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ShapeMismatchError(f"expected H x W x 3 images, got {images.shape}")
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(device)


def tensor_to_image(tensor):
    """(3, H, W) or (1, 3, H, W) tensor to an H x W x 3 numpy image"""
    if tensor.dim() == 4:
        tensor = tensor[0]
    return tensor.detach().cpu().permute(1, 2, 0).numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# Representation networks
# ---------------------------------------------------------------------------

class ResidualBlock(nn.Module):
    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1, stride=stride)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.conv1(x))
        out = self.conv2(out)
        return F.relu(out + self.shortcut(x))


class Encoder(nn.Module):
    """
    2D image encoder f. Two stride-2 stages map an S x S image to an
    S/4 x S/4 feature map with `channels` channels.
    """

    BLOCK_COUNTS = {"resnet6": 6, "resnet10": 10}

    def __init__(self, image_size, channels=64, variant="resnet6"):
        super().__init__()
        self.image_size = image_size
        self.channels = channels
        self.variant = variant

        if variant == "conv4":
            # Plain four-layer ConvNet used for the from-scratch baseline
            self.stem = nn.Conv2d(3, channels, 3, stride=2, padding=1)
            self.blocks = nn.Sequential(
                nn.Conv2d(channels, channels, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
                nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
            )
        elif variant in self.BLOCK_COUNTS:
            self.stem = nn.Conv2d(3, channels, 3, stride=2, padding=1)
            blocks = [ResidualBlock(channels, channels, stride=2)]
            blocks += [ResidualBlock(channels, channels) for _ in range(self.BLOCK_COUNTS[variant] - 1)]
            self.blocks = nn.Sequential(*blocks)
        else:
            raise ValueError(f"unknown encoder variant {variant!r}")

    def forward(self, images):
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, self.image_size, self.image_size):
            raise ShapeMismatchError(
                f"encoder expects (N, 3, {self.image_size}, {self.image_size}), got {tuple(images.shape)}")
        return self.blocks(F.relu(self.stem(images)))


class VoxelLift(nn.Module):
    """
    Voxel lift g: reshape C x H x W features to (C/D_split) x D_split x H x W,
    then upsample with a strided 3D transposed convolution.
    """

    def __init__(self, feature_channels, d_split, voxel_channels, depth_upsample=2, spatial_upsample=2):
        super().__init__()
        if feature_channels % d_split:
            raise DivisibilityError(f"{feature_channels} channels cannot be split into {d_split} depth slices")
        self.feature_channels = feature_channels
        self.d_split = d_split
        in_channels = feature_channels // d_split
        kernel = (depth_upsample + 2, spatial_upsample + 2, spatial_upsample + 2)
        self.up = nn.ConvTranspose3d(in_channels, voxel_channels, kernel,
                                     stride=(depth_upsample, spatial_upsample, spatial_upsample), padding=1)
        self.refine = nn.Conv3d(voxel_channels, voxel_channels, 3, padding=1)

    def reshape(self, features):
        n_batch, channels, height, width = features.shape
        if channels % self.d_split:
            raise DivisibilityError(f"{channels} channels cannot be split into {self.d_split} depth slices")
        return features.reshape(n_batch, channels // self.d_split, self.d_split, height, width)

    def forward(self, features):
        volume = self.reshape(features)
        return self.refine(F.relu(self.up(volume)))


class VoxelDecoder(nn.Module):
    """3D decoder h: warped volume -> image in [0, 1]"""

    def __init__(self, voxel_dims, image_size, hidden=64):
        super().__init__()
        channels, depth, height, width = voxel_dims
        if image_size % height:
            raise ValueError(f"image size {image_size} is not a multiple of voxel size {height}")
        self.voxel_dims = tuple(voxel_dims)
        self.conv3d = nn.Conv3d(channels, channels, 3, padding=1)
        self.project = nn.Conv2d(channels * depth, hidden, 1)

        layers = []
        factor = image_size // height
        while factor > 1:
            layers += [nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1), nn.ReLU()]
            factor //= 2
        self.upsample = nn.Sequential(*layers)
        self.out = nn.Conv2d(hidden, 3, 3, padding=1)

    def forward(self, volume):
        if volume.dim() != 5 or tuple(volume.shape[1:]) != self.voxel_dims:
            raise ShapeMismatchError(f"decoder expects (N, {self.voxel_dims}), got {tuple(volume.shape)}")
        x = F.relu(self.conv3d(volume))
        n_batch, channels, depth, height, width = x.shape
        x = F.relu(self.project(x.reshape(n_batch, channels * depth, height, width)))
        return torch.sigmoid(self.out(self.upsample(x)))


class PoseNet(nn.Module):
    """
    Relative pose from a channel-concatenated image pair. Angles are squashed
    to [-angle_max, angle_max] and translations to [-t_max, t_max].
    """

    def __init__(self, image_size, channels=32, hidden=128, angle_max=math.pi / 2, t_max=0.5,
                 zero_translation=False):
        super().__init__()
        self.image_size = image_size
        self.angle_max = angle_max
        self.t_max = t_max
        self.zero_translation = zero_translation
        self.trunk = nn.Sequential(
            nn.Conv2d(6, channels, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, 6))
        with torch.no_grad():
            self.head[-1].weight.mul_(0.1)
            self.head[-1].bias.zero_()

    def forward(self, i_src, i_tgt):
        if i_src.shape != i_tgt.shape:
            raise ShapeMismatchError(f"pose pair shapes differ: {tuple(i_src.shape)} vs {tuple(i_tgt.shape)}")
        if i_src.dim() != 4 or tuple(i_src.shape[1:]) != (3, self.image_size, self.image_size):
            raise ShapeMismatchError(f"posenet expects (N, 3, {self.image_size}, {self.image_size})")
        raw = self.head(self.trunk(torch.cat([i_src, i_tgt], dim=1)).flatten(1))
        angles = self.angle_max * torch.tanh(raw[:, :3])
        translation = self.t_max * torch.tanh(raw[:, 3:])
        if self.zero_translation:
            translation = torch.zeros_like(translation)
        return torch.cat([angles, translation], dim=1)


# ---------------------------------------------------------------------------
# SAC heads
# ---------------------------------------------------------------------------

class ActionDistribution:
    """Tanh-squashed diagonal Gaussian"""

    def __init__(self, mean, log_std):
        self.mean = mean
        self.log_std = log_std

    @property
    def std(self):
        return self.log_std.exp()

    def log_prob_pre_tanh(self, u):
        """log pi(tanh(u)) via change of variables, summed over action dims"""
        normal = torch.distributions.Normal(self.mean, self.std)
        correction = 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u))
        return (normal.log_prob(u) - correction).sum(-1)

    def rsample(self, generator=None):
        """
        Reparameterized sample

        Args:
            generator: Optional torch.Generator for the noise; None uses the global RNG

        Returns:
            (action, log_prob, pre_tanh) with action strictly inside (-1, 1)
        """
        noise = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype, device=self.mean.device)
        u = self.mean + self.std * noise
        action = torch.tanh(u).clamp(-1.0 + ACTION_EPS, 1.0 - ACTION_EPS)
        return action, self.log_prob_pre_tanh(u), u

    def mode(self):
        return torch.tanh(self.mean)


class FeatureTrunk(nn.Module):
    """Spatial mean pool -> linear projection -> layer norm"""

    def __init__(self, feature_channels, latent_dim):
        super().__init__()
        self.fc = nn.Linear(feature_channels, latent_dim)
        self.norm = nn.LayerNorm(latent_dim)

    def forward(self, features):
        return torch.tanh(self.norm(self.fc(features.mean(dim=(2, 3)))))


def _mlp(in_dim, hidden, out_dim):
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(),
                         nn.Linear(hidden, hidden), nn.ReLU(),
                         nn.Linear(hidden, out_dim))


class Actor(nn.Module):
    def __init__(self, feature_channels, state_dim, action_dim, latent_dim=50, hidden=256,
                 log_std_min=-10.0, log_std_max=2.0):
        super().__init__()
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.log_std_min = log_std_min
        self.log_std_max = log_std_max
        self.trunk = FeatureTrunk(feature_channels, latent_dim)
        self.policy = _mlp(latent_dim + state_dim, hidden, 2 * action_dim)

    def forward(self, features, robot_state):
        if robot_state.shape[-1] != self.state_dim:
            raise ShapeMismatchError(f"robot state has {robot_state.shape[-1]} dims, expected {self.state_dim}")
        out = self.policy(torch.cat([self.trunk(features), robot_state], dim=-1))
        mean, raw_log_std = out.chunk(2, dim=-1)
        log_std = self.log_std_min + 0.5 * (self.log_std_max - self.log_std_min) * (torch.tanh(raw_log_std) + 1.0)
        return ActionDistribution(mean, log_std)


class Critic(nn.Module):
    """Twin Q heads over a shared pooled feature trunk"""

    def __init__(self, feature_channels, state_dim, action_dim, latent_dim=50, hidden=256):
        super().__init__()
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.trunk = FeatureTrunk(feature_channels, latent_dim)
        self.q1 = _mlp(latent_dim + state_dim + action_dim, hidden, 1)
        self.q2 = _mlp(latent_dim + state_dim + action_dim, hidden, 1)

    def forward(self, features, robot_state, action):
        if robot_state.shape[-1] != self.state_dim or action.shape[-1] != self.action_dim:
            raise ShapeMismatchError(
                f"critic expects state {self.state_dim} and action {self.action_dim} dims, "
                f"got {robot_state.shape[-1]} and {action.shape[-1]}")
        x = torch.cat([self.trunk(features), robot_state, action], dim=-1)
        return self.q1(x).squeeze(-1), self.q2(x).squeeze(-1)


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

class VoxelRepNet(nn.Module):
    """Shared encoder feeding the 3D autoencoder and the SAC heads"""

    def __init__(self, config):
        super().__init__()
        self.config = config
        s = config.settings
        self.encoder = Encoder(s["image_size"], s["enc_channels"], s["encoder_variant"])
        self.lift = VoxelLift(s["enc_channels"], s["d_split"], s["voxel_channels"],
                              depth_upsample=s["depth_upsample"])
        self.decoder = VoxelDecoder(config.voxel_dims, s["image_size"], hidden=s["dec_channels"])
        self.posenet = PoseNet(s["image_size"], channels=s["posenet_channels"], angle_max=s["angle_max"],
                               t_max=s["t_max"], zero_translation=s["zero_translation"])
        self.actor = Actor(s["enc_channels"], config.state_dim, config.action_dim, s["latent_dim"],
                           s["hidden_dim"], s["log_std_min"], s["log_std_max"])
        self.critic = Critic(s["enc_channels"], config.state_dim, config.action_dim, s["latent_dim"],
                             s["hidden_dim"])

    def param_groups(self, names=PARAM_GROUPS):
        """Parameter lists per group; groups are disjoint and cover the model"""
        return OrderedDict((name, list(getattr(self, name).parameters())) for name in names)

    # ---- representation pipeline --------------------------------------------

    def encode(self, images):
        return self.encoder(images)

    def lift_features(self, features):
        return self.lift(features)

    def decode(self, volume):
        return self.decoder(volume)

    def estimate_pose(self, i_src, i_tgt):
        return self.posenet(i_src, i_tgt)

    def reconstruct(self, i_src, i_tgt, pose=None):
        """
        Predict the target view from the source view

        Args:
            i_src: (N, 3, H, W) source images
            i_tgt: (N, 3, H, W) target images (only used by PoseNet)
            pose: Optional (N, 6) pose overriding the PoseNet estimate

        Returns:
            (predicted target images, poses used)
        """
        if i_src.shape != i_tgt.shape:
            raise ShapeMismatchError(f"image pair shapes differ: {tuple(i_src.shape)} vs {tuple(i_tgt.shape)}")
        volume = self.lift(self.encoder(i_src))
        if pose is None:
            pose = self.posenet(i_src, i_tgt)
        warped = warp_voxels(volume, pose)
        return self.decoder(warped), pose

    # ---- numpy conveniences ---------------------------------------------------

    def _device(self):
        return next(self.parameters()).device

    @torch.no_grad()
    def predict_view(self, i_src, i_tgt):
        """Numpy in, numpy out: (predicted target image, EulerPose)"""
        src = image_to_tensor(i_src, self._device())
        tgt = image_to_tensor(i_tgt, self._device())
        i_hat, pose = self.reconstruct(src, tgt)
        return tensor_to_image(i_hat), EulerPose.from_array(pose[0].cpu().numpy())

    @torch.no_grad()
    def predict_pose(self, i_src, i_tgt):
        src = image_to_tensor(i_src, self._device())
        tgt = image_to_tensor(i_tgt, self._device())
        return EulerPose.from_array(self.posenet(src, tgt)[0].cpu().numpy())


def build_model(config, seed=None):
    """VoxelRepNet initialized from `seed` (default: config.seed); callable from several threads"""
    with _INIT_LOCK:
        torch.manual_seed(config.seed if seed is None else seed)
        return VoxelRepNet(config)


def recon_loss(i_hat, i_tgt, lambda_l1=1.0):
    """lambda_l1 * mean |i_hat - i_tgt|"""
    if i_hat.shape != i_tgt.shape:
        raise ShapeMismatchError(f"reconstruction shape {tuple(i_hat.shape)} != target {tuple(i_tgt.shape)}")
    return lambda_l1 * (i_hat - i_tgt).abs().mean()


# ---------------------------------------------------------------------------
# Parameter snapshots and checkpoints
# ---------------------------------------------------------------------------

class ParamSet:
    """Detached copy of named parameters, keyed by group"""

    def __init__(self, tensors, groups):
        self.tensors = tensors
        self.groups = tuple(groups)

    @classmethod
    def from_model(cls, model, groups=PARAM_GROUPS):
        tensors = OrderedDict()
        for group in groups:
            for name, value in getattr(model, group).state_dict().items():
                tensors[f"{group}.{name}"] = value.detach().clone()
        return cls(tensors, groups)

    def load_into(self, model):
        for group in self.groups:
            prefix = f"{group}."
            state = {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}
            getattr(model, group).load_state_dict(state)
        return model

    def digest(self):
        """Content hash; identical parameters give identical digests"""
        h = hashlib.sha256()
        for name, value in self.tensors.items():
            h.update(name.encode("utf-8"))
            h.update(value.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def all_finite(self):
        return all(bool(torch.isfinite(v).all()) for v in self.tensors.values() if v.is_floating_point())


def save_checkpoint(filename, model, config, optimizers=None, step=0, extra=None, rng_state=None):
    """
    Write a self-describing checkpoint archive

    Args:
        filename: Target path
        model: VoxelRepNet
        config: RunConfig the model was built from
        optimizers: Optional dict of name -> torch optimizer
        step: Step counter stored with the archive
        extra: Optional dict of additional picklable state
        rng_state: Optional dict of RNG states (numpy generator state etc.)
    """
    archive = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "fingerprint": config.fingerprint(),
        "repr_fingerprint": config.fingerprint(include_actions=False),
        "config": config.to_dict(),
        "params": model.state_dict(),
        "optimizers": {name: opt.state_dict() for name, opt in (optimizers or {}).items()},
        "rng": dict(rng_state or {}),
        "step": int(step),
        "extra": extra or {},
    }
    try:
        directory = os.path.dirname(filename)
        if directory:
            os.makedirs(directory, exist_ok=True)
        tmp_name = filename + ".tmp"
        torch.save(archive, tmp_name)
        os.replace(tmp_name, filename)
    except Exception as e:
        print(f"ERROR [nets] Failed to save checkpoint {filename}: {e}")
        raise
    return filename


def read_checkpoint(filename):
    try:
        archive = torch.load(filename, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {filename}: {e}")
    if not isinstance(archive, dict) or archive.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{filename} is not a {CHECKPOINT_FORMAT} archive")
    return archive


def load_checkpoint(filename, model, config, optimizers=None, groups=None):
    """
    Load a checkpoint into a model after verifying its fingerprint

    Args:
        filename: Checkpoint path
        model: VoxelRepNet built from config
        config: RunConfig used to verify the fingerprint
        optimizers: Optional dict of name -> optimizer to restore
        groups: Optional parameter groups to load (e.g. the 3D groups of a
            pretraining checkpoint); None loads everything

    Returns:
        The archive dictionary
    """
    archive = read_checkpoint(filename)

    if groups is None:
        if archive["fingerprint"] != config.fingerprint():
            raise CheckpointError(f"{filename} was written for different network shapes")
        model.load_state_dict(archive["params"])
    else:
        if archive["repr_fingerprint"] != config.fingerprint(include_actions=False):
            raise CheckpointError(f"{filename} was written for a different representation network")
        for group in groups:
            prefix = f"{group}."
            state = {k[len(prefix):]: v for k, v in archive["params"].items() if k.startswith(prefix)}
            getattr(model, group).load_state_dict(state)

    for name, opt in (optimizers or {}).items():
        if name in archive["optimizers"]:
            opt.load_state_dict(archive["optimizers"][name])

    return archive
