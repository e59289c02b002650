import csv

import numpy as np
import torch

import worldsim
from fake_policy import RandomPolicy
from Geo_Math import EulerPose, aligned_pose_rmse, euler_to_rotation, rotation_to_euler, transform_points
from Img_Math import psnr, ssim
from nets import VoxelRepNet, image_to_tensor


SYNTHESIS_HEADER = ["lambda_ft", "phi_d", "ssim_mean", "psnr_db_mean", "n"]
POSE_HEADER = ["phi_d", "domain", "variant", "rmse"]

DEFAULT_PHI_D = (15.0, 30.0, 45.0, 60.0)

# Camera position in normalized volume coordinates: one unit behind the
# volume center along the viewing (depth) axis
CAMERA_ORIGIN = np.array([0.0, 0.0, -1.0])


def _read_csv(path, header):
    with open(path, "r", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty report file")
    if [c.strip() for c in rows[0]] != header:
        raise ValueError(f"{path} line 1: expected header {','.join(header)}")
    body = []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValueError(f"{path} line {line_no}: expected {len(header)} fields, got {len(row)}")
        body.append((line_no, row))
    return body


def _write_csv(path, header, rows):
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
    except Exception as e:
        print(f"ERROR [evaluation] Failed to write report {path}: {e}")
        raise


class SynthesisReport:
    """Mean SSIM / PSNR per (lambda_ft, phi_d) cell"""

    def __init__(self, rows=None):
        self.rows = list(rows or [])

    def add(self, lambda_ft, phi_d, ssim_mean, psnr_db_mean, n):
        if n < 1:
            raise ValueError(f"a report cell needs at least one sample, got {n}")
        self.rows.append({"lambda_ft": float(lambda_ft), "phi_d": float(phi_d), "ssim_mean": float(ssim_mean),
                          "psnr_db_mean": float(psnr_db_mean), "n": int(n)})

    def extend(self, other):
        self.rows.extend(other.rows)
        return self

    def cell(self, lambda_ft, phi_d):
        for row in self.rows:
            if row["lambda_ft"] == lambda_ft and row["phi_d"] == phi_d:
                return row
        raise KeyError(f"no cell for lambda_ft={lambda_ft}, phi_d={phi_d}")

    def __len__(self):
        return len(self.rows)

    def save_to_file(self, path):
        _write_csv(path, SYNTHESIS_HEADER,
                   [[repr(r["lambda_ft"]), repr(r["phi_d"]), repr(r["ssim_mean"]), repr(r["psnr_db_mean"]), r["n"]]
                    for r in self.rows])

    @classmethod
    def load_from_file(cls, path):
        report = cls()
        for line_no, row in _read_csv(path, SYNTHESIS_HEADER):
            try:
                report.add(float(row[0]), float(row[1]), float(row[2]), float(row[3]), int(row[4]))
            except ValueError as e:
                raise ValueError(f"{path} line {line_no}: {e}")
        return report


class PoseReport:
    """Aligned RMSE per (phi_d, variant), plus one average row per variant"""

    def __init__(self, rows=None):
        self.rows = list(rows or [])

    def add(self, phi_d, domain, variant, rmse):
        if not rmse >= 0:
            raise ValueError(f"RMSE must be non-negative, got {rmse}")
        self.rows.append({"phi_d": phi_d, "domain": domain, "variant": variant, "rmse": float(rmse)})

    def add_average(self, variant):
        values = [r["rmse"] for r in self.rows if r["variant"] == variant and r["phi_d"] != "avg"]
        if values:
            self.add("avg", "all", variant, float(np.mean(values)))

    def average(self, variant):
        for row in self.rows:
            if row["variant"] == variant and row["phi_d"] == "avg":
                return row["rmse"]
        raise KeyError(f"no average row for variant {variant!r}")

    def __len__(self):
        return len(self.rows)

    def save_to_file(self, path):
        _write_csv(path, POSE_HEADER,
                   [[r["phi_d"] if r["phi_d"] == "avg" else repr(float(r["phi_d"])), r["domain"], r["variant"],
                     repr(r["rmse"])] for r in self.rows])

    @classmethod
    def load_from_file(cls, path):
        report = cls()
        for line_no, row in _read_csv(path, POSE_HEADER):
            try:
                phi_d = row[0] if row[0] == "avg" else float(row[0])
                report.add(phi_d, row[1], row[2], float(row[3]))
            except ValueError as e:
                raise ValueError(f"{path} line {line_no}: {e}")
        return report


class PolicyReport:
    def __init__(self, successes, grasps, returns):
        self.successes = list(successes)
        self.grasps = list(grasps)
        self.returns = list(returns)

    @property
    def n_trials(self):
        return len(self.successes)

    @property
    def success_rate(self):
        return float(np.mean(self.successes)) if self.successes else 0.0

    @property
    def grasp_rate(self):
        return float(np.mean(self.grasps)) if self.grasps else 0.0

    def __repr__(self):
        return f"PolicyReport(n={self.n_trials}, success={self.success_rate:.2f}, grasp={self.grasp_rate:.2f})"


class ModelPolicy:
    """Deterministic (tanh of the mean) actions straight from a VoxelRepNet"""

    def __init__(self, model):
        self.model = model

    @torch.no_grad()
    def act(self, observation, env=None):
        device = next(self.model.parameters()).device
        features = self.model.encoder(image_to_tensor(observation.static_view, device))
        state = torch.as_tensor(observation.robot_state, dtype=torch.float32, device=device).unsqueeze(0)
        return self.model.actor(features, state).mode()[0].cpu().numpy().astype(np.float64)


def as_policy(params):
    if isinstance(params, VoxelRepNet):
        return ModelPolicy(params)
    if hasattr(params, "act"):
        return params
    raise TypeError(f"cannot act with {type(params).__name__}")


# ---------------------------------------------------------------------------
# Novel-view synthesis
# ---------------------------------------------------------------------------

def eval_synthesis(model, env, phi_d_list, n_pairs, seed, lambda_ft=0.0, policy=None):
    """
    Score reconstructions of the dynamic view at exact angles

    Args:
        model: VoxelRepNet
        env: ManipulationEnv (its episode state is consumed)
        phi_d_list: Dynamic camera angles in degrees
        n_pairs: Pairs per angle (>= 1)
        seed: Rollout seed; every angle sees the same states
        lambda_ft: Label stored with each report cell
        policy: Object with act(obs, env); seeded random actions by default

    Returns:
        SynthesisReport with one row per angle
    """
    phi_d_list = list(phi_d_list)
    if not phi_d_list:
        raise ValueError("phi_d list is empty")
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")

    report = SynthesisReport()
    for phi_d in phi_d_list:
        rollout = policy if policy is not None else RandomPolicy(env.action_dim, seed)
        env.reset(seed=seed)
        episode = 0
        ssims, psnrs = [], []
        while len(ssims) < n_pairs:
            obs = env.observe(phi_d)
            i_hat, _ = model.predict_view(obs.static_view, obs.dynamic_view)
            ssims.append(ssim(i_hat, obs.dynamic_view))
            psnrs.append(psnr(i_hat, obs.dynamic_view))
            _, _, done, _ = env.step(rollout.act(obs, env))
            if done:
                episode += 1
                env.reset(seed=seed + episode)
        report.add(lambda_ft, phi_d, np.mean(ssims), np.mean(psnrs), n_pairs)
        print(f"[evaluation] synthesis phi_d={phi_d:g}: SSIM {np.mean(ssims):.4f}, PSNR {np.mean(psnrs):.2f} dB")
    return report


# ---------------------------------------------------------------------------
# Pose estimation
# ---------------------------------------------------------------------------

def relative_camera_position(phi_d, cam=None):
    """
    Dynamic camera position expressed in the static camera frame, scaled so
    the static camera sits at CAMERA_ORIGIN
    """
    static = worldsim.static_camera()
    cam = cam or worldsim.camera_at_angle(phi_d)
    basis = np.stack(static.basis(), axis=1)
    return basis.T @ (cam.position() - static.look_at) / static.radius


def oracle_relative_pose(phi_d):
    """Ground-truth static-to-dynamic camera rotation as an EulerPose"""
    static_basis = np.stack(worldsim.static_camera().basis(), axis=1)
    dynamic_basis = np.stack(worldsim.camera_at_angle(phi_d).basis(), axis=1)
    return EulerPose(*rotation_to_euler(static_basis.T @ dynamic_basis))


def pose_to_position(pose):
    return transform_points(CAMERA_ORIGIN[None], euler_to_rotation(pose), pose.translation)[0]


def domain_label(phi_d, phi):
    return "ID" if phi_d <= phi else "OOD"


def eval_pose(model, env, phi_d_list, traj_len, seed, variant="model", n_trajectories=4, oracle=False,
              report=None):
    """
    Umeyama-aligned RMSE of camera trajectories recovered from PoseNet

    Each trajectory sweeps the dynamic camera from 0 to phi_d degrees over
    traj_len timesteps while a seeded random policy moves the scene.

    Args:
        model: VoxelRepNet (ignored when oracle is True)
        env: ManipulationEnv
        phi_d_list: Sweep end angles in degrees
        traj_len: Timesteps per trajectory (>= 3)
        seed: Rollout seed
        variant: Label for the report rows
        n_trajectories: Trajectories averaged per angle
        oracle: Feed ground-truth relative poses instead of predictions
        report: Optional PoseReport to append to

    Returns:
        PoseReport
    """
    if traj_len < 3:
        raise ValueError(f"traj_len must be >= 3, got {traj_len}")
    phi_d_list = list(phi_d_list)
    if not phi_d_list:
        raise ValueError("phi_d list is empty")

    report = report if report is not None else PoseReport()
    for phi_d in phi_d_list:
        errors = []
        for k in range(n_trajectories):
            policy = RandomPolicy(env.action_dim, seed + k)
            obs = env.reset(seed=seed + k)
            predicted, truth = [], []
            for t, angle in enumerate(np.linspace(0.0, phi_d, traj_len)):
                obs = env.observe(angle)
                pose = oracle_relative_pose(angle) if oracle else model.predict_pose(obs.static_view,
                                                                                     obs.dynamic_view)
                predicted.append(pose_to_position(pose))
                truth.append(relative_camera_position(angle))
                if t + 1 < traj_len and not env.done:
                    env.step(policy.act(obs, env))
            errors.append(aligned_pose_rmse(np.array(predicted), np.array(truth)))
        rmse = float(np.mean(errors))
        report.add(float(phi_d), domain_label(phi_d, env.phi), variant, rmse)
        print(f"[evaluation] pose phi_d={phi_d:g} ({domain_label(phi_d, env.phi)}): RMSE {rmse:.4f}")
    report.add_average(variant)
    return report


# ---------------------------------------------------------------------------
# Policy success
# ---------------------------------------------------------------------------

def evaluate_policy_episodes(policy, env, n_trials, seed):
    """
    Run n_trials episodes cycling through the predefined configurations

    Returns:
        PolicyReport
    """
    if n_trials < 1:
        raise ValueError(f"n_trials must be >= 1, got {n_trials}")
    policy = as_policy(policy)
    successes, grasps, returns = [], [], []
    for k in range(n_trials):
        obs = env.reset(seed=seed + k, config_index=k % env.n_configs)
        done = False
        succeeded = grasped = False
        total = 0.0
        while not done:
            obs, reward, done, info = env.step(policy.act(obs, env))
            total += reward
            succeeded = succeeded or info["success"]
            grasped = grasped or info["grasped"]
        successes.append(float(succeeded))
        grasps.append(float(grasped))
        returns.append(total)
    return PolicyReport(successes, grasps, returns)


def eval_policy(params, env, task, n_trials, seed):
    """Success rate over n_trials predefined configurations of the task"""
    if env.task != task:
        env.reset(task=task)
    report = evaluate_policy_episodes(params, env, n_trials, seed)
    if task == "lift":
        print(f"[evaluation] {task}: success {report.success_rate:.2f}, grasp {report.grasp_rate:.2f}")
    else:
        print(f"[evaluation] {task}: success {report.success_rate:.2f}")
    return report.success_rate


def steps_to_threshold(steps, values, threshold):
    """First step whose value reaches threshold, or None"""
    for step, value in zip(steps, values):
        if value >= threshold:
            return int(step)
    return None
