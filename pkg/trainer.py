import copy
import csv
import itertools
import json
import os
import threading
import time
from collections import OrderedDict

import numpy as np
import torch
from PyQt5.QtCore import QObject, QRunnable, QThreadPool, Qt, pyqtSignal

import evaluation
from dataio import EmptyDatasetError, sample_pair_batch
from nets import GROUPS_3D, ParamSet, build_model, image_to_tensor, load_checkpoint, recon_loss, save_checkpoint
from run_config import CONFIG_VERSION
from sac import AgentPolicy, ReplayBuffer, SacAgent, apply_augment, batch_to_tensors, sample_augment_params
from worldsim import ManipulationEnv


LOG_NAME = "train_log.csv"
META_NAME = "run_meta.json"
CONFIG_SNAPSHOT = "config.cfg"
CHECKPOINT_DIR = "checkpoints"


class TrainLog:
    """Append-only (step, metric, value) records with monotone steps"""

    def __init__(self, meta=None):
        self.records = []
        self.meta = dict(meta or {})
        self.last_step = -1

    def add(self, step, metric, value):
        step = int(step)
        if step < self.last_step:
            raise ValueError(f"log step {step} precedes last logged step {self.last_step}")
        self.records.append((step, str(metric), float(value)))
        self.last_step = step

    def __len__(self):
        return len(self.records)

    def metrics(self):
        return sorted({metric for _, metric, _ in self.records})

    def series(self, metric):
        """(steps, values) arrays for one metric"""
        rows = [(s, v) for s, m, v in self.records if m == metric]
        if not rows:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        steps, values = zip(*rows)
        return np.asarray(steps), np.asarray(values)

    def last(self, metric, default=None):
        for _, m, v in reversed(self.records):
            if m == metric:
                return v
        return default

    def save_to_file(self, run_dir):
        """Write train_log.csv and run_meta.json into run_dir"""
        try:
            os.makedirs(run_dir, exist_ok=True)
            with open(os.path.join(run_dir, LOG_NAME), "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["step", "metric", "value"])
                for step, metric, value in self.records:
                    writer.writerow([step, metric, repr(value)])
            with open(os.path.join(run_dir, META_NAME), "w") as f:
                json.dump(dict(self.meta, version=CONFIG_VERSION), f, indent=2, sort_keys=True)
        except Exception as e:
            print(f"ERROR [TrainLog] Failed to save log to {run_dir}: {e}")
            raise

    @classmethod
    def load_from_file(cls, path):
        """
        Read a train_log.csv (and its sibling run_meta.json when present)

        Raises:
            ValueError naming the line of a malformed row
        """
        log = cls()
        with open(path, "r", newline="") as f:
            rows = list(csv.reader(f))
        if not rows:
            raise ValueError(f"{path}: empty log file")
        if [c.strip() for c in rows[0]] != ["step", "metric", "value"]:
            raise ValueError(f"{path} line 1: expected header step,metric,value")
        for line_no, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path} line {line_no}: expected 3 fields, got {len(row)}")
            try:
                log.add(int(row[0]), row[1], float(row[2]))
            except ValueError as e:
                raise ValueError(f"{path} line {line_no}: {e}")

        meta_path = os.path.join(os.path.dirname(path), META_NAME)
        if os.path.isfile(meta_path):
            with open(meta_path, "r") as f:
                log.meta = json.load(f)
        return log


class Trainer(QObject):
    """
    Runs 3D pretraining and joint 3D + SAC training for one config. Progress
    goes out through status_signal; every scalar goes through metric_signal
    into the TrainLog.
    """

    status_signal = pyqtSignal(str)
    metric_signal = pyqtSignal(int, str, float)

    def __init__(self, config, run_dir=None, debug=False):
        super().__init__()
        self.config = config
        self.run_dir = run_dir
        self.debug = debug
        self.device = torch.device(config.device)
        self.model = None
        self.agent = None
        self.buffer = None
        self.optimizer_3d = None
        self.started = time.time()

        self.log = TrainLog(meta={"config": config.to_dict(), "deterministic": not config.pipelined,
                                  "checkpoints": []})
        self.metric_signal.connect(self.log.add, Qt.DirectConnection)

    def log_status(self, message):
        formatted = f"[{self.__class__.__name__}] {message}"
        print(formatted)
        self.status_signal.emit(formatted)

    def emit_metric(self, step, name, value):
        if self.debug:
            print(f"DEBUG [Trainer] step={step} {name}={value:.6g}")
        self.metric_signal.emit(int(step), name, float(value))

    def _checkpoint_path(self, name):
        return os.path.join(self.run_dir, CHECKPOINT_DIR, name)

    def build_model(self):
        self.model = build_model(self.config).to(self.device)
        return self.model

    def save_run_files(self):
        if not self.run_dir:
            return
        os.makedirs(self.run_dir, exist_ok=True)
        self.config.save_to_file(os.path.join(self.run_dir, CONFIG_SNAPSHOT))
        self.log.save_to_file(self.run_dir)

    # ------------------------------------------------------------------
    # Phase 1: object-centric 3D pretraining
    # ------------------------------------------------------------------

    def pretrain(self, manifests, resume=None):
        """
        Optimize the reconstruction loss on view pairs from orbit sequences

        Args:
            manifests: List of SequenceManifest
            resume: Optional checkpoint path to continue from

        Returns:
            ParamSet of the encoder, lift, decoder and posenet groups
        """
        cfg = self.config
        if not any(m.frame_count >= 2 for m in manifests):
            raise EmptyDatasetError("pretraining needs at least one sequence with 2 or more frames")

        model = self.build_model()
        rng = np.random.default_rng(cfg.seed)
        params = [p for group in GROUPS_3D for p in getattr(model, group).parameters()]
        optimizer = torch.optim.Adam(params, lr=cfg.pretrain_lr)
        self.optimizer_3d = optimizer
        start = 0

        if resume:
            archive = load_checkpoint(resume, model, cfg, optimizers={"pretrain": optimizer})
            rng.bit_generator.state = archive["rng"]["numpy"]
            start = archive["step"]
            self.log_status(f"Resumed pretraining at step {start} from {resume}")

        self.log_status(f"Pretraining for {cfg.pretrain_steps - start} steps on {len(manifests)} sequences")
        step, boundary, updated = start, None, False
        try:
            for step in range(start, cfg.pretrain_steps):
                boundary, updated = copy.deepcopy(rng.bit_generator.state), False
                src, tgt = sample_pair_batch(manifests, rng, cfg.pretrain_batch, cfg.max_gap, cfg.image_size)
                src_t = image_to_tensor(src, self.device)
                tgt_t = image_to_tensor(tgt, self.device)
                i_hat, _ = model.reconstruct(src_t, tgt_t)
                loss = recon_loss(i_hat, tgt_t, cfg.lambda_l1)

                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                updated = True

                if (step + 1) % cfg.log_every == 0:
                    self.emit_metric(step + 1, "pretrain_recon_loss", loss.item())
                if self.run_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                    self._save_pretrain(step + 1, optimizer, rng)
        except Exception:
            if self.run_dir:
                # rewind to the start of the failed step unless its update already landed
                if updated:
                    step += 1
                elif boundary is not None:
                    rng.bit_generator.state = boundary
                path = self._save_pretrain(step, optimizer, rng, name="pretrain_crash.pt")
                self.log_status(f"Pretraining failed; resumable checkpoint at {path} (step {step})")
            raise

        if self.run_dir:
            self._save_pretrain(cfg.pretrain_steps, optimizer, rng, name="pretrain_final.pt")
            self.emit_metric(cfg.pretrain_steps, "wall_clock_s", time.time() - self.started)
            self.save_run_files()
        return ParamSet.from_model(model, GROUPS_3D)

    def _save_pretrain(self, step, optimizer, rng, name=None):
        path = self._checkpoint_path(name or f"pretrain_{step:07d}.pt")
        save_checkpoint(path, self.model, self.config, optimizers={"pretrain": optimizer}, step=step,
                        rng_state={"numpy": rng.bit_generator.state})
        self.log.meta["checkpoints"].append(path)
        return path

    def heldout_recon_loss(self, manifests, n_pairs=32, seed=12345):
        """Mean reconstruction loss on a fixed set of pairs drawn with its own RNG"""
        rng = np.random.default_rng(seed)
        src, tgt = sample_pair_batch(manifests, rng, n_pairs, self.config.max_gap, self.config.image_size)
        with torch.no_grad():
            src_t = image_to_tensor(src, self.device)
            tgt_t = image_to_tensor(tgt, self.device)
            i_hat, _ = self.model.reconstruct(src_t, tgt_t)
            return recon_loss(i_hat, tgt_t, self.config.lambda_l1).item()

    # ------------------------------------------------------------------
    # Phase 2: joint 3D + RL training
    # ------------------------------------------------------------------

    def _setup_joint(self, init_params):
        cfg = self.config
        model = self.build_model()
        if init_params is not None:
            try:
                init_params.load_into(model)
            except RuntimeError as e:
                raise ValueError(f"initial parameters do not fit this config: {e}")
        elif cfg.pretrain_checkpoint:
            load_checkpoint(cfg.pretrain_checkpoint, model, cfg, groups=GROUPS_3D)
            self.log_status(f"Loaded pretrained representation from {cfg.pretrain_checkpoint}")

        if cfg.freeze_encoder:
            model.encoder.requires_grad_(False)

        self.agent = SacAgent(model, cfg)
        self.optimizer_3d = None
        if cfg.finetune_3d:
            groups = ["lift", "decoder"]
            if cfg.update_posenet:
                groups.append("posenet")
            if not cfg.freeze_encoder:
                groups.insert(0, "encoder")
            params = [p for group in groups for p in getattr(model, group).parameters()]
            self.optimizer_3d = torch.optim.Adam(params, lr=cfg.lr_3d)
            # The 3D learning rate must be exactly lambda_ft x lr_rl
            assert self.optimizer_3d.param_groups[0]["lr"] == cfg.lambda_ft * cfg.lr_rl

        self.buffer = ReplayBuffer(cfg.buffer_capacity, cfg.image_size, cfg.action_dim, cfg.state_dim)
        return model

    def optimizers(self):
        opts = dict(self.agent.optimizers())
        if self.optimizer_3d is not None:
            opts["3d"] = self.optimizer_3d
        return opts

    def rl_update(self, rng):
        """One SAC update on an augmented replay batch"""
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size, rng)
        params = sample_augment_params(rng, cfg.batch_size)
        tensors = batch_to_tensors(batch, self.device)
        tensors["obs"] = apply_augment(tensors["obs"], params)
        tensors["next_obs"] = apply_augment(tensors["next_obs"], params)
        return self.agent.update(tensors)

    def update_3d(self, rng):
        """One reconstruction step on recent (static, dynamic) pairs at lr_3d"""
        cfg = self.config
        batch = self.buffer.sample_recent(cfg.batch_3d, rng, cfg.recent_window)
        src = image_to_tensor(batch["obs"], self.device)
        tgt = image_to_tensor(batch["dynamic"], self.device)
        i_hat, _ = self.model.reconstruct(src, tgt)
        loss = recon_loss(i_hat, tgt, cfg.lambda_l1)
        self.optimizer_3d.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer_3d.step()
        return loss.item()

    def joint_train(self, env, init_params=None, resume=None):
        """
        Interleave rollouts, SAC updates and 3D updates

        Args:
            env: ManipulationEnv for the configured task
            init_params: Optional ParamSet (e.g. from pretrain) to start from
            resume: Optional checkpoint path written by this method

        Returns:
            (ParamSet of all groups, TrainLog)
        """
        cfg = self.config
        if env.task != cfg.task or env.image_size != cfg.image_size:
            raise ValueError(f"environment ({env.task}, {env.image_size}px) does not match config "
                             f"({cfg.task}, {cfg.image_size}px)")
        self._setup_joint(init_params)
        if cfg.pipelined:
            return self._joint_train_pipelined(env)

        rng = np.random.default_rng(cfg.seed)
        run = {"step": 0, "episode": 0, "episode_return": 0.0}
        obs = None
        if resume:
            obs = self._restore_joint(resume, env, rng, run)
        if obs is None:
            obs = env.reset(seed=int(rng.integers(2 ** 31)))

        self.log_status(f"Joint training {cfg.task} for {cfg.total_env_steps} env steps "
                        f"(lambda_ft={cfg.lambda_ft}, lr_3d={cfg.lr_3d:g})")
        phase, boundary = None, None
        try:
            for step in range(run["step"], cfg.total_env_steps):
                boundary = self._boundary(rng, env, run)
                phase = "collect"
                if step < cfg.seed_steps:
                    action = rng.uniform(-1.0, 1.0, size=cfg.action_dim)
                else:
                    action = self.agent.act(obs, sample=True)
                next_obs, reward, done, info = env.step(action)
                self.buffer.add(obs, action, reward, next_obs, info["terminal"])
                episode_return = run["episode_return"] + reward
                obs = next_obs

                if done:
                    obs = env.reset(seed=int(rng.integers(2 ** 31)))
                    self.emit_metric(step + 1, "episode_return", episode_return)
                    self.emit_metric(step + 1, "episode_success", float(info["success"]))
                    run["episode"] += 1
                    episode_return = 0.0
                run["episode_return"] = episode_return

                phase = "update"
                self._train_step(step, rng)
                run["step"] = step + 1
                phase = "periodic"
                self._periodic(step + 1, rng, env, run)
        except Exception:
            if self.run_dir and self.buffer is not None:
                self._save_joint_crash(phase, boundary, rng, env, run)
            raise

        self._finish()
        return ParamSet.from_model(self.model), self.log

    def _boundary(self, rng, env, run):
        """Cheap state needed to rewind a half-collected env step"""
        return {"rng": copy.deepcopy(rng.bit_generator.state), "env": env.get_state(), "run": dict(run),
                "buffer": self.buffer.mark(), "generator": self.agent.generator.get_state()}

    def _save_joint_crash(self, phase, boundary, rng, env, run):
        """
        Write joint_crash.pt at the last step boundary. A failure inside the
        parameter updates leaves no boundary to return to; the newest
        periodic checkpoint is reported instead.
        """
        if phase == "update":
            joint = [p for p in self.log.meta["checkpoints"] if os.path.basename(p).startswith("joint_")]
            self.log_status(f"Training failed during an update; resume from {joint[-1] if joint else 'scratch'}")
            return None
        if phase == "collect":
            rng.bit_generator.state = boundary["rng"]
            env.set_state(boundary["env"])
            run.clear()
            run.update(boundary["run"])
            self.buffer.rollback(boundary["buffer"])
            self.agent.generator.set_state(boundary["generator"])
        path = self._save_joint(run["step"], rng, env, run, name="joint_crash.pt")
        self.log_status(f"Training failed; resumable checkpoint at {path} (step {run['step']})")
        return path

    def _train_step(self, step, rng):
        cfg = self.config
        if step + 1 < cfg.seed_steps or len(self.buffer) < cfg.batch_size:
            return
        log_now = (step + 1) % cfg.log_every == 0
        if cfg.rl_enabled:
            metrics = self.rl_update(rng)
            if log_now:
                for name, value in metrics.items():
                    self.emit_metric(step + 1, name, value)
        if self.optimizer_3d is not None:
            loss = self.update_3d(rng)
            if log_now:
                self.emit_metric(step + 1, "recon_loss", loss)

    def _periodic(self, step, rng, env, run):
        cfg = self.config
        if cfg.eval_every and step % cfg.eval_every == 0:
            self.evaluate_snapshot(step)
        if self.run_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            self._save_joint(step, rng, env, run)

    def evaluate_snapshot(self, step):
        """Success rate and, for images of 11 px or more, SSIM/PSNR on fresh renders"""
        cfg = self.config
        eval_env = ManipulationEnv(cfg.task, cfg.phi, cfg.image_size, seed=cfg.seed + 7919)
        report = evaluation.evaluate_policy_episodes(AgentPolicy(self.agent), eval_env, cfg.eval_trials,
                                                     seed=cfg.seed + 7919)
        self.emit_metric(step, "success_rate", report.success_rate)
        if cfg.task == "lift":
            self.emit_metric(step, "grasp_rate", report.grasp_rate)
        if cfg.image_size >= 11 and self.optimizer_3d is not None:
            synth = evaluation.eval_synthesis(self.model, eval_env, [cfg.phi], n_pairs=8, seed=cfg.seed,
                                              lambda_ft=cfg.lambda_ft, policy=AgentPolicy(self.agent))
            self.emit_metric(step, "ssim", synth.rows[0]["ssim_mean"])
            self.emit_metric(step, "psnr_db", synth.rows[0]["psnr_db_mean"])
        self.emit_metric(step, "wall_clock_s", time.time() - self.started)
        self.log_status(f"step {step}: success rate {report.success_rate:.2f}")

    def _save_joint(self, step, rng, env, run, name=None):
        path = self._checkpoint_path(name or f"joint_{step:07d}.pt")
        buffer_path = path + ".buffer.npz"
        os.makedirs(os.path.dirname(path), exist_ok=True)
        self.buffer.save_to_file(buffer_path)
        extra = {"agent": self.agent.state_dict(), "env": env.get_state(), "run": dict(run),
                 "buffer": os.path.basename(buffer_path)}
        save_checkpoint(path, self.model, self.config, optimizers=self.optimizers(), step=step,
                        extra=extra, rng_state={"numpy": rng.bit_generator.state})
        self.log.meta["checkpoints"].append(path)
        return path

    def _restore_joint(self, path, env, rng, run):
        archive = load_checkpoint(path, self.model, self.config, optimizers=self.optimizers())
        extra = archive["extra"]
        self.agent.load_state_dict(extra["agent"])
        env.set_state(extra["env"])
        run.update(extra["run"])
        rng.bit_generator.state = archive["rng"]["numpy"]
        self.buffer.load_from_file(os.path.join(os.path.dirname(path), extra["buffer"]))
        self.log_status(f"Resumed joint training at step {run['step']} from {path}")
        if env.done:
            return None
        return env.observe()

    def _finish(self):
        cfg = self.config
        if self.run_dir:
            self.emit_metric(cfg.total_env_steps, "wall_clock_s", time.time() - self.started)
            save_checkpoint(self._checkpoint_path("final.pt"), self.model, cfg, optimizers=self.optimizers(),
                            step=cfg.total_env_steps, extra={"agent": self.agent.state_dict()})
            self.log.meta["checkpoints"].append(self._checkpoint_path("final.pt"))
            self.save_run_files()

    # ------------------------------------------------------------------
    # Pipelined variant: rollout worker on the thread pool
    # ------------------------------------------------------------------

    class RolloutWorker(QRunnable):
        """Collects transitions with a periodically refreshed policy snapshot"""

        def __init__(self, outer, env, seed, total_steps):
            super().__init__()
            self.setAutoDelete(False)
            self.outer = outer
            self.env = env
            self.rng = np.random.default_rng(seed)
            self.total_steps = total_steps
            self.policy = outer.agent.snapshot(seed)
            self.steps_done = 0
            self.finished = False
            self.error = None
            self.episodes = []
            self.lock = threading.Lock()

        def run(self):
            cfg = self.outer.config
            try:
                obs = self.env.reset(seed=int(self.rng.integers(2 ** 31)))
                episode_return = 0.0
                for step in range(self.total_steps):
                    if step < cfg.seed_steps:
                        action = self.rng.uniform(-1.0, 1.0, size=cfg.action_dim)
                    else:
                        action = self.policy.act(obs, sample=True)
                    next_obs, reward, done, info = self.env.step(action)
                    self.outer.buffer.add(obs, action, reward, next_obs, info["terminal"])
                    episode_return += reward
                    obs = next_obs
                    if done:
                        with self.lock:
                            self.episodes.append((step + 1, episode_return, float(info["success"])))
                        episode_return = 0.0
                        obs = self.env.reset(seed=int(self.rng.integers(2 ** 31)))
                    self.steps_done = step + 1
            except Exception as e:
                self.error = e
                print(f"ERROR [RolloutWorker] {e}")
            finally:
                self.finished = True

        def drain_episodes(self):
            with self.lock:
                episodes, self.episodes = self.episodes, []
            return episodes

    def _joint_train_pipelined(self, env, snapshot_every=50):
        cfg = self.config
        self.log.meta["deterministic"] = False
        rng = np.random.default_rng(cfg.seed)
        worker = self.RolloutWorker(self, env, int(rng.integers(2 ** 31)), cfg.total_env_steps)
        pool = QThreadPool()
        pool.start(worker)
        self.log_status("Pipelined joint training started (non-deterministic)")

        updates = 0
        last_step = 0
        while True:
            for step, episode_return, succeeded in worker.drain_episodes():
                last_step = max(last_step, step)
                self.emit_metric(last_step, "episode_return", episode_return)
                self.emit_metric(last_step, "episode_success", succeeded)

            collected = worker.steps_done
            due = collected - max(cfg.seed_steps - 1, 0)
            if updates < due and len(self.buffer) >= cfg.batch_size:
                step = max(last_step, max(cfg.seed_steps, updates + cfg.seed_steps))
                last_step = step
                self._train_step(step - 1, rng)
                updates += 1
                if updates % snapshot_every == 0:
                    worker.policy = self.agent.snapshot(int(rng.integers(2 ** 31)))
                if cfg.eval_every and step % cfg.eval_every == 0:
                    self.evaluate_snapshot(step)
            elif worker.finished:
                break
            else:
                time.sleep(0.001)

        pool.waitForDone()
        if worker.error is not None:
            raise worker.error
        self._finish()
        return ParamSet.from_model(self.model), self.log


# ---------------------------------------------------------------------------
# Seed fan-out and ablations
# ---------------------------------------------------------------------------

class SeedJob(QRunnable):
    def __init__(self, fn, config, results, errors):
        super().__init__()
        self.fn = fn
        self.config = config
        self.results = results
        self.errors = errors

    def run(self):
        try:
            self.results[self.config.seed] = self.fn(self.config)
        except Exception as e:
            print(f"ERROR [SeedJob] seed {self.config.seed}: {e}")
            self.errors[self.config.seed] = e


def run_seeds(config, seeds, fn, parallel=True):
    """
    Run fn(config-with-seed) for every seed, each on its own pool thread

    Returns:
        OrderedDict seed -> result, in seed order
    """
    seeds = list(seeds)
    results, errors = {}, {}
    if parallel and len(seeds) > 1:
        pool = QThreadPool()
        pool.setMaxThreadCount(len(seeds))
        for seed in seeds:
            pool.start(SeedJob(fn, config.copy(seed=seed), results, errors))
        pool.waitForDone()
    else:
        for seed in seeds:
            SeedJob(fn, config.copy(seed=seed), results, errors).run()
    if errors:
        seed, error = sorted(errors.items())[0]
        raise error
    return OrderedDict((seed, results[seed]) for seed in seeds)


def cell_id(lambda_ft, pretrain_3d, freeze_encoder, seed):
    return f"lft{lambda_ft:g}_pre{int(pretrain_3d)}_frz{int(freeze_encoder)}_s{seed}"


def run_ablation(base_config, grid, manifests=None, out_dir=None):
    """
    Joint-train every cell of lambda_ft x pretrain x freeze x seeds

    Args:
        base_config: RunConfig shared by all cells
        grid: dict with lists under "lambda_ft", "pretrain_3d", "freeze_encoder",
            "seeds"; missing keys fall back to the base config value
        manifests: Pretraining dataset (needed when any cell pretrains)
        out_dir: Optional directory; each cell writes into out_dir/<cell id>

    Returns:
        OrderedDict cell id -> TrainLog
    """
    if not grid:
        raise ValueError("ablation grid is empty")
    lambdas = list(grid.get("lambda_ft", [base_config.lambda_ft]))
    pretrains = list(grid.get("pretrain_3d", [base_config.pretrain_3d]))
    freezes = list(grid.get("freeze_encoder", [base_config.freeze_encoder]))
    seeds = list(grid.get("seeds", [base_config.seed]))
    if not (lambdas and pretrains and freezes and seeds):
        raise ValueError("ablation grid has an empty axis")

    pretrained = {}
    logs = OrderedDict()
    for lambda_ft, pretrain_3d, freeze, seed in itertools.product(lambdas, pretrains, freezes, seeds):
        cfg = base_config.copy(lambda_ft=lambda_ft, pretrain_3d=pretrain_3d, freeze_encoder=freeze, seed=seed,
                               pretrain_checkpoint="")
        name = cell_id(lambda_ft, pretrain_3d, freeze, seed)
        print(f"[Ablation] Running cell {name}")

        init = None
        if pretrain_3d:
            if seed not in pretrained:
                if not manifests:
                    raise EmptyDatasetError("pretraining cells need a dataset")
                pre_dir = os.path.join(out_dir, f"pretrain_s{seed}") if out_dir else None
                pretrained[seed] = Trainer(base_config.copy(seed=seed), run_dir=pre_dir).pretrain(manifests)
            init = pretrained[seed]

        trainer = Trainer(cfg, run_dir=os.path.join(out_dir, name) if out_dir else None)
        env = ManipulationEnv(cfg.task, cfg.phi, cfg.image_size, seed=seed)
        _, log = trainer.joint_train(env, init_params=init)
        log.meta["cell_id"] = name
        logs[name] = log
    return logs
