import csv
import os

import evaluation
from commands.common import add_config_arguments, load_config, parse_float_list, prepare_run_dir
from nets import VoxelRepNet, load_checkpoint, read_checkpoint
from run_config import RunConfig
from worldsim import ManipulationEnv


MODES = ("synth", "pose", "policy")


def load_model(config, checkpoint):
    """
    Build a VoxelRepNet, taking shapes from the checkpoint's own config when given

    Returns:
        (model, config)
    """
    if checkpoint:
        archive = read_checkpoint(checkpoint)
        saved = RunConfig(archive["config"])
        config = saved.copy(seed=config.seed, phi=config.phi, task=saved.task)
        model = VoxelRepNet(config)
        load_checkpoint(checkpoint, model, config)
        print(f"[eval] Loaded {checkpoint} (step {archive['step']})")
    else:
        print("Warning: no --checkpoint given, evaluating freshly initialized weights")
        model = VoxelRepNet(config)
    model.eval()
    return model, config


class EvaluateCommand:
    """View synthesis, pose estimation and policy success evaluations"""

    name = "eval"
    help = "evaluate a trained model"

    def setup_parser(self, parser):
        add_config_arguments(parser)
        parser.add_argument("--mode", choices=MODES, required=True)
        parser.add_argument("--checkpoint", default=None, help="checkpoint archive to evaluate")
        parser.add_argument("--phi-d", default="15,30,45,60", help="comma-separated dynamic camera angles")
        parser.add_argument("--n-pairs", type=int, default=50, help="view pairs per angle (synth)")
        parser.add_argument("--traj-len", type=int, default=10, help="timesteps per trajectory (pose)")
        parser.add_argument("--trials", type=int, default=10, help="episodes (policy)")
        parser.add_argument("--variant", default="model", help="row label in the pose report")
        parser.add_argument("--oracle", action="store_true", help="use ground-truth poses (pose)")

    def run(self, args):
        config = load_config(args)
        model, config = load_model(config, args.checkpoint)
        run_dir = prepare_run_dir(args, config)
        env = ManipulationEnv(config.task, config.phi, config.image_size, seed=config.seed)

        if args.mode == "synth":
            report = evaluation.eval_synthesis(model, env, parse_float_list(args.phi_d, "phi-d"), args.n_pairs,
                                               config.seed, lambda_ft=config.lambda_ft)
            path = os.path.join(run_dir, "synthesis.csv")
        elif args.mode == "pose":
            report = evaluation.eval_pose(model, env, parse_float_list(args.phi_d, "phi-d"), args.traj_len,
                                          config.seed, variant=args.variant, oracle=args.oracle)
            path = os.path.join(run_dir, "pose.csv")
        else:
            episodes = evaluation.evaluate_policy_episodes(model, env, args.trials, config.seed)
            path = os.path.join(run_dir, "policy.csv")
            with open(path, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["task", "n_trials", "success_rate", "grasp_rate"])
                writer.writerow([config.task, episodes.n_trials, repr(episodes.success_rate),
                                 repr(episodes.grasp_rate)])
            print(f"[eval] {episodes}")
            print(f"[eval] Wrote {path}")
            return 0

        report.save_to_file(path)
        print(f"[eval] Wrote {len(report)} rows to {path}")
        return 0
