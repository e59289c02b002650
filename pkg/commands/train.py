from commands.common import add_config_arguments, load_config, prepare_run_dir, seeds_for
from dataio import scan_dataset
from trainer import Trainer, run_seeds
from worldsim import ManipulationEnv


class TrainCommand:
    """Joint 3D + SAC training in the two-camera environment"""

    name = "train"
    help = "jointly train the representation and the policy"

    def setup_parser(self, parser):
        add_config_arguments(parser)
        parser.add_argument("--resume", default=None, help="joint-training checkpoint to continue from")

    def run(self, args):
        config = load_config(args)

        def job(cfg):
            run_dir = prepare_run_dir(args, cfg)
            init = None
            if cfg.pretrain_3d and not cfg.pretrain_checkpoint and not args.resume:
                manifests = scan_dataset(cfg.data_root)
                init = Trainer(cfg, run_dir=f"{run_dir}/pretrain").pretrain(manifests)
            trainer = Trainer(cfg, run_dir=run_dir)
            env = ManipulationEnv(cfg.task, cfg.phi, cfg.image_size, seed=cfg.seed)
            _, log = trainer.joint_train(env, init_params=init, resume=args.resume)
            print(f"[train] seed {cfg.seed}: last success rate {log.last('success_rate')}")
            return log

        run_seeds(config, seeds_for(args, config), job)
        return 0
