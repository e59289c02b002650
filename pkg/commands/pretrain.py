from commands.common import add_config_arguments, load_config, prepare_run_dir, seeds_for
from dataio import scan_dataset
from trainer import Trainer, run_seeds


class PretrainCommand:
    """Object-centric 3D pretraining on an orbit dataset"""

    name = "pretrain"
    help = "pretrain the 3D representation on multi-view orbits"

    def setup_parser(self, parser):
        add_config_arguments(parser)
        parser.add_argument("--data", default=None, help="dataset root (default: data_root / VOXREP_DATA_ROOT)")
        parser.add_argument("--resume", default=None, help="pretraining checkpoint to continue from")

    def run(self, args):
        config = load_config(args)
        if args.data:
            config.update({"data_root": args.data})
        manifests = scan_dataset(config.data_root)
        print(f"[pretrain] {len(manifests)} sequences under {config.data_root}")

        def job(cfg):
            trainer = Trainer(cfg, run_dir=prepare_run_dir(args, cfg))
            params = trainer.pretrain(manifests, resume=args.resume)
            print(f"[pretrain] seed {cfg.seed}: final loss {trainer.log.last('pretrain_recon_loss')}")
            return params

        run_seeds(config, seeds_for(args, config), job)
        return 0
