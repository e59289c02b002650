import os

import torch

from run_config import DATA_ROOT_ENV, ConfigError, RunConfig


DEFAULT_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "run_settings.cfg")
DEFAULT_OUT = "out"


def parse_float_list(text, name="list"):
    """'15,30,45' -> [15.0, 30.0, 45.0]"""
    try:
        values = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(name, f"expected comma-separated numbers, got {text!r}")
    if not values:
        raise ConfigError(name, "list is empty")
    return values


def parse_int_list(text, name="list"):
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(name, f"expected comma-separated integers, got {text!r}")
    if not values:
        raise ConfigError(name, "list is empty")
    return values


def add_config_arguments(parser):
    parser.add_argument("--config", default=None, help="key = value settings file (default: run_settings.cfg)")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting; repeatable, wins over the file")
    parser.add_argument("--seed", type=int, default=None, help="run seed")
    parser.add_argument("--seeds", default=None, help="comma-separated seeds to fan out")
    parser.add_argument("--out", default=DEFAULT_OUT, help="output directory for run directories")


def load_config(args):
    """Defaults, then the config file, then --override items, then --seed"""
    path = args.config
    if path is None and os.path.isfile(DEFAULT_CONFIG):
        path = DEFAULT_CONFIG
    config = RunConfig.load_from_file(path) if path else RunConfig()
    config.apply_overrides(args.override)
    if args.seed is not None:
        config.update({"seed": args.seed})
    if not config.data_root and os.environ.get(DATA_ROOT_ENV):
        config.update({"data_root": os.environ[DATA_ROOT_ENV]})
    # process-wide; set once before any seed threads start
    torch.set_num_threads(max(1, config.threads))
    return config


def seeds_for(args, config):
    if getattr(args, "seeds", None):
        return parse_int_list(args.seeds, "seeds")
    return [config.seed]


def run_dir_for(args, config):
    return os.path.join(args.out, config.run_id())


def prepare_run_dir(args, config):
    """Create out/<run-id>/ with a complete config snapshot"""
    run_dir = run_dir_for(args, config)
    os.makedirs(run_dir, exist_ok=True)
    config.save_to_file(os.path.join(run_dir, "config.cfg"))
    print(f"[cli] Run directory {run_dir}")
    return run_dir
