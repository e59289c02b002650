import copy
import difflib
import hashlib
import json
import math
import os


CONFIG_VERSION = "2.0"

TASK_ACTION_DIMS = {"reach": 3, "push": 2, "lift": 4}

# End-effector position + gripper aperture
ROBOT_STATE_DIM = 4

DATA_ROOT_ENV = "VOXREP_DATA_ROOT"

DEFAULT_SETTINGS = {
    # Experiment
    "task": "reach",
    "seed": 0,
    "phi": 30.0,
    "total_env_steps": 100000,
    "seed_steps": 1000,
    "device": "cpu",
    "threads": 1,
    "data_root": "",
    "pretrain_checkpoint": "",

    # Mode flags
    "pretrain_3d": True,
    "finetune_3d": True,
    "freeze_encoder": False,
    "update_posenet": True,
    "rl_enabled": True,
    "pipelined": False,

    # 3D objective
    "lambda_ft": 0.01,
    "lambda_l1": 1.0,
    "pretrain_steps": 5000,
    "pretrain_lr": 1e-3,
    "pretrain_batch": 16,
    "batch_3d": 16,
    "max_gap": 10,
    "recent_window": 10000,

    # SAC
    "lr_rl": 1e-3,
    "gamma": 0.99,
    "tau": 0.01,
    "alpha_init": 0.1,
    "batch_size": 128,
    "buffer_capacity": 100000,

    # Networks
    "image_size": 84,
    "encoder_variant": "resnet6",
    "enc_channels": 64,
    "d_split": 8,
    "depth_upsample": 2,
    "voxel_channels": 16,
    "dec_channels": 64,
    "posenet_channels": 32,
    "latent_dim": 50,
    "hidden_dim": 256,
    "log_std_min": -10.0,
    "log_std_max": 2.0,
    "angle_max": math.pi / 2,
    "t_max": 0.5,
    "zero_translation": False,

    # Bookkeeping
    "checkpoint_every": 5000,
    "eval_every": 10000,
    "eval_trials": 10,
    "log_every": 1,
}

# Keys that change parameter shapes; checkpoints must agree on these
NET_SHAPE_KEYS = (
    "image_size", "encoder_variant", "enc_channels", "d_split", "depth_upsample",
    "voxel_channels", "dec_channels", "posenet_channels", "latent_dim", "hidden_dim",
)

ENCODER_VARIANTS = ("resnet6", "resnet10", "conv4")


class ConfigError(ValueError):
    """Invalid configuration; `key` names the offending setting"""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def _parse_bool(key, text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(key, f"expected a boolean, got {text!r}")


def coerce_value(key, value):
    """
    Convert a raw value to the type of the key's default

    Args:
        key: Setting name (must exist in DEFAULT_SETTINGS)
        value: Raw value (string from a .cfg file or override, or JSON value)

    Returns:
        Value with the default's type
    """
    if key not in DEFAULT_SETTINGS:
        closest = difflib.get_close_matches(key, DEFAULT_SETTINGS.keys(), n=1)
        hint = f" (did you mean '{closest[0]}'?)" if closest else ""
        raise ConfigError(key, f"unknown config key{hint}")

    default = DEFAULT_SETTINGS[key]
    try:
        if isinstance(default, bool):
            return value if isinstance(value, bool) else _parse_bool(key, value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(float(value)) if isinstance(value, str) and "e" in value.lower() else int(value)
        if isinstance(default, float):
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError):
        raise ConfigError(key, f"cannot convert {value!r} to {type(default).__name__}")


def parse_cfg_text(text, source="<config>"):
    """
    Parse flat `key = value` text with `#` comments

    Returns:
        Dictionary of raw string values
    """
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"{source} line {line_no}: expected key = value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


class RunConfig:
    """
    All hyperparameters of a run. Defaults come from DEFAULT_SETTINGS, are
    updated from a file, then from command-line overrides.
    """

    def __init__(self, settings=None):
        self.settings = copy.deepcopy(DEFAULT_SETTINGS)
        if not self.settings["data_root"]:
            self.settings["data_root"] = os.environ.get(DATA_ROOT_ENV, "")
        if settings:
            self.update(settings)

    def __getattr__(self, name):
        settings = self.__dict__.get("settings")
        if settings is not None and name in settings:
            return settings[name]
        raise AttributeError(name)

    def __getitem__(self, key):
        return self.settings[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.settings == other.settings

    def update(self, values):
        """Merge values (coerced to default types); unknown keys raise ConfigError"""
        for key, value in values.items():
            self.settings[key] = coerce_value(key, value)
        self.validate()
        return self

    def copy(self, **changes):
        clone = RunConfig()
        clone.settings = copy.deepcopy(self.settings)
        if changes:
            clone.update(changes)
        return clone

    def apply_overrides(self, overrides):
        """
        Apply `key=value` strings; these win over file values

        Args:
            overrides: Iterable of "key=value" strings
        """
        parsed = {}
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(item, "override must look like key=value")
            key, value = item.split("=", 1)
            parsed[key.strip()] = value.strip()
        return self.update(parsed)

    def validate(self):
        s = self.settings
        if s["task"] not in TASK_ACTION_DIMS:
            raise ConfigError("task", f"unknown task {s['task']!r}")
        if s["lambda_ft"] < 0:
            raise ConfigError("lambda_ft", "must be >= 0")
        if s["lambda_l1"] < 0:
            raise ConfigError("lambda_l1", "must be >= 0")
        if s["lr_rl"] <= 0:
            raise ConfigError("lr_rl", "must be > 0")
        if not 0.0 <= s["gamma"] < 1.0:
            raise ConfigError("gamma", "must lie in [0, 1)")
        if not 0.0 < s["tau"] <= 1.0:
            raise ConfigError("tau", "must lie in (0, 1]")
        if s["alpha_init"] <= 0:
            raise ConfigError("alpha_init", "must be > 0")
        if s["phi"] < 0:
            raise ConfigError("phi", "must be >= 0")
        if s["image_size"] < 4 or s["image_size"] % 4:
            raise ConfigError("image_size", "must be a positive multiple of 4")
        if s["encoder_variant"] not in ENCODER_VARIANTS:
            raise ConfigError("encoder_variant", f"expected one of {ENCODER_VARIANTS}")
        if s["d_split"] < 1 or s["enc_channels"] % s["d_split"]:
            raise ConfigError("d_split", "enc_channels must be divisible by d_split")
        if s["buffer_capacity"] < 1:
            raise ConfigError("buffer_capacity", "must be >= 1")
        if s["batch_size"] < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if s["log_std_min"] >= s["log_std_max"]:
            raise ConfigError("log_std_min", "must be below log_std_max")
        return self

    # ---- derived quantities -------------------------------------------------

    @property
    def lr_3d(self):
        """3D-objective learning rate: lambda_ft x lr_rl"""
        return self.settings["lambda_ft"] * self.settings["lr_rl"]

    @property
    def action_dim(self):
        return TASK_ACTION_DIMS[self.settings["task"]]

    @property
    def state_dim(self):
        return ROBOT_STATE_DIM

    @property
    def feature_size(self):
        return self.settings["image_size"] // 4

    @property
    def voxel_dims(self):
        """(C', D, H, W) of the lifted volume"""
        hw = 2 * self.feature_size
        return (self.settings["voxel_channels"],
                self.settings["d_split"] * self.settings["depth_upsample"], hw, hw)

    # ---- identity -----------------------------------------------------------

    def to_dict(self):
        return copy.deepcopy(self.settings)

    def fingerprint(self, keys=NET_SHAPE_KEYS, include_actions=True):
        """Hash of the settings that determine parameter shapes"""
        payload = {key: self.settings[key] for key in keys}
        if include_actions:
            payload["action_dim"] = self.action_dim
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()

    def config_hash(self):
        blob = json.dumps(self.settings, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:10]

    def run_id(self, seed=None):
        seed = self.settings["seed"] if seed is None else seed
        return f"{self.config_hash()}-s{seed}"

    # ---- file IO ------------------------------------------------------------

    @classmethod
    def load_from_file(cls, filename):
        """
        Load settings from a .cfg (key = value) or .json file

        Args:
            filename: Path to the settings file

        Returns:
            RunConfig with file values over defaults
        """
        try:
            with open(filename, "r") as f:
                text = f.read()
        except OSError as e:
            raise ConfigError("config", f"cannot read {filename}: {e}")

        if filename.endswith(".json"):
            try:
                values = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError("config", f"{filename} is not valid JSON: {e}")
            values.pop("version", None)
        else:
            values = parse_cfg_text(text, source=filename)
            values.pop("version", None)

        config = cls()
        config.update(values)
        print(f"[RunConfig] Loaded {len(values)} settings from {filename}")
        return config

    def save_to_file(self, filename):
        """
        Write a complete flat snapshot of the settings

        Args:
            filename: Target path; .json writes JSON, anything else key = value text
        """
        try:
            directory = os.path.dirname(filename)
            if directory:
                os.makedirs(directory, exist_ok=True)
            with open(filename, "w") as f:
                if filename.endswith(".json"):
                    json.dump(dict(self.settings, version=CONFIG_VERSION), f, indent=2, sort_keys=True)
                else:
                    f.write(f"# run configuration snapshot\nversion = {CONFIG_VERSION}\n")
                    for key in sorted(self.settings):
                        value = self.settings[key]
                        if isinstance(value, float):
                            value = repr(value)
                        f.write(f"{key} = {value}\n")
            return True
        except Exception as e:
            print(f"ERROR [RunConfig] Failed to save config to {filename}: {e}")
            raise
