import os
from pathlib import Path
from typing import Dict, Optional

from dotenv import dotenv_values, load_dotenv

from errors import InvalidInputError

# Load environment variables
load_dotenv()

# Process-level configuration
DEFAULT_SEED = int(os.getenv("SALDIST_SEED", "0"))
DEFAULT_JOBS = int(os.getenv("SALDIST_JOBS", "1"))
VERBOSE = os.getenv("SALDIST_VERBOSE", "false").lower() == "true"
METRICS_FILE: Optional[str] = os.getenv("SALDIST_METRICS_FILE") or None

# Config-file key -> option name, per command.
# Only the namespaces a command reads are listed; flags override these.
COMMAND_CONFIG_KEYS: Dict[str, Dict[str, str]] = {
    "synth": {
        "synth.n_images": "n_images",
        "synth.height": "height",
        "synth.width": "width",
        "synth.blobs_min": "blobs_min",
        "synth.blobs_max": "blobs_max",
        "synth.fixations_per_image": "fixations_per_image",
        "synth.center_bias_weight": "center_bias_weight",
        "synth.noise_sigma": "noise_sigma",
        "synth.channels": "channels",
        "synth.seed": "seed",
        "gt.kernel_width": "kernel_width",
        "gt.sigma": "sigma",
    },
    "gtgen": {
        "gt.preset": "preset",
        "gt.kernel_width": "kernel_width",
        "gt.sigma": "sigma",
    },
    "train": {
        "train.base_lr": "base_lr",
        "train.momentum": "momentum",
        "train.weight_decay": "weight_decay",
        "train.batch_size": "batch_size",
        "train.epochs": "epochs",
        "train.loss": "loss",
        "train.seed": "seed",
        "train.frozen_prefix": "frozen_prefix",
        "train.snapshot_every": "snapshot_every",
    },
    "eval": {
        "eval.n_splits": "n_splits",
        "eval.n_neg": "n_neg",
        "eval.emd_grid": "emd_grid",
        "eval.seed": "seed",
    },
    "postprocess": {
        "post.blur_sigma": "blur_sigma",
        "post.bias_weight": "bias_weight",
        "post.bias_sigma": "bias_sigma",
    },
    "lossbench": {
        "train.base_lr": "base_lr",
        "train.momentum": "momentum",
        "train.weight_decay": "weight_decay",
        "train.batch_size": "batch_size",
        "train.epochs": "epochs",
        "synth.n_images": "n_train",
        "synth.height": "height",
        "synth.width": "width",
        "gt.kernel_width": "kernel_width",
        "gt.sigma": "sigma",
    },
}

KNOWN_NAMESPACES = ("gt", "post", "train", "synth", "eval")


def load_config_file(path: Path) -> Dict[str, str]:
    """
    Parse a key=value config file.

    Args:
        path: File with one `namespace.key=value` entry per line

    Returns:
        Raw string values keyed by dotted name

    Raises:
        InvalidInputError: If the file is missing or a key has no known namespace
    """
    if not Path(path).is_file():
        raise InvalidInputError(f"Config file not found: {path}")

    values = dotenv_values(path)
    for key in values:
        namespace = key.split(".", 1)[0]
        if "." not in key or namespace not in KNOWN_NAMESPACES:
            raise InvalidInputError(
                f"Unknown config key '{key}'. "
                f"Keys must be namespaced: {', '.join(KNOWN_NAMESPACES)}"
            )
    return {key: value for key, value in values.items() if value is not None}


def command_defaults(config: Dict[str, str], command: str) -> Dict[str, str]:
    """
    Translate config-file entries into a click default map for one command.

    A key no command understands is rejected; keys meant for other
    commands are ignored so one file can drive a whole workflow.
    """
    known = {key for keys in COMMAND_CONFIG_KEYS.values() for key in keys}
    mapping = COMMAND_CONFIG_KEYS.get(command, {})

    defaults = {}
    for key, value in config.items():
        if key not in known:
            raise InvalidInputError(f"Unknown config key '{key}'")
        if key in mapping:
            defaults[mapping[key]] = value
    return defaults
