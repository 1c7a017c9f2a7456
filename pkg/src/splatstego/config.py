"""Run configuration: TOML in, validated and frozen, TOML lock out.

Every field defaults to the values hard-wired into the module defaults;
unknown sections or keys are rejected so a typo cannot silently fall back.
The effective configuration is echoed as config.lock.toml into each output
directory, and re-feeding a lock file reproduces the run byte for byte.
"""

from __future__ import annotations

import copy
import json

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .bitcodec import MODE_FLOATBITS, MODE_QUANTIZED, BitPlan, QuantParams
from .errors import ConfigError
from .hash_encoding import HashGridConfig
from .opacity_mapping import MappingTrainConfig
from .training import TrainConfig

DEFAULTS = {
    "bitplan": {
        "mode": MODE_QUANTIZED,   # or float-bit-pattern (paper-parity, k=17, gamma=32)
        "k": 13,
        "gamma_bits": 24,
        "graded": True,
    },
    "quant": {
        "c_min": -8.0,
        "delta": 2.0 ** -20,
        "auto_fit": True,
    },
    "hashgrid": {
        "levels": 16,
        "r_min": 16,
        "r_max": 1024,
        "table_size": 65536,
        "feature_dim": 4,
        "always_hash": False,
    },
    "mlp": {
        "epochs": 4000,
        "lr": 5e-3,
    },
    "train": {
        "iterations": 500,
        "lambda_message": 1.0,
        "lambda_cons": 0.02,
        "ssim_weight": 0.2,
        "lr_opacity": 0.05,
        "lr_sh_dc": 0.0025,
        "lr_sh_rest": 0.000125,
        "vis_interval": 100,
        "init_opacity": 0.1,
        "seed": 0,
    },
    "attack": {
        "kind": "opacity-prune",
        "ratio": 0.3,
        "sigma": 0.005,
        "seed": 0,
    },
    "io": {
        "geometry_ply": "",
        "background": [0.0, 0.0, 0.0],
        "threads": 1,
    },
}


class RunConfig:
    """Validated two-level configuration document."""

    def __init__(self, data: dict = None):
        self.data = copy.deepcopy(DEFAULTS)
        if data:
            self._merge(data)

    def _merge(self, data: dict):
        for section, values in data.items():
            if section not in self.data:
                raise ConfigError(f"unknown config section [{section}]")
            if not isinstance(values, dict):
                raise ConfigError(f"[{section}] must be a table")
            for key, value in values.items():
                if key not in self.data[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                default = self.data[section][key]
                value = _coerce(section, key, value, default)
                self.data[section][key] = value

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    def set_override(self, dotted: str, raw: str):
        """Apply a 'section.key=value' command-line override."""
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        try:
            parsed = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            parsed = raw  # bare string
        self._merge({section: {key: parsed}})

    # --- ingredient builders ---

    def bit_plan(self) -> BitPlan:
        b = self.data["bitplan"]
        return BitPlan(k=b["k"], n=16, gamma_bits=b["gamma_bits"], mode=b["mode"],
                       graded=b["graded"]).validate()

    def quant_params(self) -> QuantParams:
        q = self.data["quant"]
        gamma = self.data["bitplan"]["gamma_bits"]
        return QuantParams(c_min=q["c_min"], delta=q["delta"],
                           gamma_bits=gamma if gamma in (24, 32) else 24)

    def hash_grid_config(self) -> HashGridConfig:
        h = self.data["hashgrid"]
        return HashGridConfig(levels=h["levels"], r_min=h["r_min"], r_max=h["r_max"],
                              table_size=h["table_size"], feature_dim=h["feature_dim"],
                              always_hash=h["always_hash"], seed=self.data["train"]["seed"])

    def mapping_config(self) -> MappingTrainConfig:
        m = self.data["mlp"]
        return MappingTrainConfig(epochs=m["epochs"], lr=m["lr"],
                                  seed=self.data["train"]["seed"])

    def train_config(self, threads: int = None) -> TrainConfig:
        t = self.data["train"]
        return TrainConfig(
            iterations=t["iterations"], lambda_message=t["lambda_message"],
            lambda_cons=t["lambda_cons"], ssim_weight=t["ssim_weight"],
            lr_opacity=t["lr_opacity"], lr_sh_dc=t["lr_sh_dc"],
            lr_sh_rest=t["lr_sh_rest"], vis_interval=t["vis_interval"],
            init_opacity=t["init_opacity"], seed=t["seed"],
            background=tuple(self.data["io"]["background"]),
            threads=self.threads() if threads is None else threads,
        )

    def threads(self) -> int:
        return int(self.data["io"]["threads"])

    def to_toml(self) -> str:
        lines = []
        for section in DEFAULTS:
            lines.append(f"[{section}]")
            for key in DEFAULTS[section]:
                lines.append(f"{key} = {_toml_value(self.data[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def write_lock(self, path):
        with open(path, "w") as f:
            f.write(self.to_toml())


def _coerce(section, key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be an integer")
        if isinstance(value, float):
            if value != int(value):
                raise ConfigError(f"{section}.{key} must be an integer")
            value = int(value)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"{section}.{key} must be a list of {len(default)} numbers")
        return [float(v) for v in value]
    raise ConfigError(f"unsupported config type for {section}.{key}")


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {type(v)} to TOML")


def load_config(path=None, overrides=()) -> RunConfig:
    """Parse, validate and freeze a configuration document."""
    data = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    cfg = RunConfig(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        cfg.set_override(dotted.strip(), raw.strip())
    return cfg
