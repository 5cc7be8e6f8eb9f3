"""Experiment configuration: an INI file with a fixed schema.

Sections are ``scene``, ``registry``, ``network``, ``loss``, ``trainer`` and
``eval``. Every key has a default (see ``SCHEMA``); unknown sections or keys
are errors that name the offending line. A loaded config re-serialises to a
canonical text whose SHA-256 prefix identifies a run.
"""

import configparser
import hashlib
import os
import re
from dataclasses import dataclass

from .consistency import LossConfig
from .errors import ConfigError
from .sceneforge import SceneSpec
from .stylizer import DomainRegistry, Stylizer, default_registry
from .trainer import AdamConfig, NetworkConfig, TrainConfig, resolve_mode


def _floats(text):
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _ints(text):
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _blocks(text):
    return tuple(line.strip() for line in text.splitlines() if line.strip())


def _fmt(value):
    if isinstance(value, tuple):
        if value and isinstance(value[0], str):
            return "\n" + "\n".join(f"    {v}" for v in value) if value else ""
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


# section -> key -> (parser, default, description)
SCHEMA = {
    "scene": {
        "width": (int, 64, "image width in pixels"),
        "height": (int, 64, "image height in pixels"),
        "num_classes": (int, 6, "label classes painted by the scene renderer"),
        "layout_seed": (int, 0, "seed for scene layouts"),
        "clutter": (float, 1.0, "scales the number of buildings, trees and cars"),
        "pixel_noise": (float, 0.03, "std-dev of per-pixel sensor noise"),
        "n_train": (int, 200, "source-domain training scenes"),
        "n_val": (int, 40, "scenes rendered in each validation domain"),
        "n_test": (int, 40, "scenes rendered in each held-out test domain"),
    },
    "registry": {
        "k": (int, 15, "number of training stylizers used (prefix of the list)"),
        "train": (_blocks, (), "training stylizer blocks 'id: key=value, ...'; empty = built-in set"),
        "test": (_blocks, (), "held-out test stylizer blocks; empty = built-in set"),
        "validation": (_blocks, (), "validation stylizer blocks; empty = built-in set"),
    },
    "network": {
        "channels_base": (int, 8, "channels of the first encoder stage"),
        "depth": (int, 3, "number of stride-2 encoder stages"),
        "tap_count": (int, 5, "blocks (ending at the logits) that feed consistency losses"),
        "upsample": (str, "bilinear", "decoder upsampling mode"),
    },
    "loss": {
        "lambdas": (_floats, (0.2, 0.4, 0.6, 0.8, 1.0), "PCD weight per tap, shallow to deep"),
        "pci_weight": (float, 0.2, "weight of the crop consistency term (chosen on val_haze)"),
        "beta": (float, 0.005, "global weight of all consistency terms (chosen on val_haze)"),
        "rho_min": (float, 0.5, "smallest crop height ratio"),
        "rho_max": (float, 0.9, "largest crop height ratio"),
        "ignore_index": (int, 255, "label id skipped by the loss and metrics"),
    },
    "trainer": {
        "mode": (str, "full", "baseline | dr | dr_pcd | dr_pci | full"),
        "steps": (int, 2000, "optimisation steps"),
        "batch_images": (int, 16, "images per step; must be a multiple of K+1"),
        "lr": (float, 1e-3, "Adam learning rate"),
        "beta1": (float, 0.9, "Adam first-moment decay"),
        "beta2": (float, 0.999, "Adam second-moment decay"),
        "eps": (float, 1e-8, "Adam epsilon"),
        "init_seed": (int, 0, "parameter initialisation seed"),
        "data_seed": (int, 0, "batch order seed"),
        "crop_seed": (int, 0, "crop sampling seed"),
        "eval_every": (int, 500, "validation cadence in steps (0 = only never)"),
        "crop_resize": (str, "bilinear", "resize mode used to scale crops back to full size"),
    },
    "eval": {
        "domains": (lambda t: tuple(v.strip() for v in t.split(",") if v.strip()), (),
                    "held-out domains to report; empty = all test domains"),
        "seeds": (_ints, (0, 1, 2, 3, 4), "seeds used by the ablation"),
        "workers": (int, 1, "parallel training processes in the ablation"),
    },
}


@dataclass
class ExperimentConfig:
    values: dict  # section -> key -> parsed value
    source: str = None

    def get(self, section, key):
        return self.values[section][key]

    def canonical(self):
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                lines.append(f"{key} = {_fmt(self.values[section][key])}".rstrip())
            lines.append("")
        return "\n".join(lines)

    def hash(self):
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    def with_values(self, **overrides):
        """Copy with ``section__key=value`` overrides applied."""
        values = {s: dict(v) for s, v in self.values.items()}
        for name, value in overrides.items():
            section, _, key = name.partition("__")
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            values[section][key] = value
        return ExperimentConfig(values, self.source)

    # typed views ---------------------------------------------------------------

    def scene_spec(self):
        s = self.values["scene"]
        return SceneSpec(width=s["width"], height=s["height"], num_classes=s["num_classes"],
                         layout_seed=s["layout_seed"], clutter=s["clutter"], pixel_noise=s["pixel_noise"])

    def registry(self):
        r = self.values["registry"]
        base = default_registry()
        train = [Stylizer.from_block(b) for b in r["train"]] or base.train
        test = [Stylizer.from_block(b) for b in r["test"]] or base.test
        validation = [Stylizer.from_block(b) for b in r["validation"]] or base.validation
        if not 0 <= r["k"] <= len(train):
            raise ConfigError(f"registry.k={r['k']} but only {len(train)} training stylizers are defined")
        return DomainRegistry(train[:r["k"]], test, validation)

    def loss_config(self):
        l = self.values["loss"]
        return LossConfig(lambdas=l["lambdas"], pci_weight=l["pci_weight"], beta=l["beta"],
                          rho_range=(l["rho_min"], l["rho_max"]), ignore_index=l["ignore_index"])

    def train_config(self, mode=None):
        t, n = self.values["trainer"], self.values["network"]
        cfg = TrainConfig(
            mode=mode or t["mode"], steps=t["steps"], batch_images=t["batch_images"],
            adam=AdamConfig(t["lr"], t["beta1"], t["beta2"], t["eps"]),
            loss=self.loss_config(),
            network=NetworkConfig(self.values["scene"]["num_classes"], n["channels_base"], n["depth"],
                                  n["tap_count"], n["upsample"]),
            init_seed=t["init_seed"], data_seed=t["data_seed"], crop_seed=t["crop_seed"],
            eval_every=t["eval_every"], crop_resize=t["crop_resize"])
        cfg.validate()
        return cfg


def defaults():
    return ExperimentConfig({s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()})


def _line_of(text, section, key=None):
    current = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[(.+)\]$", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return number
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*[=:]", line, re.I):
            return number
    return None


def parse(text, source="<string>", env=None):
    """Parse config text; ``env`` (default ``os.environ``) may carry DRPC_SEED."""
    parser = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = defaults()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}:{_line_of(text, section)}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}:{_line_of(text, section, key)}: unknown key '{key}' in [{section}]")
            conv = SCHEMA[section][key][0]
            try:
                cfg.values[section][key] = conv(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{source}:{_line_of(text, section, key)}: bad value for "
                                  f"'{section}.{key}': {raw!r} ({exc})") from None
    cfg.source = source
    env = os.environ if env is None else env
    if env.get("DRPC_SEED"):
        try:
            seed = int(env["DRPC_SEED"])
        except ValueError:
            raise ConfigError(f"DRPC_SEED must be an integer, got {env['DRPC_SEED']!r}") from None
        for key in ("init_seed", "data_seed", "crop_seed"):
            cfg.values["trainer"][key] = seed
        cfg.values["eval"]["seeds"] = (seed,)
    # build the typed views once so inconsistent values fail at load time
    resolve_mode(cfg.train_config(), cfg.registry())
    return cfg


def load(path=None, env=None):
    if path is None:
        return parse("", "<defaults>", env)
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read(), path, env)


def describe_schema():
    """Human-readable listing of every key and its default."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_, default, doc) in keys.items():
            lines.append(f"  {key} = {_fmt(default).strip() or '(empty)'}    # {doc}")
    return "\n".join(lines)
