"""Run configuration: INI sections ``data``, ``selector``, ``supervision``, ``train``, ``eval``.

Values are layered, later layers winning::

    preset defaults < config file < TRACKSEL_<SECTION>_<KEY> environment < --set flags

Unknown sections or keys are rejected at every layer.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields

from .selector import SelectorConfig
from .synth import TEMPLATES, SynthConfig
from .trainer import TrainConfig

ENV_PREFIX = "TRACKSEL_"
SECTIONS = ("data", "selector", "supervision", "train", "eval")
PRESETS = ("paper", "synthetic")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    kind: type
    default: object
    help: str = ""
    reference: bool = False  # default taken from the published setup


def _k(section, name, kind, default, help="", reference=False):
    return Key(section, name, kind, default, help, reference)


_SYNTH = SynthConfig()
_SEL = SelectorConfig()
_TRAIN = TrainConfig()

KEYS: tuple[Key, ...] = (
    _k("data", "scenes", int, _SYNTH.scenes, "synthetic scenes"),
    _k("data", "objects", int, _SYNTH.objects, "objects per scene, 4..12"),
    _k("data", "frames", int, _SYNTH.frames, "frames per scene, 16..32"),
    _k("data", "size", int, _SYNTH.size, "frame side in pixels, 64 or 96"),
    _k("data", "dim", int, _SYNTH.dim, "object token width D"),
    _k("data", "text_dim", int, _SYNTH.text_dim, "text token width"),
    _k("data", "colors", int, _SYNTH.colors, "appearance colours"),
    _k("data", "shapes", int, _SYNTH.shapes, "appearance shapes"),
    _k("data", "noise", float, _SYNTH.noise, "token noise sigma"),
    _k("data", "expressions_per_scene", int, _SYNTH.expressions_per_scene, "expressions per scene"),
    _k("data", "n_background", int, _SYNTH.n_background, "background distractor tracks"),
    _k("data", "background", str, _SYNTH.background, "distractor layout: windows or cells"),
    _k("data", "max_targets", int, _SYNTH.max_targets, "largest referent set per expression"),
    _k("data", "templates", tuple, _SYNTH.templates, f"comma-separated subset of {','.join(TEMPLATES)}"),
    _k("data", "dedup_theta", float, 0.7, "prompt-frame IoU above which a track is dropped", True),
    _k("data", "prompt_frame", int, 0, "frame used for deduplication"),
    _k("selector", "dim", int, _SEL.dim, "model width D"),
    _k("selector", "text_dim", int, _SEL.text_dim, "text embedding width"),
    _k("selector", "layers", int, _SEL.layers, "alignment layers"),
    _k("selector", "heads", int, _SEL.heads, "attention heads"),
    _k("selector", "conv_kernel", int, _SEL.conv_kernel, "motion conv kernel"),
    _k("selector", "conv_stride", int, _SEL.conv_stride, "motion conv stride"),
    _k("selector", "conv_layers", int, _SEL.conv_layers, "motion conv layers"),
    _k("selector", "ffn_mult", int, _SEL.ffn_mult, "FFN hidden width / D"),
    _k("selector", "tau_select", float, _SEL.tau_select, "selection threshold (strict >)", True),
    _k("selector", "fallback_argmax", bool, _SEL.fallback_argmax, "pick the best track when none passes"),
    _k("selector", "use_inter_object", bool, _SEL.use_inter_object, "inter-object attention"),
    _k("selector", "use_motion_attn", bool, _SEL.use_motion_attn, "temporal (motion) attention"),
    _k("selector", "include_background_tokens", bool, _SEL.include_background_tokens, "feed background tracks"),
    _k("supervision", "tau_label", float, _TRAIN.tau_label, "pseudo-label mIoU threshold (strict >)", True),
    _k("supervision", "lambda1", float, _TRAIN.lambda1, "BCE weight", True),
    _k("supervision", "lambda2", float, _TRAIN.lambda2, "alignment loss weight", True),
    _k("supervision", "n_neg", int, _TRAIN.n_neg, "negative anchors", True),
    _k("supervision", "align_sign", float, _TRAIN.align_sign, "+1 pulls positives to the text anchor; -1 flips"),
    _k("train", "epochs", int, _TRAIN.epochs, "training epochs", True),
    _k("train", "lr_init", float, _TRAIN.lr_init, "initial learning rate", True),
    _k("train", "align_warmup_epochs", int, _TRAIN.align_warmup_epochs, "epochs before the alignment loss is switched on"),
    _k("train", "schedule", str, _TRAIN.schedule, "cosine or linear decay"),
    _k("train", "beta1", float, _TRAIN.beta1, "Adam beta1"),
    _k("train", "beta2", float, _TRAIN.beta2, "Adam beta2"),
    _k("train", "adam_eps", float, _TRAIN.adam_eps, "Adam epsilon"),
    _k("train", "weight_decay", float, _TRAIN.weight_decay, "L2 penalty added to the gradient"),
    _k("train", "grad_clip", float, _TRAIN.grad_clip, "global gradient norm clip"),
    _k("train", "seed", int, _TRAIN.seed, "initialisation and shuffling seed"),
    _k("train", "dtype", str, _TRAIN.dtype, "float32 or float64"),
    _k("eval", "jobs", int, 1, "parallel workers for eval/select"),
    _k("eval", "pooling", str, "mean", "token pooling for the similarity analysis: mean or last"),
    _k("eval", "bins", int, 10, "mIoU bins for the similarity analysis"),
)

KEY_INDEX = {(k.section, k.name): k for k in KEYS}

# Desk-scale overrides: a small randomly initialised model needs a larger step.
_SYN_TRAIN = TrainConfig.synthetic()
SYNTHETIC_PRESET = {
    ("data", "dim"): 64,
    ("selector", "dim"): 64,
    ("selector", "heads"): 4,
    **{("train", k): getattr(_SYN_TRAIN, k) for k in ("epochs", "lr_init", "align_warmup_epochs")
       if getattr(_SYN_TRAIN, k) != getattr(_TRAIN, k)},
}


def preset_values(preset: str = "paper") -> dict[tuple[str, str], object]:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {PRESETS}")
    values = {(k.section, k.name): k.default for k in KEYS}
    if preset == "synthetic":
        values.update(SYNTHETIC_PRESET)
    return values


def parse_value(key: Key, raw: str):
    raw = raw.strip()
    try:
        if key.kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if key.kind is tuple:
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return key.kind(raw)
    except ValueError:
        raise ConfigError(f"[{key.section}] {key.name}: cannot parse {raw!r} as {key.kind.__name__}") from None


def _lookup(section: str, name: str, origin: str) -> Key:
    if section not in SECTIONS:
        raise ConfigError(f"{origin}: unknown section [{section}]")
    key = KEY_INDEX.get((section, name))
    if key is None:
        raise ConfigError(f"{origin}: unknown key {name!r} in [{section}]")
    return key


def read_file(path) -> dict[tuple[str, str], object]:
    cp = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {}
    for section in cp.sections():
        for name, raw in cp.items(section):
            key = _lookup(section, name, str(path))
            out[(section, name)] = parse_value(key, raw)
    return out


def read_env(env=None) -> dict[tuple[str, str], object]:
    env = os.environ if env is None else env
    out = {}
    for var, raw in env.items():
        if not var.startswith(ENV_PREFIX):
            continue
        rest = var[len(ENV_PREFIX):].lower()
        section, _, name = rest.partition("_")
        key = _lookup(section, name, f"environment variable {var}")
        out[(section, name)] = parse_value(key, raw)
    return out


def parse_assignments(items) -> dict[tuple[str, str], object]:
    """``section.key=value`` strings from the command line."""
    out = {}
    for item in items or ():
        lhs, sep, raw = item.partition("=")
        section, dot, name = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key = _lookup(section, name, f"override {item!r}")
        out[(section, name)] = parse_value(key, raw)
    return out


@dataclass
class RunConfig:
    values: dict[tuple[str, str], object]
    preset: str = "paper"

    def get(self, section: str, name: str):
        return self.values[(section, name)]

    def section(self, name: str) -> dict:
        return {k: v for (s, k), v in self.values.items() if s == name}

    def synth_config(self) -> SynthConfig:
        d = self.section("data")
        kw = {f.name: d[f.name] for f in fields(SynthConfig) if f.name in d}
        cfg = SynthConfig(**kw)
        try:
            cfg.check()
        except ValueError as exc:
            raise ConfigError(f"[data] {exc}") from None
        return cfg

    def selector_config(self) -> SelectorConfig:
        cfg = SelectorConfig(**self.section("selector"))
        try:
            cfg.check()
        except ValueError as exc:
            raise ConfigError(f"[selector] {exc}") from None
        return cfg

    def train_config(self) -> TrainConfig:
        kw = {**self.section("supervision"), **self.section("train")}
        cfg = TrainConfig(**kw)
        try:
            cfg.check()
        except ValueError as exc:
            raise ConfigError(f"[train/supervision] {exc}") from None
        return cfg

    def check(self) -> None:
        self.synth_config()
        self.selector_config()
        self.train_config()
        if not 0.0 <= self.get("data", "dedup_theta") <= 1.0:
            raise ConfigError("[data] dedup_theta must be in [0, 1]")
        if self.get("eval", "jobs") < 1:
            raise ConfigError("[eval] jobs must be >= 1")
        if self.get("eval", "pooling") not in ("mean", "last"):
            raise ConfigError("[eval] pooling must be 'mean' or 'last'")
        if self.get("eval", "bins") < 1:
            raise ConfigError("[eval] bins must be >= 1")

    def echo(self) -> dict:
        out: dict = {"preset": self.preset}
        for s in SECTIONS:
            out[s] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.section(s).items())}
        return out


def build(path=None, overrides=None, env=None, preset: str = "paper", use_env: bool = True) -> RunConfig:
    values = preset_values(preset)
    if path is not None:
        values.update(read_file(path))
    if use_env:
        values.update(read_env(env))
    values.update(overrides or {})
    cfg = RunConfig(values, preset)
    cfg.check()
    return cfg


def paper_defaults() -> RunConfig:
    return build(preset="paper", use_env=False)


def describe_keys() -> str:
    """One line per key for --help output; reference defaults are flagged."""
    lines = []
    for k in KEYS:
        default = ",".join(k.default) if isinstance(k.default, tuple) else k.default
        tag = " [reference default]" if k.reference else ""
        lines.append(f"  {k.section}.{k.name} = {default}{tag}  {k.help}")
    return "\n".join(lines)
