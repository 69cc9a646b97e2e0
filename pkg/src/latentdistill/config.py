"""Flat ``key = value`` run configuration.

Grammar: one ``key = value`` pair per line; ``#`` starts a comment; blank
lines are ignored; keys are dotted lowercase names from :data:`SCHEMA`.
Lists are comma separated. Booleans accept true/false/1/0/yes/no. ``none``
clears an optional value. Every key can also be given on the command line as
``--key=value``, which overrides the file.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from . import augment
from . import evaluation as E
from . import nets
from .engine import DistillConfig
from .experts import ExpertHyper
from .generator import GenSpec
from .objectives import MttConfig
from .synset import parse_space


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(s: str) -> tuple:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _ints(s: str) -> tuple:
    return tuple(int(p) for p in _list(s))


def _opt(conv):
    def parse(s: str):
        return None if s.strip().lower() == "none" else conv(s)
    parse.__name__ = f"optional {conv.__name__}"
    return parse


# key -> (parser, default, description)
SCHEMA = {
    "run.name": (str, "default", "output subdirectory name"),
    "out.root": (str, "out", "root directory for run outputs"),
    "seeds": (_ints, (0, 1, 2), "seeds for multi-seed commands (sweep-spaces)"),
    "data.path": (_opt(str), None, "GLADDATA file; default <run dir>/dataset.bin"),
    "data.classes": (int, 10, "glyph classes"),
    "data.per_class": (int, 500, "images per class before the 80/20 split"),
    "data.size": (int, 32, "image side (16, 32 or 64)"),
    "data.seed": (int, 0, "dataset seed"),
    "net.depth": (int, 3, "backbone ConvNet depth"),
    "net.width": (int, 64, "backbone ConvNet width"),
    "net.norm": (str, "instance", "backbone normalization"),
    "gen.path": (_opt(str), None, "GLADGENW file; default: randomly initialized generator"),
    "gen.z_dim": (int, 64, "generator z size"),
    "gen.w_dim": (int, 64, "generator style size"),
    "gen.blocks": (int, 4, "synthesis blocks"),
    "gen.base_channels": (int, 128, "channels of the input constant"),
    "gen.seed": (int, 0, "generator init seed"),
    "pretrain.steps": (int, 300, "decoder pretraining steps"),
    "pretrain.lr": (float, 0.01, "decoder pretraining learning rate"),
    "pretrain.batch": (int, 64, "decoder pretraining batch"),
    "experts.path": (_opt(str), None, "GLADTRAJ file; default <run dir>/experts.bin"),
    "experts.count": (int, 2, "number of expert trajectories"),
    "experts.epochs": (int, 15, "epochs per expert"),
    "experts.lr": (float, 0.01, "expert SGD learning rate"),
    "experts.batch": (int, 256, "expert batch size"),
    "experts.seed": (int, 0, "expert seed"),
    "method": (str, "dm", "dc, dm or mtt"),
    "space": (str, "f2", "pixel, wplus or f<n>"),
    "ipc": (int, 1, "images per class"),
    "iterations": (int, 200, "distillation iterations"),
    "latent_lr": (_opt(float), None, "latent learning rate; none = per-method default"),
    "alpha_lr": (float, 1e-5, "learning rate of the synthetic step size"),
    "alpha_init": (float, 0.01, "initial synthetic step size"),
    "optimize_alpha": (_bool, True, "learn the synthetic step size (mtt)"),
    "momentum": (float, 0.5, "latent SGD momentum"),
    "mtt.N": (int, 10, "synthetic steps per iteration"),
    "mtt.M": (int, 2, "expert epochs to match"),
    "mtt.T_plus": (int, 2, "maximum start epoch"),
    "mtt.syn_batch": (_opt(int), None, "synthetic images per inner step; none = all"),
    "mtt.constmem": (_bool, True, "constant-memory trajectory backward"),
    "aug.enabled": (_bool, True, "shared differentiable augmentation"),
    "aug.ops": (_list, augment.OPS, "augmentation ops"),
    "aug.strategy": (str, "all", "all or single_random"),
    "aug.per_image": (_bool, False, "independent draw per image"),
    "init": (str, "auto", "real/noise (pixel) or feedforward/gaussian (latent)"),
    "init.m": (int, 1024, "samples for gaussian latent init moments"),
    "real_batch": (int, 128, "real images per class per iteration (dc, dm)"),
    "dc.outer": (int, 1, "matching updates per sampled network"),
    "dc.inner": (int, 1, "network training steps between matching updates"),
    "dc.layerwise": (_bool, False, "per-layer cosine distance"),
    "gen_batch": (_opt(int), None, "max latents per generator pass"),
    "clamp": (_bool, False, "clamp pixel-space images to [-1, 1]"),
    "strict": (_bool, False, "fail on non-finite values"),
    "dtype": (str, "float64", "float64 or float32 compute"),
    "seed": (int, 0, "distillation seed"),
    "eval.preset": (str, "desk", "desk (50+50 epochs) or full (500+500)"),
    "eval.warmup": (_opt(int), None, "override warm-up epochs"),
    "eval.decay": (_opt(int), None, "override decay epochs"),
    "eval.repeats": (int, 5, "students per architecture"),
    "eval.momentum": (float, 0.9, "student SGD momentum"),
    "eval.weight_decay": (float, 5e-4, "student weight decay"),
    "eval.ema_decay": (float, 0.999, "student EMA decay"),
    "eval.lr.convnet": (float, 0.01, "base lr for convnet students"),
    "eval.lr.altconvnet": (float, 0.01, "base lr for altconvnet students"),
    "eval.lr.mlp": (float, 0.01, "base lr for mlp students"),
    "eval.archs": (_list, ("altconvnet", "mlp"), "unseen evaluation architectures"),
    "eval.augment": (_bool, True, "augment during student training"),
    "eval.seed": (int, 0, "evaluation seed"),
    "synset.path": (_opt(str), None, "GLADSYNS file for eval/export; default <run dir>/synset.bin"),
    "export.columns": (int, 10, "grid columns"),
    "sweep.spaces": (_list, ("pixel", "wplus", "f0", "f1", "f2", "f3", "f4"), "spaces for sweep-spaces"),
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def echo(self) -> str:
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif v is None:
                v = "none"
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def parse_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.match(r"^([A-Za-z][A-Za-z0-9_.]*)\s*=\s*(.*)$", line)
        if not m:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        out[m.group(1)] = m.group(2).strip()
    return out


def build(raw: dict) -> RunConfig:
    """Validate raw string values against the schema and fill defaults."""
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: default for k, (_, default, _) in SCHEMA.items()}
    for key, text in raw.items():
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(text)
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from None
    rc = RunConfig(values)
    validate(rc)
    return rc


def load(text: str = "", overrides: dict | None = None) -> RunConfig:
    raw = parse_text(text)
    raw.update(overrides or {})
    return build(raw)


def net_spec(rc: RunConfig) -> nets.NetSpec:
    return nets.NetSpec(family="convnet", depth=rc["net.depth"], width=rc["net.width"], norm=rc["net.norm"],
                        image_size=rc["data.size"], channels=3, classes=rc["data.classes"])


def eval_archs(rc: RunConfig) -> list:
    out = []
    for name in rc["eval.archs"]:
        kw = dict(image_size=rc["data.size"], channels=3, classes=rc["data.classes"])
        if name == "convnet":
            out.append(net_spec(rc))
        elif name == "altconvnet":
            out.append(nets.altconvnet_spec(**kw))
        elif name == "mlp":
            out.append(nets.mlp_spec(**kw))
        else:
            raise ConfigError(f"eval.archs: unknown architecture {name!r}")
    return out


def gen_spec(rc: RunConfig) -> GenSpec:
    size, blocks = rc["data.size"], rc["gen.blocks"]
    if size % 2 ** blocks:
        raise ConfigError(f"data.size {size} not divisible by 2**gen.blocks")
    return GenSpec(z_dim=rc["gen.z_dim"], w_dim=rc["gen.w_dim"], blocks=blocks, base_size=size // 2 ** blocks,
                   base_channels=rc["gen.base_channels"], out_size=size, classes=rc["data.classes"],
                   seed=rc["gen.seed"])


def expert_hyper(rc: RunConfig) -> ExpertHyper:
    return ExpertHyper(epochs=rc["experts.epochs"], lr=rc["experts.lr"], batch=rc["experts.batch"])


def protocol(rc: RunConfig) -> E.EvalProtocol:
    preset = E.desk_protocol if rc["eval.preset"] == "desk" else E.full_protocol
    p = preset(momentum=rc["eval.momentum"], weight_decay=rc["eval.weight_decay"],
               ema_decay=rc["eval.ema_decay"], repeats=rc["eval.repeats"], augment=rc["eval.augment"])
    kw = {}
    if rc["eval.warmup"] is not None:
        kw["warmup_epochs"] = rc["eval.warmup"]
    if rc["eval.decay"] is not None:
        kw["decay_epochs"] = rc["eval.decay"]
    if kw:
        p = E.EvalProtocol(**{**p.__dict__, **kw})
    return p.with_lr(convnet=rc["eval.lr.convnet"], altconvnet=rc["eval.lr.altconvnet"], mlp=rc["eval.lr.mlp"])


def distill_config(rc: RunConfig, **changes) -> DistillConfig:
    base = dict(
        method=rc["method"], space=rc["space"], ipc=rc["ipc"], iterations=rc["iterations"],
        latent_lr=rc["latent_lr"], alpha_lr=rc["alpha_lr"], alpha_init=rc["alpha_init"],
        optimize_alpha=rc["optimize_alpha"], momentum=rc["momentum"],
        mtt=MttConfig(rc["mtt.N"], rc["mtt.M"], rc["mtt.T_plus"], rc["mtt.syn_batch"]),
        aug=augment.AugSettings(rc["aug.enabled"], rc["aug.ops"], rc["aug.strategy"], rc["aug.per_image"]),
        seed=rc["seed"], net=net_spec(rc), init=rc["init"], init_m=rc["init.m"], real_batch=rc["real_batch"],
        dc_outer=rc["dc.outer"], dc_inner=rc["dc.inner"], dc_layerwise=rc["dc.layerwise"],
        gen_batch=rc["gen_batch"], clamp=rc["clamp"], strict=rc["strict"], mtt_constmem=rc["mtt.constmem"],
        dtype=rc["dtype"],
    )
    base.update(changes)
    return DistillConfig(**base)


def validate(rc: RunConfig):
    """Build every derived object once so errors surface before any work starts."""
    try:
        if rc["eval.preset"] not in ("desk", "full"):
            raise ValueError("eval.preset must be desk or full")
        if rc["data.size"] not in (16, 32, 64):
            raise ValueError("data.size must be 16, 32 or 64")
        if not 2 <= rc["data.classes"] <= 10:
            raise ValueError("data.classes must be in [2, 10]")
        for key in ("data.per_class", "experts.count", "experts.epochs", "experts.batch", "eval.repeats",
                    "pretrain.batch", "export.columns", "real_batch", "dc.outer"):
            if rc[key] < 1:
                raise ValueError(f"{key} must be >= 1")
        if rc["pretrain.steps"] < 0 or rc["dc.inner"] < 0:
            raise ValueError("pretrain.steps and dc.inner must be >= 0")
        if not rc["seeds"]:
            raise ValueError("seeds must list at least one seed")
        if rc["aug.strategy"] not in augment.STRATEGIES:
            raise ValueError(f"aug.strategy must be one of {augment.STRATEGIES}")
        if set(rc["aug.ops"]) - set(augment.OPS):
            raise ValueError(f"aug.ops must be drawn from {augment.OPS}")
        gs = gen_spec(rc)
        distill_config(rc)
        for s in rc["sweep.spaces"]:
            distill_config(rc, space=s)
            parse_space(s, gs.blocks)
        parse_space(rc["space"], gs.blocks)
        protocol(rc)
        eval_archs(rc)
        expert_hyper(rc)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def describe() -> str:
    """Documented key list (used by ``--help-config``)."""
    rows = []
    for key, (parser, default, doc) in SCHEMA.items():
        if isinstance(default, tuple):
            default = ",".join(str(x) for x in default)
        rows.append(f"{key} = {default}    # {doc}")
    return "\n".join(rows) + "\n"
