"""End-to-end desk benchmark on the glyph dataset.

For every method and seed, one synthetic set is distilled in pixel space and
one in an intermediate generator space. Each set trains a fresh backbone
(the distillation ConvNet) and the unseen architectures. A random-real set of
the same size is the baseline.

Run with ``python -m latentdistill.benchmark``; the full default grid takes
about 45 minutes on one core.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import engine as EN
from . import evaluation as E
from . import experts as X
from . import nets
from .augment import AugSettings
from .generator import Generator, GenSpec
from .objectives import MttConfig
from .pretrain import pretrain_generator

# (method, "pixel" | "latent") -> (learning rate, iterations)
DESK_SCHEDULE = {
    ("dm", "pixel"): (1.0, 120), ("dm", "latent"): (0.1, 120),
    ("dc", "pixel"): (20.0, 80), ("dc", "latent"): (5.0, 80),
    ("mtt", "pixel"): (100.0, 80), ("mtt", "latent"): (10.0, 80),
}


@dataclass(frozen=True)
class BenchConfig:
    methods: tuple = ("dc", "dm", "mtt")
    latent_space: str = "f2"
    seeds: tuple = (0, 1, 2)
    per_class: int = 100
    data_seed: int = 0
    pretrain_steps: int = 1000
    pretrain_batch: int = 32
    n_experts: int = 2
    expert_epochs: int = 5
    real_batch: int = 32
    alpha_lr: float = 1e-7
    mtt: MttConfig = MttConfig(N=10, M=2, T_plus=2)
    protocol: E.EvalProtocol = E.desk_protocol(repeats=1)
    schedule: dict = field(default_factory=lambda: dict(DESK_SCHEDULE))
    dtype: str = "float32"

    @property
    def backbone(self) -> nets.NetSpec:
        return nets.convnet_spec(depth=3, width=64)

    @property
    def unseen(self) -> list:
        return [nets.altconvnet_spec(), nets.mlp_spec()]


@dataclass
class BenchResult:
    config: BenchConfig
    backbone: dict = field(default_factory=dict)  # (method, space) -> [acc per seed]
    unseen: dict = field(default_factory=dict)  # (method, space) -> [cross-arch mean per seed]
    per_arch: dict = field(default_factory=dict)  # (method, space) -> {arch: [acc per seed]}
    baseline: list = field(default_factory=list)  # backbone acc of random-real sets per seed
    baseline_unseen: list = field(default_factory=list)
    loss_trend: dict = field(default_factory=dict)  # (method, space) -> [(head median, tail median) per seed]
    seconds: float = 0.0

    def median(self, key) -> float:
        return float(np.median(self.backbone[key]))

    def backbone_check(self, method: str, space: str, classes: int = 10) -> tuple:
        """(passed, median acc, median baseline): >= 1.5x chance and strictly above random-real."""
        acc, base = self.median((method, space)), float(np.median(self.baseline))
        return acc >= 1.5 / classes and acc > base, acc, base

    def latent_wins(self) -> list:
        """Methods whose mean cross-architecture accuracy in latent space is >= pixel space."""
        lat = self.config.latent_space
        return [m for m in self.config.methods
                if np.mean(self.unseen[(m, lat)]) >= np.mean(self.unseen[(m, "pixel")])]

    def decreasing(self) -> dict:
        """Per (method, space): every seed's last-10% loss median is below its first-10% median."""
        return {k: all(tail < head for head, tail in v) for k, v in self.loss_trend.items()}

    def to_markdown(self) -> str:
        lines = ["| method | space | backbone (median) | backbone per seed | unseen cross-arch mean | per arch |",
                 "|---|---|---|---|---|---|"]

        def pct(v):
            return f"{100 * v:.1f}"

        for (m, s), accs in self.backbone.items():
            arch = ", ".join(f"{a} {pct(np.mean(v))}" for a, v in sorted(self.per_arch[(m, s)].items()))
            lines.append(f"| {m} | {s} | {pct(np.median(accs))} | {' / '.join(pct(a) for a in accs)} | "
                         f"{pct(np.mean(self.unseen[(m, s)]))} | {arch} |")
        lines.append(f"| random real | pixel | {pct(np.median(self.baseline))} | "
                     f"{' / '.join(pct(a) for a in self.baseline)} | {pct(np.mean(self.baseline_unseen))} | |")
        return "\n".join(lines) + "\n"


def prepare(cfg: BenchConfig, log=None):
    """Dataset, pretrained generator and (if MTT is benchmarked) the expert buffer."""
    log = log or (lambda msg: None)
    data = D.gen_glyph_dataset(10, cfg.per_class, 32, cfg.data_seed)
    log(f"dataset: {data.n_train} train / {len(data.labels) - data.n_train} val")
    gen = pretrain_generator(Generator(GenSpec()), data, cfg.pretrain_steps, 0.01, cfg.pretrain_batch, cfg.data_seed)
    log("generator pretrained")
    buffer = None
    if "mtt" in cfg.methods:
        hyper = X.ExpertHyper(epochs=cfg.expert_epochs)
        buffer = X.train_buffer(data, cfg.backbone, cfg.n_experts, hyper, cfg.data_seed, np.dtype(cfg.dtype).type)
        log(f"{cfg.n_experts} experts trained")
    return data, gen, buffer


def distill_config(cfg: BenchConfig, method: str, space: str, seed: int) -> EN.DistillConfig:
    lr, iters = cfg.schedule[(method, "pixel" if space == "pixel" else "latent")]
    return EN.DistillConfig(method=method, space=space, ipc=1, iterations=iters, latent_lr=lr,
                            alpha_lr=cfg.alpha_lr, mtt=cfg.mtt, aug=AugSettings(), seed=seed, net=cfg.backbone,
                            real_batch=cfg.real_batch, dtype=cfg.dtype)


def _evaluate(cfg: BenchConfig, images, labels, val, seed: int):
    back = E.cross_arch_eval(images, labels, [cfg.backbone], cfg.protocol, val, seed)
    unseen = E.cross_arch_eval(images, labels, cfg.unseen, cfg.protocol, val, seed + 1)
    return back, unseen


def random_real(data, ipc: int, seed: int):
    rng = np.random.default_rng([seed, 0xBA5E])
    idx = np.concatenate([rng.choice(data.class_train_indices(c), ipc, replace=False) for c in range(data.classes)])
    return data.images[idx], data.labels[idx]


def run_benchmark(cfg: BenchConfig = BenchConfig(), log=None, prepared=None) -> BenchResult:
    log = log or (lambda msg: None)
    t0 = time.time()
    data, gen, buffer = prepared if prepared is not None else prepare(cfg, log)
    val = data.val()
    res = BenchResult(cfg)
    for seed in cfg.seeds:
        imgs, labels = random_real(data, 1, seed)
        back, unseen = _evaluate(cfg, imgs, labels, val, 1000 + seed)
        res.baseline.append(back.cross_arch_mean())
        res.baseline_unseen.append(unseen.cross_arch_mean())
        for method in cfg.methods:
            for space in ("pixel", cfg.latent_space):
                dcfg = distill_config(cfg, method, space, seed)
                synset, losses = EN.distill(dcfg, data, None if space == "pixel" else gen, buffer)
                images = synset.render(None if space == "pixel" else gen)
                back, unseen = _evaluate(cfg, images, synset.labels, val, 1000 + seed)
                key = (method, space)
                tenth = max(1, len(losses) // 10)
                res.loss_trend.setdefault(key, []).append((float(np.median(losses[:tenth])),
                                                           float(np.median(losses[-tenth:]))))
                res.backbone.setdefault(key, []).append(back.cross_arch_mean())
                res.unseen.setdefault(key, []).append(unseen.cross_arch_mean())
                for arch, accs in unseen.accuracies.items():
                    res.per_arch.setdefault(key, {}).setdefault(arch, []).extend(accs)
                log(f"seed {seed} {method}/{space}: backbone {back.cross_arch_mean():.3f} "
                    f"unseen {unseen.cross_arch_mean():.3f} ({time.time() - t0:.0f}s)")
    res.seconds = time.time() - t0
    return res


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="Desk benchmark: pixel vs latent distillation on glyphs.")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--methods", default="dc,dm,mtt")
    ap.add_argument("--space", default="f2")
    args = ap.parse_args(argv)
    cfg = BenchConfig(methods=tuple(args.methods.split(",")), latent_space=args.space,
                      seeds=tuple(range(args.seeds)))
    res = run_benchmark(cfg, log=lambda m: print(m, file=sys.stderr))
    print(res.to_markdown())
    for m in cfg.methods:
        ok, acc, base = res.backbone_check(m, cfg.latent_space)
        print(f"{m}/{cfg.latent_space}: backbone {acc:.3f} vs random-real {base:.3f} -> {'pass' if ok else 'fail'}")
    print(f"latent >= pixel (unseen cross-arch) for: {', '.join(res.latent_wins()) or 'none'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
