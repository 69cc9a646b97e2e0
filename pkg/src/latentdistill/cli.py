"""Command-line entry point.

Usage: ``latentdistill <command> [--config FILE] [--key=value | --key value ...]``

Every run writes into ``<out.root>/<run.name>/``: ``config.echo`` (the
resolved configuration), the command's artifacts (``synset.bin``,
``losses.tsv``, ``report.md``, ``grids/``...) and ``run.log``, the only file
carrying timestamps.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from . import engine as EN
from . import evaluation as E
from . import experts as X
from . import generator as G
from . import synset as S
from .binfmt import FormatError

COMMANDS = ("gendata", "train-experts", "pretrain-gen", "distill", "eval", "export", "report",
            "sweep-spaces", "selftest")


class UsageError(Exception):
    pass


class Run:
    def __init__(self, rc: C.RunConfig, command: str):
        self.rc = rc
        self.command = command
        self.dir = Path(rc["out.root"]) / rc["run.name"]
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.echo").write_text(rc.echo())
        self._log = open(self.dir / "run.log", "a")
        self.log(f"command {command}")

    def log(self, msg: str):
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
        self._log.write(f"{stamp} {msg}\n")
        self._log.flush()
        print(msg, file=sys.stderr)

    def close(self):
        self._log.close()

    def path(self, key: str, default: str) -> Path:
        v = self.rc[key]
        return Path(v) if v else self.dir / default

    # prerequisites are loaded when present and built deterministically otherwise

    def dataset(self) -> D.Dataset:
        p = self.path("data.path", "dataset.bin")
        if p.exists():
            return D.load_dataset(p)
        if self.rc["data.path"]:
            raise UsageError(f"dataset file not found: {p}")
        self.log(f"generating dataset -> {p}")
        d = D.gen_glyph_dataset(self.rc["data.classes"], self.rc["data.per_class"], self.rc["data.size"],
                                self.rc["data.seed"])
        D.save_dataset(d, p)
        return d

    def generator(self) -> G.Generator:
        if self.rc["gen.path"]:
            p = Path(self.rc["gen.path"])
            if not p.exists():
                raise UsageError(f"generator file not found: {p}")
            gen = G.load_generator(p)
            if gen.spec != C.gen_spec(self.rc):
                self.log("note: loaded generator spec differs from the gen.* keys; using the file")
            return gen
        return G.Generator(C.gen_spec(self.rc))

    def experts(self, data: D.Dataset) -> X.TrajBuffer:
        p = self.path("experts.path", "experts.bin")
        if p.exists():
            return X.load_buffer(p)
        if self.rc["experts.path"]:
            raise UsageError(f"expert buffer not found: {p}")
        return self.train_experts(data, p)

    def train_experts(self, data, p: Path) -> X.TrajBuffer:
        rc = self.rc
        spec, hyper = C.net_spec(rc), C.expert_hyper(rc)
        trajs = []
        for k in range(rc["experts.count"]):
            self.log(f"training expert {k + 1}/{rc['experts.count']}")
            trajs.append(X.train_expert(data, spec, hyper, rc["experts.seed"] * 1000 + k, np.dtype(rc["dtype"]).type))
        buf = X.TrajBuffer(spec, hyper.epochs, 1, trajs)
        X.save_buffer(buf, p)
        self.log(f"wrote {p}")
        return buf


def _split_args(argv):
    parser = argparse.ArgumentParser(prog="latentdistill", description="Dataset distillation in generator latent spaces.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--help-config", action="store_true", help="list configuration keys and exit")
    ns, rest = parser.parse_known_args(argv)
    overrides = {}
    i = 0
    while i < len(rest):
        arg = rest[i]
        if not arg.startswith("--") or len(arg) == 2:
            raise UsageError(f"unrecognized argument {arg!r}; expected --key=value or --key value")
        if "=" in arg:
            key, value = arg[2:].split("=", 1)
        elif i + 1 < len(rest):
            key, value = arg[2:], rest[i + 1]
            i += 1
        else:
            raise UsageError(f"missing value for {arg}")
        overrides[key] = value
        i += 1
    return ns, overrides


def _load_config(ns, overrides) -> C.RunConfig:
    text = ""
    if ns.config:
        try:
            text = Path(ns.config).read_text()
        except OSError as e:
            raise UsageError(f"cannot read config: {e}") from None
    return C.load(text, overrides)


def cmd_gendata(run: Run) -> int:
    rc = run.rc
    p = run.path("data.path", "dataset.bin")
    d = D.gen_glyph_dataset(rc["data.classes"], rc["data.per_class"], rc["data.size"], rc["data.seed"])
    D.save_dataset(d, p)
    run.log(f"wrote {p}: {d.n_train} train + {len(d.labels) - d.n_train} val images")
    return 0


def cmd_train_experts(run: Run) -> int:
    run.train_experts(run.dataset(), run.path("experts.path", "experts.bin"))
    return 0


def cmd_pretrain_gen(run: Run) -> int:
    from .pretrain import pretrain_generator
    rc = run.rc
    d = run.dataset()
    gen = G.Generator(C.gen_spec(rc))
    losses = []
    gen = pretrain_generator(gen, d, rc["pretrain.steps"], rc["pretrain.lr"], rc["pretrain.batch"], rc["seed"],
                             log=lambda i, v: losses.append(v))
    p = run.dir / "generator.bin"
    G.save_generator(gen, p)
    _write_losses(run.dir / "pretrain_losses.tsv", losses)
    run.log(f"wrote {p}")
    return 0


def _write_losses(path: Path, losses):
    path.write_text("iteration\tloss\n" + "".join(f"{i}\t{v:.17g}\n" for i, v in enumerate(losses)))


def distill_once(run: Run, dcfg: EN.DistillConfig, data, gen, buffer):
    synset, losses = EN.distill(dcfg, data, None if dcfg.space == "pixel" else gen, buffer)
    return synset, losses


def cmd_distill(run: Run) -> int:
    rc = run.rc
    dcfg = C.distill_config(rc)
    data = run.dataset()
    gen = run.generator() if dcfg.space != "pixel" else None
    buffer = run.experts(data) if dcfg.method == "mtt" else None
    synset, losses = distill_once(run, dcfg, data, gen, buffer)
    S.save_synset(synset, run.dir / "synset.bin")
    _write_losses(run.dir / "losses.tsv", losses)
    (run.dir / "grids").mkdir(exist_ok=True)
    D.export_image_grid(synset.render(gen), run.dir / "grids" / "synset.ppm", rc["export.columns"])
    if dcfg.space != "pixel":
        G.save_generator(gen, run.dir / "generator.bin")
    run.log(f"wrote {run.dir / 'synset.bin'} ({len(synset)} latents, space {synset.space})")
    return 0


def _load_synset_and_gen(run: Run):
    p = run.path("synset.path", "synset.bin")
    if not p.exists():
        raise UsageError(f"synthetic set not found: {p}")
    synset = S.load_synset(p)
    gen = None
    if synset.space != "pixel":
        gp = Path(run.rc["gen.path"]) if run.rc["gen.path"] else p.parent / "generator.bin"
        gen = G.load_generator(gp) if gp.exists() else run.generator()
    return synset, gen


def evaluate_synset(rc: C.RunConfig, synset, gen, data):
    images = synset.render(gen)
    prot = C.protocol(rc)
    val = data.val()
    backbone = E.cross_arch_eval(images, synset.labels, [C.net_spec(rc)], prot, val, rc["eval.seed"])
    unseen = E.cross_arch_eval(images, synset.labels, C.eval_archs(rc), prot, val, rc["eval.seed"] + 1)
    return backbone, unseen


def cmd_eval(run: Run) -> int:
    synset, gen = _load_synset_and_gen(run)
    data = run.dataset()
    backbone, unseen = evaluate_synset(run.rc, synset, gen, data)
    label = f"{run.rc['method']}/{synset.space}"
    (run.dir / "eval.tsv").write_text(backbone.to_tsv(label + "/backbone") + unseen.to_tsv(label).split("\n", 1)[1])
    md = ["# Evaluation", "", "Backbone (distillation architecture):", "", E.markdown_table({label: backbone}),
          "Unseen architectures:", "", E.markdown_table({label: unseen})]
    (run.dir / "report.md").write_text("\n".join(md))
    print(E.markdown_table({label: unseen}), end="")
    return 0


def cmd_export(run: Run) -> int:
    synset, gen = _load_synset_and_gen(run)
    (run.dir / "grids").mkdir(exist_ok=True)
    out = run.dir / "grids" / "synset.ppm"
    D.export_image_grid(synset.render(gen), out, run.rc["export.columns"])
    run.log(f"wrote {out}")
    return 0


def _read_eval_tsv(path: Path) -> dict:
    rows: dict = {}
    for line in path.read_text().splitlines()[1:]:
        parts = line.split("\t")
        if len(parts) < 6 or parts[1] == "cross_arch_mean" or not parts[5]:
            continue
        rows.setdefault(parts[0], {})[parts[1]] = [float(v) for v in parts[5].split(",")]
    return rows


def cmd_report(run: Run) -> int:
    root = Path(run.rc["out.root"])
    reports: dict = {}
    for tsv in sorted(root.glob("*/eval.tsv")) + sorted(root.glob("*/sweep.tsv")):
        for label, accs in _read_eval_tsv(tsv).items():
            reports[f"{tsv.parent.name}:{label}"] = E.EvalReport(accs)
    if not reports:
        raise UsageError(f"no eval.tsv or sweep.tsv files under {root}")
    backbone = {k: v for k, v in reports.items() if k.endswith("/backbone")}
    unseen = {k: v for k, v in reports.items() if not k.endswith("/backbone")}
    md = ["# Aggregated results", ""]
    if unseen:
        md += ["Cross-architecture accuracy (%), unseen architectures:", "", E.markdown_table(unseen)]
    if backbone:
        md += ["Backbone accuracy (%):", "", E.markdown_table(backbone)]
    text = "\n".join(md)
    (run.dir / "report.md").write_text(text)
    print(text, end="")
    return 0


def cmd_sweep_spaces(run: Run) -> int:
    rc = run.rc
    data = run.dataset()
    gen = run.generator()
    buffer = run.experts(data) if rc["method"] == "mtt" else None
    rows = {}
    tsv = ["row\tarch\tmean\tstd\trepeats\taccuracies"]
    for space in rc["sweep.spaces"]:
        merged: dict = {}
        for seed in rc["seeds"]:
            dcfg = C.distill_config(rc, space=space, seed=seed)
            run.log(f"sweep: space {space} seed {seed}")
            synset, losses = distill_once(run, dcfg, data, gen, buffer)
            _, unseen = evaluate_synset(rc, synset, gen if space != "pixel" else None, data)
            for arch, accs in unseen.accuracies.items():
                merged.setdefault(arch, []).extend(accs)
        rep = E.EvalReport(merged)
        rows[space] = rep
        tsv += rep.to_tsv(f"{rc['method']}/{space}").splitlines()[1:]
    (run.dir / "sweep.tsv").write_text("\n".join(tsv) + "\n")
    text = "# Latent space sweep\n\n" + E.markdown_table(rows)
    (run.dir / "report.md").write_text(text)
    print(text, end="")
    return 0


HANDLERS = {
    "gendata": cmd_gendata,
    "train-experts": cmd_train_experts,
    "pretrain-gen": cmd_pretrain_gen,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "export": cmd_export,
    "report": cmd_report,
    "sweep-spaces": cmd_sweep_spaces,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns, overrides = _split_args(argv)
        if ns.help_config:
            print(C.describe(), end="")
            return 0
        rc = _load_config(ns, overrides)
    except SystemExit as e:
        return 2 if e.code else 0
    except (UsageError, C.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if ns.command == "selftest":
        from .selftest import run_selftest
        return 0 if run_selftest(print) else 1
    try:
        job = Run(rc, ns.command)
    except OSError as e:
        print(f"error: cannot create output directory: {e}", file=sys.stderr)
        return 2
    try:
        return HANDLERS[ns.command](job)
    except (UsageError, FormatError, EN.ConfigError) as e:
        job.log(f"error: {e}")
        return 2
    except Exception as e:  # noqa: BLE001 - report any runtime failure as exit 1
        job.log(f"failed: {type(e).__name__}: {e}")
        return 1
    finally:
        job.close()


def main():
    threads = os.environ.get("GLAD_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    sys.exit(run())


if __name__ == "__main__":
    main()
