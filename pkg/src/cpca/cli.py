"""Command-line front end.

Each command reads and writes artifacts under ``--out``::

    data/{source,target,test}/   gen-data
    pretrain.ckpt, pretrain_log.csv
    protos.ckpt                  init-protos (model with E_b initialised + prototype bank)
    adapt.ckpt, adapt_log.csv
    pseudo/                      pseudo-label PNGs + manifest
    selftrain.ckpt, selftrain_log.csv
    metrics_<name>.json          eval
    report.txt, loss_curves.png, momentum.png
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import config_digest, load_checkpoint, save_checkpoint
from .config import RunConfig, desk_config, load_config, apply_overrides, to_text
from .data import (Dataset, gen_synthetic, gen_target_test, load_manifest, save_dataset,
                   write_manifest, write_png)
from .errors import CheckpointError, ConfigError, CPCAError
from .metrics import ConfusionMatrix, accumulate, scores
from .report import comparison_table, load_reports, plot_losses, plot_momentum
from .trainer import (adapt_cpca, bank_from_checkpoint, build_prototypes, configure_threads,
                      evaluate, inference_mode, init_bias_encoder, make_checkpoint,
                      make_pseudolabels, net_from_checkpoint, optimizer_from_checkpoint,
                      pretrain_source, read_log, self_train, write_log)
from .model import init_params

log = logging.getLogger("cpca")

COMMANDS = ("gen-data", "pretrain", "init-protos", "adapt", "pseudo-label", "self-train", "eval",
            "report")
PHASE_CKPT = {"pretrain": "pretrain.ckpt", "init-protos": "protos.ckpt", "adapt": "adapt.ckpt",
              "selftrain": "selftrain.ckpt"}


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def resolve_config(args) -> RunConfig:
    if args.config in (None, "desk"):
        cfg = apply_overrides(desk_config(), args.set).validate()
    else:
        cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.model.seed = cfg.seed
    return cfg


class Run:
    """Paths and shared loading helpers for one command invocation."""

    def __init__(self, args, cfg: RunConfig):
        self.args, self.cfg = args, cfg
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.data = Path(args.data or cfg.paths.data or self.out / "data")

    def dataset(self, split: str) -> Dataset:
        ds = load_manifest(self.data / split)
        if ds.num_classes != self.cfg.model.num_classes:
            raise ConfigError(f"dataset {split} has {ds.num_classes} classes but the model has "
                              f"{self.cfg.model.num_classes}", "model.num_classes")
        return ds

    def ckpt_path(self, phase: str) -> Path:
        return self.out / PHASE_CKPT[phase]

    def load(self, phase: str, path=None):
        path = Path(path or self.args.ckpt or self.ckpt_path(phase))
        ckpt = load_checkpoint(path, config_digest(self.cfg.model))
        return ckpt, net_from_checkpoint(ckpt, self.cfg.model)

    def save(self, phase: str, net, iteration, bank=None, optimizer=None, name=None):
        meta = {"seed": self.cfg.seed, "inference_mode": inference_mode(self.cfg.train),
                "version": __version__}
        ckpt = make_checkpoint(net, phase, iteration, bank, optimizer, meta)
        save_checkpoint(self.out / (name or PHASE_CKPT[phase]), ckpt)


# --------------------------------------------------------------------------
# commands

def cmd_gen_data(run: Run):
    cfg = run.cfg
    source, target = gen_synthetic(cfg.synth, cfg.seed)
    test = gen_target_test(cfg.synth, cfg.seed)
    for split, ds in (("source", source), ("target", target), ("test", test)):
        save_dataset(ds, run.data / split, seed=cfg.seed)
        log.info("wrote %d %s samples to %s", len(ds), split, run.data / split)


def _resume_state(run: Run, phase: str):
    path = run.ckpt_path(phase)
    if not (run.args.resume and path.exists()):
        return None
    ckpt = load_checkpoint(path, config_digest(run.cfg.model))
    if ckpt.phase != phase:
        raise CheckpointError(f"{path} holds phase {ckpt.phase!r}, not {phase!r}")
    return ckpt


def _log_path(run, phase):
    return run.out / f"{phase}_log.csv"


def cmd_pretrain(run: Run):
    cfg, tc = run.cfg, run.cfg.train
    source = run.dataset("source")
    resume = _resume_state(run, "pretrain")
    if resume:
        net = net_from_checkpoint(resume, cfg.model)
        opt = optimizer_from_checkpoint(resume, net, "pretrain", tc)
        start = resume.iteration
    else:
        net, opt, start = init_params(cfg.model), None, 0
    res = pretrain_source(tc, source, net, cfg.seed, opt, start, run.args.stop)
    write_log(res.log, _log_path(run, "pretrain"), append=start > 0)
    run.save("pretrain", net, res.iteration, optimizer=res.optimizer)


def cmd_init_protos(run: Run):
    cfg, tc = run.cfg, run.cfg.train
    ckpt, net = run.load("pretrain")
    if tc.ablation.use_cfd:
        init_bias_encoder(net, tc.cpca.eb_init_noise, cfg.seed)
    bank = build_prototypes(net, run.dataset("source"), tc) if tc.ablation.use_cpc else None
    run.save("init-protos", net, 0, bank=bank)


def cmd_adapt(run: Run):
    cfg, tc = run.cfg, run.cfg.train
    resume = _resume_state(run, "adapt")
    if resume:
        net = net_from_checkpoint(resume, cfg.model)
        opt = optimizer_from_checkpoint(resume, net, "adapt", tc)
        bank, start = bank_from_checkpoint(resume), resume.iteration
    else:
        ckpt, net = run.load("init-protos")
        opt, bank, start = None, bank_from_checkpoint(ckpt), 0
    res = adapt_cpca(tc, net, bank, run.dataset("source"), run.dataset("target"), cfg.seed,
                     opt, start, run.args.stop)
    write_log(res.log, _log_path(run, "adapt"), append=start > 0)
    run.save("adapt", net, res.iteration, bank=res.bank, optimizer=res.optimizer)


def cmd_pseudo_label(run: Run):
    tc = run.cfg.train
    _, net = run.load("adapt")
    target = run.dataset("target")
    pl = make_pseudolabels(net, target, tc)
    root = run.out / "pseudo"
    (root / "labels").mkdir(parents=True, exist_ok=True)
    img_root = (run.data / "target").resolve()
    entries = []
    for i, sid in enumerate(target.ids):
        write_png(root / "labels" / f"{sid}.png", pl.labels[i])
        image = os.path.relpath(img_root / "images" / f"{sid}.png", root.resolve())
        entries.append({"id": sid, "image": image, "label": f"labels/{sid}.png",
                        "domain": "target"})
    write_manifest(root, target.num_classes, target.class_names, entries, run.cfg.seed)
    _write_text(root / "thresholds.txt", "".join(
        f"{k} {c} {s!r}\n" for k, (c, s) in enumerate(zip(pl.counts.tolist(), pl.thresholds.tolist()))))
    log.info("retained %d of %d pixels (eta=%g)", pl.retained, pl.labels.size, tc.cpca.eta)


def cmd_self_train(run: Run):
    cfg, tc = run.cfg, run.cfg.train
    pseudo = load_manifest(run.out / "pseudo")
    resume = _resume_state(run, "selftrain")
    if resume:
        net = net_from_checkpoint(resume, cfg.model)
        opt = optimizer_from_checkpoint(resume, net, "selftrain", tc)
        start = resume.iteration
    else:
        _, net = run.load("adapt")
        opt, start = None, 0
    res = self_train(tc, net, pseudo, cfg.seed, opt, start, run.args.stop)
    write_log(res.log, _log_path(run, "selftrain"), append=start > 0)
    run.save("selftrain", net, res.iteration, optimizer=res.optimizer)


def _latest_ckpt(run: Run) -> Path:
    for phase in ("selftrain", "adapt", "pretrain"):
        if run.ckpt_path(phase).exists():
            return run.ckpt_path(phase)
    raise CheckpointError(f"no checkpoint found under {run.out}")


def cmd_eval(run: Run):
    args = run.args
    split = args.split
    gt = run.dataset(split)
    if args.pred:
        pred = load_manifest(args.pred)
        if pred.ids != gt.ids:
            raise CPCAError("prediction and ground-truth manifests list different samples")
        conf = ConfusionMatrix.empty(gt.num_classes)
        for p, g in zip(pred.labels, gt.labels):
            conf = accumulate(conf, p, g)
        rep = scores(conf, gt.class_names or None)
        rep.name = args.name or "predictions"
    else:
        path = Path(args.ckpt) if args.ckpt else _latest_ckpt(run)
        ckpt = load_checkpoint(path, config_digest(run.cfg.model))
        net = net_from_checkpoint(ckpt, run.cfg.model)
        mode = args.mode or ckpt.meta.get("inference_mode", "concat")
        rep = evaluate(net, gt, mode, run.cfg.train.eval_batch_size, args.name or ckpt.phase)
    _write_text(run.out / f"metrics_{rep.name.replace(' ', '_')}.json", rep.to_json() + "\n")
    print(comparison_table([rep]), end="")


def cmd_report(run: Run):
    args = run.args
    files = args.metrics or sorted(str(p) for p in run.out.glob("metrics_*.json"))
    table = comparison_table(load_reports(files))
    _write_text(run.out / "report.txt", table)
    print(table, end="")
    logs = {}
    for phase in ("pretrain", "adapt", "selftrain"):
        p = _log_path(run, phase)
        if p.exists():
            logs[phase] = read_log(p)
    if logs:
        plot_losses(logs, run.out / "loss_curves.png")
    cp = run.cfg.train.cpca
    plot_momentum(max(1, run.cfg.train.iterations("adapt")), run.out / "momentum.png", cp.m0, cp.alpha)


HANDLERS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "init-protos": cmd_init_protos,
            "adapt": cmd_adapt, "pseudo-label": cmd_pseudo_label, "self-train": cmd_self_train,
            "eval": cmd_eval, "report": cmd_report}


def build_parser():
    p = argparse.ArgumentParser(prog="cpca", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", default="desk", help="config file, or 'desk' for the bundled one")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs/default")
    p.add_argument("--data", help="dataset root holding source/ target/ test/ (default <out>/data)")
    p.add_argument("--ckpt", help="checkpoint to start from instead of the phase default")
    p.add_argument("--resume", action="store_true", help="continue the phase from its checkpoint")
    p.add_argument("--stop", type=int, help="stop the phase at this iteration")
    p.add_argument("--serial", action="store_true", help="single-threaded, deterministic")
    p.add_argument("--split", default="test", help="dataset split for eval")
    p.add_argument("--mode", choices=("concat", "causal"), help="inference mode for eval")
    p.add_argument("--pred", help="evaluate a prediction manifest instead of a checkpoint")
    p.add_argument("--name", help="run name recorded in the metric file")
    p.add_argument("--metrics", nargs="*", help="metric JSON files for report")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        configure_threads(args.serial)
        torch.manual_seed(cfg.seed)
        np.random.seed(cfg.seed % 2**32)
        run = Run(args, cfg)
        _write_text(run.out / "config.cfg", to_text(cfg))
        HANDLERS[args.command](run)
    except ConfigError as exc:
        print(f"cpca: config error [{exc.key}]: {exc}", file=sys.stderr)
        return 2
    except (CPCAError, OSError) as exc:
        print(f"cpca: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
