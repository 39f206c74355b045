"""``ddos-mos`` command line: simulate, the three training stages, evaluation, transfer, ablation.

On-disk corpus layout (written by ``simulate``, read by every other command)::

    DATA/corpus.meta                     n_judges, feature_dim, signal_channels
    DATA/latents.csv                     ground-truth quality, never read by training
    DATA/source/{train,dev,test}/        ratings.csv + features/*.ddfs
    DATA/target/{train,dev,test,unlabeled}/

Each command writes its outputs, a ``config.txt`` snapshot and a
``manifest.json`` into ``--out``. Exit status is 0 on success, 1 for invalid
input or configuration and 2 when a stage fails at runtime.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .config import FLAG_NAMES, TRANSFER_MODES, ConfigError, PipelineConfig, load_config, write_config
from .dataset import CorpusError, load_corpus, write_corpus
from .metrics import (
    REPORT_KEYS, UndefinedCorrelation, aggregate_reports, evaluate, read_report, write_predictions,
    write_report,
)
from .model import load_model, save_model
from .nncore import load_checkpoint, save_checkpoint
from .pipeline import (
    Corpora, StageError, predictor, run_experiment, run_transfer, simulate_all, stage_dapt, stage_refine,
    stage_train,
)
from .refine import RefinementLayer
from .simulator import write_latents

log = logging.getLogger("ddos_mos")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
SPLITS = {"source": ("train", "dev", "test"), "target": ("train", "dev", "test", "unlabeled")}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ hashing

def blob_hash(path) -> str:
    """Content hash in git's blob format, so ``git hash-object`` gives the same value."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def tree_hash(root) -> tuple[str, int]:
    """Combined hash over every file below ``root`` (relative path + blob hash), and the file count."""
    root = Path(root)
    files = sorted(p for p in root.rglob("*") if p.is_file())
    h = hashlib.sha1()
    for p in files:
        h.update(f"{blob_hash(p)} {p.relative_to(root).as_posix()}\n".encode())
    return h.hexdigest(), len(files)


class Run:
    """Tracks inputs and outputs of one command and writes its manifest."""

    def __init__(self, command: str, cfg: PipelineConfig, out: Path):
        self.command, self.cfg, self.out = command, cfg, out
        self.inputs: dict[str, dict] = {}
        self.outputs: list[str] = []

    def input_file(self, role, path):
        self.inputs[role] = {"path": str(path), "sha1": blob_hash(path)}

    def input_dir(self, role, path):
        digest, n = tree_hash(path)
        self.inputs[role] = {"path": str(path), "tree_sha1": digest, "files": n}

    def path(self, name) -> Path:
        self.outputs.append(name)
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def finish(self):
        write_config(self.path("config.txt"), self.cfg)
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": self.cfg.seed,
            "config": self.cfg.snapshot(),
            "config_sha256": self.cfg.digest(),
            "inputs": self.inputs,
            "outputs": {name: blob_hash(self.out / name) for name in sorted(set(self.outputs))},
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")


# -------------------------------------------------------------- corpus I/O

def write_corpora(run: Run, corpora: Corpora, cfg: PipelineConfig) -> None:
    parts = {("source", "train"): corpora.source_train, ("source", "dev"): corpora.source_dev,
             ("source", "test"): corpora.source_test, ("target", "train"): corpora.target_train,
             ("target", "dev"): corpora.target_dev, ("target", "test"): corpora.target_test,
             ("target", "unlabeled"): corpora.target_unlabeled}
    for (domain, split), corpus in parts.items():
        write_corpus(corpus, run.out / domain / split)
    write_latents(run.path("latents.csv"), corpora.latents.values())
    write_report(run.path("corpus.meta"), {"n_judges": cfg.sim.n_judges,
                                           "feature_dim": corpora.source_train.feature_dim,
                                           "signal_channels": cfg.sim.signal_channels})


def read_meta(data: Path) -> dict:
    meta = data / "corpus.meta"
    if not meta.is_file():
        raise UsageError(f"{data} is not a simulated corpus directory (no corpus.meta)")
    return read_report(meta)


def load_split(data: Path, domain: str, split: str):
    meta = read_meta(data)
    tag = "unlabeled" if split == "unlabeled" else split
    return load_corpus(data / domain / split / "ratings.csv", judge_count=int(meta["n_judges"]), split_tag=tag)


def _data_dir(run: Run, args, *domains) -> Path:
    if args.data is None:
        raise UsageError(f"{run.command} needs --data (a directory written by 'simulate')")
    data = Path(args.data)
    read_meta(data)
    for domain in domains:
        run.input_dir(f"data.{domain}", data / domain)
    return data


def _checkpoint(run: Run, path, role="checkpoint", what="a model checkpoint") -> Path:
    if path is None:
        raise UsageError(f"{run.command} needs --{role} ({what})")
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{run.command}: {role} {path} does not exist")
    run.input_file(role, path)
    return path


def _report_doc(report, layer: RefinementLayer | None = None, notes=()) -> dict:
    doc = dict(report.as_dict())
    if layer is not None:
        doc["refine.a"] = layer.a
        doc["refine.b"] = layer.b
    for i, note in enumerate(notes, start=1):
        doc[f"warning.{i}"] = note
    return doc


# ----------------------------------------------------------------- commands

def cmd_simulate(cfg, args, run: Run):
    corpora = simulate_all(cfg)
    write_corpora(run, corpora, cfg)
    for domain in SPLITS:
        run.outputs.extend(p.relative_to(run.out).as_posix()
                           for p in sorted((run.out / domain).rglob("ratings.csv")))
    log.info("wrote %d source and %d target utterances to %s",
             len(corpora.source_train) + len(corpora.source_dev) + len(corpora.source_test),
             len(corpora.target_train) + len(corpora.target_dev) + len(corpora.target_test), run.out)


def cmd_dapt(cfg, args, run: Run):
    if cfg.flags.no_dapt:
        raise UsageError("dapt was asked to run with flags.no_dapt set")
    data = _data_dir(run, args, "source", "target")
    corpora = [load_split(data, "source", "train"), load_split(data, "target", "train"),
               load_split(data, "target", "unlabeled")]
    history = []
    state = stage_dapt(cfg, corpora, corpora[0].feature_dim, history)
    save_checkpoint(run.path("encoder.ddck"), state)
    with open(run.path("dapt_log.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows([i + 1, repr(v)] for i, v in enumerate(history))
    plotting.loss_curve(run.path("dapt_loss.png"), range(1, len(history) + 1), history,
                        title="masked-frame reconstruction loss")


def cmd_train(cfg, args, run: Run):
    data = _data_dir(run, args, "source")
    encoder_state = None
    if args.encoder is not None:
        if cfg.flags.no_dapt:
            raise UsageError("--encoder conflicts with flags.no_dapt")
        path = _checkpoint(run, args.encoder, "encoder", "a DAPT encoder checkpoint")
        encoder_state = load_checkpoint(path)
        if not any(k.startswith("encoder.") for k in encoder_state):
            raise UsageError(f"{path} holds no encoder.* tensors")
    train, dev = load_split(data, "source", "train"), load_split(data, "source", "dev")
    meta = read_meta(data)
    model, rows = stage_train(cfg, train, dev if len(dev) else None, encoder_state,
                              int(meta["signal_channels"]))
    save_model(run.path("model.ddck"), model)
    with open(run.path("train_log.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "train_loss", "dev_loss"])
        for r in rows:
            w.writerow([r.step, repr(r.lr), "" if np.isnan(r.train_loss) else repr(r.train_loss),
                        "" if r.dev_loss is None else repr(r.dev_loss)])
    dev_rows = [r for r in rows if r.dev_loss is not None]
    plotting.loss_curve(run.path("loss_curve.png"), [r.step for r in rows], [r.train_loss for r in rows],
                        [r.step for r in dev_rows], [r.dev_loss for r in dev_rows], title="stage-2 loss")


def cmd_refine(cfg, args, run: Run):
    if cfg.flags.no_refine:
        raise UsageError("refine was asked to run with flags.no_refine set")
    path = _checkpoint(run, args.checkpoint, what="the stage-2 checkpoint written by 'train'")
    data = _data_dir(run, args, "source")
    model, extra = load_model(path)
    train = load_split(data, "source", "train")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        layer = stage_refine(model, train)
    extra = {k: v for k, v in extra.items() if not k.startswith("refine.")}
    save_model(run.path("model.ddck"), model, {**extra, **layer.tensors()})
    doc = {"refine.a": layer.a, "refine.b": layer.b, "n_utt": len(train)}
    doc.update({f"warning.{i}": str(w.message) for i, w in enumerate(caught, start=1)})
    write_report(run.path("refine.txt"), doc)


def cmd_evaluate(cfg, args, run: Run):
    path = _checkpoint(run, args.checkpoint)
    domain, _, split = args.split.partition("/")
    if domain not in SPLITS or split not in SPLITS[domain] or split == "unlabeled":
        raise UsageError(f"--split must be source/<train|dev|test> or target/<train|dev|test>, got {args.split!r}")
    data = _data_dir(run, args, domain)
    model, extra = load_model(path)
    layer = None if cfg.flags.no_refine else RefinementLayer.from_tensors(extra)
    corpus = load_split(data, domain, split)
    preds = predictor(model, layer)(corpus)
    write_predictions(run.path("predictions.csv"), corpus, preds)
    plotting.prediction_scatter(run.path("scatter.png"), [u.mos for u in corpus], preds, title=args.split)
    report = evaluate(corpus, lambda _: preds)
    write_report(run.path("report.txt"), _report_doc(report, layer))


def cmd_transfer(cfg, args, run: Run):
    mode = args.mode or cfg.transfer.mode
    if mode not in TRANSFER_MODES:
        raise UsageError(f"--mode must be one of {', '.join(TRANSFER_MODES)}")
    path = _checkpoint(run, args.checkpoint, what="a source-trained checkpoint")
    data = _data_dir(run, args, "target")
    model, _ = load_model(path)
    target_train, target_test = load_split(data, "target", "train"), load_split(data, "target", "test")
    result = run_transfer(cfg, model, target_train, target_test, mode)
    if mode != "zero_shot":
        extra = {} if result.refinement is None else result.refinement.tensors()
        save_model(run.path(f"model_{mode}.ddck"), result.model, extra)
    write_predictions(run.path(f"predictions_{mode}.csv"), target_test, result.predictions)
    plotting.prediction_scatter(run.path(f"scatter_{mode}.png"), [u.mos for u in target_test],
                                result.predictions, title=mode.replace("_", "-"))
    write_report(run.path(f"report_{mode}.txt"), _report_doc(result.report, result.refinement, result.warnings))


def ablation_variants(cfg: PipelineConfig, only=None):
    """The configured pipeline plus one extra ablation flag at a time on top of it."""
    variants = [("full", cfg)]
    for name in FLAG_NAMES:
        if getattr(cfg.flags, name):
            continue
        if (name, True) in (("no_reg_head", cfg.flags.no_dist_head), ("no_dist_head", cfg.flags.no_reg_head)):
            continue
        variants.append((name, cfg.with_flags(**{name: True})))
    if only:
        unknown = set(only) - {v[0] for v in variants}
        if unknown:
            raise UsageError(f"unknown or inapplicable ablation variants: {', '.join(sorted(unknown))}")
        variants = [v for v in variants if v[0] in only]
    return variants


def cmd_ablate(cfg, args, run: Run):
    seeds = _int_list(args.seeds) if args.seeds else [cfg.seed]
    variants = ablation_variants(cfg, args.variants.split(",") if args.variants else None)
    per_run = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for seed in seeds:
            corpora = simulate_all(cfg.with_seed(seed))
            for name, vcfg in variants:
                res = run_experiment(vcfg.with_seed(seed), corpora, modes=())
                per_run.append((name, seed, res.source_report.as_dict()))
                log.info("ablate %s seed %d: sys.srcc %.4f", name, seed, res.source_report.system.srcc)
    keys = list(REPORT_KEYS)
    with open(run.path("ablation.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", *keys])
        for name, seed, doc in per_run:
            w.writerow([name, seed, *(repr(doc[k]) if isinstance(doc[k], float) else doc[k] for k in keys)])
    summary = {name: aggregate_reports(d for n, _, d in per_run if n == name) for name, _ in variants}
    with open(run.path("ablation_summary.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "n_seeds", *keys])
        for name, doc in summary.items():
            w.writerow([name, len(seeds), *(repr(doc[k]) for k in keys)])
    labels = list(summary)
    plotting.grouped_bars(run.path("ablation_srcc.png"), labels,
                          {"utterance": [summary[n]["utt.srcc"] for n in labels],
                           "system": [summary[n]["sys.srcc"] for n in labels]},
                          ylabel="SRCC (mean over seeds)", title="ablations, source test split")
    plotting.grouped_bars(run.path("ablation_mse.png"), labels,
                          {"utterance": [summary[n]["utt.mse"] for n in labels],
                           "system": [summary[n]["sys.mse"] for n in labels]},
                          ylabel="MSE (mean over seeds)", title="ablations, source test split")


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


COMMANDS = {"simulate": cmd_simulate, "dapt": cmd_dapt, "train": cmd_train, "refine": cmd_refine,
            "evaluate": cmd_evaluate, "transfer": cmd_transfer, "ablate": cmd_ablate}


# ------------------------------------------------------------------ parsing

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--seed", type=int, help="master seed; overrides every section's seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="extra config override, repeatable")
    common.add_argument("-v", "--verbose", action="count", default=0)
    for name in FLAG_NAMES:
        common.add_argument("--" + name.replace("_", "-"), dest=name, action="store_true",
                            help=f"ablation: set flags.{name}")

    parser = _Parser(prog="ddos-mos", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {"simulate": "write source and shifted-domain corpora",
             "dapt": "stage 1: masked-frame pre-training of the encoder",
             "train": "stage 2: augmentation and supervised fine-tuning",
             "refine": "stage 3: closed-form affine refinement",
             "evaluate": "score a checkpoint on one split",
             "transfer": "zero-shot / few-shot / full transfer to the target domain",
             "ablate": "run the pipeline with each ablation flag in turn"}
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text)
        if name != "simulate" and name != "ablate":
            p.add_argument("--data", help="corpus directory written by 'simulate'")
        if name in ("refine", "evaluate", "transfer"):
            p.add_argument("--checkpoint", help="model checkpoint")
        if name == "train":
            p.add_argument("--encoder", help="encoder checkpoint written by 'dapt'")
        if name == "evaluate":
            p.add_argument("--split", default="source/test", help="DOMAIN/SPLIT, default source/test")
        if name == "transfer":
            p.add_argument("--mode", choices=TRANSFER_MODES, help="default: transfer.mode from the config")
        if name == "ablate":
            p.add_argument("--seeds", help="comma-separated seeds, default the configured seed")
            p.add_argument("--variants", help="comma-separated subset of variants to run")
    return parser


def config_from_args(args) -> PipelineConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    for name in FLAG_NAMES:
        if getattr(args, name):
            overrides[f"flags.{name}"] = "true"
    try:
        return load_config(args.config, overrides)
    except FileNotFoundError:
        raise UsageError(f"config file {args.config} not found") from None


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ddos-mos: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        run = Run(args.command, cfg, Path(args.out))
        COMMANDS[args.command](cfg, args, run)
        run.finish()
    except (StageError, FloatingPointError, UndefinedCorrelation, OSError) as exc:
        print(f"ddos-mos {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, ConfigError, CorpusError, ValueError) as exc:
        print(f"ddos-mos {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK
