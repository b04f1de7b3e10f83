"""Command-line surface for the whole pipeline.

Subcommands: synth-data, featurize, train, embed, eval, distill, finetune,
report. Every subcommand reads an optional INI config file (one section per
subcommand, ``key = value`` lines) with explicit flags taking precedence.
Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical
divergence.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from pathlib import Path

import numpy as np

from . import adapt, probes, report as report_mod, triplet
from .corpus import Manifest, SynthSpec, load_manifest, read_wav, synth_corpus
from .encoder import (
    EncoderConfig,
    build_encoder,
    half_width_config,
    load_checkpoint,
    save_checkpoint,
    tap_width,
)
from .errors import DataError, DivergenceError, UsageError
from .frontend import ClipFeatures, FrontendConfig, load_features, save_features, stft_logmel

SUBCOMMANDS = ("synth-data", "featurize", "train", "embed", "eval",
               "distill", "finetune", "report")


class _Parser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting the process."""

    def error(self, message: str):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="audiotriplet",
                     description="Self-supervised audio representations: "
                                 "synthesize data, train, probe, adapt.")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="INI config file; section "
                       f"[{name}] supplies defaults for omitted flags")
        return p

    p = add("synth-data", "render the deterministic synthetic corpus")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--speakers", type=int, default=None)
    p.add_argument("--clips", type=int, default=None, help="clips per speaker")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--seconds", type=float, default=None, help="clip length")
    p.add_argument("--seed", type=int, default=None)

    p = add("featurize", "compute and cache log-mel features per clip")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None, help="directory for .feat files")
    p.add_argument("--jobs", type=int, default=None)

    p = add("train", "triplet-train an encoder on a manifest")
    p.add_argument("--manifest", default=None)
    p.add_argument("--features-dir", default=None)
    p.add_argument("--out", default=None, help="checkpoint path")
    p.add_argument("--trace", default=None, help="loss trace CSV path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--mining", default=None, choices=triplet.MINING_STRATEGIES)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--clips-per-batch", type=int, default=None)
    p.add_argument("--windows-per-clip", type=int, default=None)
    p.add_argument("--optimizer", default=None, choices=triplet.OPTIMIZERS)
    p.add_argument("--log-every", type=int, default=None)
    p.add_argument("--embedding-dim", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = add("embed", "write clip vectors for a manifest")
    p.add_argument("--manifest", default=None)
    p.add_argument("--features-dir", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--tap", default=None)
    p.add_argument("--out", default=None, help="embeddings CSV path")

    p = add("eval", "probe a representation under a protocol")
    p.add_argument("--manifest", default=None)
    p.add_argument("--features-dir", default=None)
    p.add_argument("--rep", default=None,
                   choices=probes.REPRESENTATION_KINDS)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--tap", default=None, help="tap name, or 'all'")
    p.add_argument("--rep-seed", type=int, default=None,
                   help="seed for the random-encoder baseline")
    p.add_argument("--speaker-norm", action="store_true", default=None)
    p.add_argument("--probe", default=None, choices=("logreg", "lda"))
    p.add_argument("--task", default=None, choices=("label", "speaker"))
    p.add_argument("--protocol", default=None, choices=("inter", "intra"))
    p.add_argument("--splits", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="report CSV path")
    p.add_argument("--jobs", type=int, default=None)

    p = add("distill", "train a smaller student against a teacher tap")
    p.add_argument("--manifest", default=None)
    p.add_argument("--features-dir", default=None)
    p.add_argument("--teacher", default=None, help="teacher checkpoint")
    p.add_argument("--tap", default=None, help="teacher tap to regress")
    p.add_argument("--out", default=None, help="student checkpoint path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = add("finetune", "fine-tune encoder + softmax head on the label task")
    p.add_argument("--manifest", default=None)
    p.add_argument("--features-dir", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--per-speaker", action="store_true", default=None)
    p.add_argument("--out", default=None, help="per-speaker report CSV path")
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--steps-per-eval", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = add("report", "regress accuracy on model and task factors")
    p.add_argument("--accuracies", default=None,
                   help="CSV with header model,task,accuracy")
    p.add_argument("--out", default=None, help="effect table CSV path")
    return parser


def _config_section(path: str | None, section: str) -> dict[str, str]:
    if path is None:
        return {}
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise UsageError(f"bad config file {path}: {exc}") from exc
    if not parser.has_section(section):
        return {}
    return dict(parser.items(section))


class _Options:
    """Flag values with config-file fallback: flag > config > default."""

    def __init__(self, args: argparse.Namespace, section: dict[str, str]):
        self.args = args
        self.section = section

    def get(self, name: str, default=None, cast=str):
        explicit = getattr(self.args, name.replace("-", "_"), None)
        if explicit is not None:
            return explicit
        if name in self.section:
            raw = self.section[name]
            try:
                if cast is bool:
                    if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(raw)
                    return raw.lower() in ("true", "1", "yes")
                return cast(raw)
            except ValueError as exc:
                raise UsageError(
                    f"config value {name} = {raw!r} is not a valid {cast.__name__}"
                ) from exc
        return default

    def require(self, name: str, cast=str):
        value = self.get(name, None, cast)
        if value is None:
            raise UsageError(f"missing required option --{name}")
        return value


def _load_feature_map(manifest: Manifest, features_dir: str | None,
                      config: FrontendConfig) -> dict[str, ClipFeatures]:
    out: dict[str, ClipFeatures] = {}
    for entry in manifest.entries:
        if features_dir is not None:
            path = Path(features_dir) / f"{entry.clip_id}.feat"
            out[entry.clip_id] = load_features(path, clip_id=entry.clip_id)
        else:
            out[entry.clip_id] = stft_logmel(read_wav(entry.path), config)
    return out


def _cmd_synth_data(opt: _Options) -> int:
    out_dir = opt.require("out")
    spec = SynthSpec(n_speakers=opt.get("speakers", 20, int),
                     clips_per_speaker=opt.get("clips", 20, int),
                     n_classes=opt.get("classes", 4, int),
                     clip_seconds=opt.get("seconds", 3.0, float),
                     seed=opt.get("seed", 0, int))
    manifest = synth_corpus(spec, out_dir)
    print(f"wrote {len(manifest.entries)} clips and manifest.csv to {out_dir}")
    return 0


def _cmd_featurize(opt: _Options) -> int:
    manifest = load_manifest(opt.require("manifest"))
    out_dir = Path(opt.require("out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    config = FrontendConfig()
    jobs = opt.get("jobs", 1, int)

    def one(entry) -> str:
        feats = stft_logmel(read_wav(entry.path), config)
        save_features(feats, out_dir / f"{entry.clip_id}.feat")
        return entry.clip_id

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(one, manifest.entries))
    else:
        done = [one(entry) for entry in manifest.entries]
    print(f"featurized {len(done)} clips into {out_dir}")
    return 0


def _cmd_train(opt: _Options) -> int:
    manifest = load_manifest(opt.require("manifest"))
    config = FrontendConfig()
    feature_map = _load_feature_map(manifest, opt.get("features-dir"), config)
    seed = opt.get("seed", 0, int)
    sampler = triplet.SamplerConfig(
        tau_seconds=opt.get("tau", 10.0, float),
        clips_per_batch=opt.get("clips-per-batch", 8, int),
        windows_per_clip=opt.get("windows-per-clip", 3, int),
        seed=seed)
    loss = triplet.LossConfig(margin=opt.get("margin", 0.2, float),
                              mining=opt.get("mining", "semi-hard"))
    train_cfg = triplet.TrainConfig(
        steps=opt.get("steps", 2000, int),
        learning_rate=opt.get("learning-rate", 0.05, float),
        optimizer=opt.get("optimizer", "sgd-momentum"),
        log_every=opt.get("log-every", 50, int),
        seed=seed)
    model = build_encoder(EncoderConfig(
        embedding_dim=opt.get("embedding-dim", 64, int), seed=seed))
    features = [feature_map[e.clip_id] for e in manifest.entries]
    trained, trace = triplet.train(model, features, config, sampler, loss, train_cfg)
    out = opt.require("out")
    save_checkpoint(trained, out)
    trace_path = opt.get("trace")
    if trace_path:
        triplet.write_trace(trace, trace_path)
    final = trace[-1][1] if trace else float("nan")
    print(f"trained {train_cfg.steps} steps; final logged loss {final:.6f}; "
          f"checkpoint {out}")
    return 0


def _cmd_embed(opt: _Options) -> int:
    manifest = load_manifest(opt.require("manifest"))
    config = FrontendConfig()
    feature_map = _load_feature_map(manifest, opt.get("features-dir"), config)
    rep = probes.RepresentationSpec(kind="encoder",
                                    checkpoint=opt.require("checkpoint"),
                                    tap=opt.get("tap", "final"))
    vectors = probes.extract_clip_vectors(manifest, rep, config, feature_map)
    out = opt.require("out")
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["clip_id"] + [f"dim{i}" for i in range(vectors.shape[1])])
        for entry, row in zip(manifest.entries, vectors):
            writer.writerow([entry.clip_id] + [repr(float(v)) for v in row])
    print(f"wrote {vectors.shape[0]} x {vectors.shape[1]} embeddings to {out}")
    return 0


def _cmd_eval(opt: _Options) -> int:
    manifest = load_manifest(opt.require("manifest"))
    config = FrontendConfig()
    feature_map = _load_feature_map(manifest, opt.get("features-dir"), config)
    kind = opt.get("rep", "encoder")
    tap = opt.get("tap", "final")
    checkpoint = opt.get("checkpoint")
    probe = probes.ProbeConfig(model=opt.get("probe", "logreg"))
    protocol = opt.get("protocol", "inter")
    task = opt.get("task", "label")
    n_splits = opt.get("splits", 5, int)
    seed = opt.get("seed", 0, int)
    jobs = opt.get("jobs", 1, int)
    speaker_norm = bool(opt.get("speaker-norm", False, bool))

    if kind == "encoder" and checkpoint is None:
        raise UsageError("--rep encoder requires --checkpoint")
    taps: list[str]
    if kind == "logmel-stats":
        taps = ["final"]  # unused by the stats baseline
    elif tap == "all":
        probe_model = (load_checkpoint(checkpoint) if kind == "encoder"
                       else build_encoder(EncoderConfig(seed=opt.get("rep-seed", 0, int))))
        taps = probe_model.tap_names()
    else:
        taps = [tap]

    reports = []
    for tap_name in taps:
        rep = probes.RepresentationSpec(
            kind=kind, checkpoint=checkpoint, tap=tap_name,
            seed=opt.get("rep-seed", 0, int), speaker_l2_norm=speaker_norm)
        if protocol == "intra":
            reports.append(probes.eval_intra(manifest, rep, probe,
                                             n_splits=n_splits, seed=seed,
                                             config=config, features=feature_map,
                                             jobs=jobs))
        else:
            reports.append(probes.eval_inter(manifest, rep, probe,
                                             n_splits=n_splits, seed=seed,
                                             task=task, config=config,
                                             features=feature_map, jobs=jobs))
    print(probes.format_report_table(reports))
    out = opt.get("out")
    if out:
        probes.write_report_csv(reports, out)
    return 0


def _cmd_distill(opt: _Options) -> int:
    manifest = load_manifest(opt.require("manifest"))
    config = FrontendConfig()
    feature_map = _load_feature_map(manifest, opt.get("features-dir"), config)
    teacher = load_checkpoint(opt.require("teacher"))
    student_cfg = adapt.student_config_for(
        half_width_config(teacher.config, seed=opt.get("seed", 0, int)),
        tap_width(teacher.config, opt.get("tap", "final")))
    distill_cfg = adapt.DistillConfig(
        student=student_cfg, teacher_tap=opt.get("tap", "final"),
        steps=opt.get("steps", 400, int),
        learning_rate=opt.get("learning-rate", 0.02, float),
        seed=opt.get("seed", 0, int))
    features = [feature_map[e.clip_id] for e in manifest.entries]
    student, result = adapt.distill(distill_cfg, features, config, teacher=teacher)
    out = opt.require("out")
    save_checkpoint(student, out)
    print(f"student {result.student_parameters} params "
          f"(teacher {result.teacher_parameters}, "
          f"{result.reduction_ratio:.1f}x reduction); "
          f"holdout mse {result.holdout_mse:.6f}, "
          f"cosine {result.holdout_cosine:.4f}; checkpoint {out}")
    return 0


def _cmd_finetune(opt: _Options) -> int:
    manifest = load_manifest(opt.require("manifest"))
    config = FrontendConfig()
    feature_map = _load_feature_map(manifest, opt.get("features-dir"), config)
    model = load_checkpoint(opt.require("checkpoint"))
    ft_cfg = adapt.FinetuneConfig(
        learning_rate=opt.get("learning-rate", 0.02, float),
        max_steps=opt.get("max-steps", 600, int),
        steps_per_eval=opt.get("steps-per-eval", 50, int),
        patience=opt.get("patience", 5, int),
        seed=opt.get("seed", 0, int))
    if opt.get("per-speaker", False, bool):
        result = adapt.finetune_per_speaker(model, manifest, ft_cfg, config,
                                            feature_map)
        print(f"stage-1 mean {result.stage1_mean:.4f}, "
              f"stage-2 mean {result.stage2_mean:.4f}; "
              f"improved {result.improved}, unchanged {result.unchanged}, "
              f"degraded {result.degraded}"
              + (f"; excluded: {', '.join(result.excluded)}"
                 if result.excluded else ""))
        out = opt.get("out")
        if out:
            adapt.write_per_speaker_csv(result, out)
    else:
        result = adapt.finetune(model, manifest, ft_cfg, config, feature_map)
        print(f"test accuracy {result.test_accuracy:.4f} "
              f"(head-at-init {result.init_accuracy:.4f}, "
              f"best dev step {result.best_step})")
    return 0


def _cmd_report(opt: _Options) -> int:
    path = opt.require("accuracies")
    table = report_mod.AccuracyTable()
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["model", "task", "accuracy"]:
                raise DataError(
                    f"{path}: expected header model,task,accuracy, "
                    f"got {reader.fieldnames}")
            for row in reader:
                table.add(row["model"], row["task"], float(row["accuracy"]))
    except OSError as exc:
        raise DataError(f"cannot read accuracies CSV {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"bad accuracy value in {path}: {exc}") from exc
    effect = report_mod.model_effect_regression(table)
    print(report_mod.format_effect_table(effect))
    out = opt.get("out")
    if out:
        report_mod.write_effect_csv(effect, out)
    return 0


_HANDLERS = {
    "synth-data": _cmd_synth_data,
    "featurize": _cmd_featurize,
    "train": _cmd_train,
    "embed": _cmd_embed,
    "eval": _cmd_eval,
    "distill": _cmd_distill,
    "finetune": _cmd_finetune,
    "report": _cmd_report,
}


def run(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    section = _config_section(args.config, args.command)
    return _HANDLERS[args.command](_Options(args, section))


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
