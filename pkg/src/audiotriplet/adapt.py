"""Model adaptation: embedding distillation and end-to-end fine-tuning.

Distillation trains a smaller encoder to regress a teacher's tap embeddings
(mean squared error over sampled context windows). Fine-tuning puts a dense
softmax head on the final tap and trains everything with cross-entropy under
early stopping on a dev split; the per-speaker variant first fine-tunes a
common model, then continues separately on each speaker.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .corpus import Manifest, read_wav
from .encoder import (
    EncoderConfig,
    EncoderModel,
    build_encoder,
    embed,
    forward_graph,
    load_checkpoint,
    tap_width,
)
from .errors import ContractError, DivergenceError, ProtocolError, ValidationError
from .frontend import ClipFeatures, ContextWindow, FrontendConfig, frame_context_windows, stft_logmel


@dataclass(frozen=True)
class DistillConfig:
    student: EncoderConfig
    teacher_checkpoint: str | Path | None = None
    teacher_tap: str = "final"
    steps: int = 400
    learning_rate: float = 0.02
    batch_size: int = 32
    holdout_fraction: float = 0.1
    log_every: int = 25
    seed: int = 0

    def validate(self) -> None:
        self.student.validate()
        if self.steps < 0:
            raise ValidationError(f"steps must be >= 0, got {self.steps}")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValidationError(
                f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValidationError(
                f"holdout_fraction must be in (0, 1), got {self.holdout_fraction}")
        if self.log_every < 1:
            raise ValidationError(f"log_every must be >= 1, got {self.log_every}")


@dataclass
class DistillReport:
    holdout_mse: float
    holdout_cosine: float
    teacher_parameters: int
    student_parameters: int
    reduction_ratio: float
    trace: list[tuple[int, float]] = field(default_factory=list)


def student_config_for(student: EncoderConfig, target_width: int) -> EncoderConfig:
    """Student config whose final output width matches the teacher tap.

    Inserts a trailing dense adapter when the embedding width differs;
    normalization of the final output is switched off so the student can
    match arbitrary target magnitudes.
    """
    if student.adapter_dim is not None:
        if student.adapter_dim != target_width:
            raise ContractError(
                f"student adapter width {student.adapter_dim} does not match "
                f"teacher tap width {target_width}")
        cfg = student
    elif student.embedding_dim != target_width:
        cfg = replace(student, adapter_dim=target_width)
    else:
        cfg = student
    return replace(cfg, l2_normalize_output=False)


def _all_windows(features: list[ClipFeatures], frontend: FrontendConfig) -> list[ContextWindow]:
    windows: list[ContextWindow] = []
    for f in features:
        if f.n_frames >= frontend.context_frames:
            windows.extend(frame_context_windows(f, frontend))
    return windows


def distill(config: DistillConfig, features: list[ClipFeatures],
            frontend: FrontendConfig | None = None,
            teacher: EncoderModel | None = None,
            student: EncoderModel | None = None,
            ) -> tuple[EncoderModel, DistillReport]:
    """Train the student to regress the teacher's tap over corpus windows.

    Returns the trained student and a report with held-out MSE, mean cosine
    similarity to the teacher, and the parameter-reduction ratio. An injected
    ``student`` model is used as-is (its width must already match).
    """
    config.validate()
    frontend = frontend or FrontendConfig()
    if teacher is None:
        if config.teacher_checkpoint is None:
            raise ValidationError("distill needs a teacher checkpoint or model")
        teacher = load_checkpoint(config.teacher_checkpoint)
    if config.teacher_tap not in teacher.tap_names():
        raise ValidationError(
            f"teacher has no tap {config.teacher_tap!r}; "
            f"expected one of {teacher.tap_names()}")
    width = tap_width(teacher.config, config.teacher_tap)
    if student is None:
        student = build_encoder(student_config_for(config.student, width))
    elif tap_width(student.config, "final") != width:
        raise ContractError(
            f"injected student final width {tap_width(student.config, 'final')} "
            f"does not match teacher tap width {width}")
    else:
        student = student.copy()

    windows = _all_windows(features, frontend)
    if len(windows) < 2:
        raise ValidationError("distillation needs at least 2 context windows")
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(windows))
    n_hold = max(1, int(round(config.holdout_fraction * len(windows))))
    holdout = [windows[i] for i in perm[:n_hold]]
    train_pool = [windows[i] for i in perm[n_hold:]]
    if not train_pool:
        raise ValidationError("holdout fraction leaves no training windows")

    trace: list[tuple[int, float]] = []
    block: list[float] = []
    for step in range(1, config.steps + 1):
        pick = rng.choice(len(train_pool), size=min(config.batch_size, len(train_pool)),
                          replace=False)
        batch = [train_pool[i] for i in pick]
        targets = embed(teacher, batch, tap=config.teacher_tap).rows
        x = np.stack([w.values for w in batch])[:, None, :, :]
        try:
            tape = Tape()
            param_ids = {name: tape.parameter(value)
                         for name, value in student.params.items()}
            taps = forward_graph(tape, student.config, param_ids, tape.leaf(x))
            diff = tape.sub(taps["final"], tape.leaf(targets))
            loss_id = tape.mean_all(tape.mul(diff, diff))
            grads = tape.backward(loss_id)
        except DivergenceError as exc:
            raise DivergenceError(
                f"distillation diverged at step {step} "
                f"(learning rate {config.learning_rate}): {exc}",
                step=step, learning_rate=config.learning_rate) from exc
        value = float(tape.value(loss_id))
        if not np.isfinite(value):
            raise DivergenceError(
                f"non-finite distillation loss at step {step}",
                step=step, learning_rate=config.learning_rate)
        block.append(value)
        for name, pid in param_ids.items():
            student.params[name] -= config.learning_rate * grads[pid]
        if step % config.log_every == 0:
            trace.append((step, float(np.mean(block))))
            block = []

    teacher_rows = embed(teacher, holdout, tap=config.teacher_tap).rows
    student_rows = embed(student, holdout, tap="final").rows
    mse = float(np.mean((student_rows - teacher_rows) ** 2))
    norms = np.linalg.norm(student_rows, axis=1) * np.linalg.norm(teacher_rows, axis=1)
    dots = np.einsum("ij,ij->i", student_rows, teacher_rows)
    cosine = float(np.mean(np.where(norms > 0, dots / np.where(norms > 0, norms, 1.0), 0.0)))
    report = DistillReport(
        holdout_mse=mse, holdout_cosine=cosine,
        teacher_parameters=teacher.n_parameters(),
        student_parameters=student.n_parameters(),
        reduction_ratio=teacher.n_parameters() / max(1, student.n_parameters()),
        trace=trace)
    return student, report


@dataclass(frozen=True)
class FinetuneConfig:
    learning_rate: float = 0.02
    steps_per_eval: int = 50
    max_steps: int = 600
    patience: int = 5
    batch_size: int = 24
    train_fraction: float = 0.8
    dev_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        total = self.train_fraction + self.dev_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"split fractions must sum to 1, got {total}")
        if min(self.train_fraction, self.dev_fraction, self.test_fraction) <= 0:
            raise ValidationError("all split fractions must be positive")
        if self.patience < 1:
            raise ValidationError(f"patience must be >= 1, got {self.patience}")
        if self.steps_per_eval < 1 or self.max_steps < 0 or self.batch_size < 1:
            raise ValidationError("steps_per_eval, max_steps, batch_size must be positive")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValidationError(
                f"learning_rate must be finite and >= 0, got {self.learning_rate}")


@dataclass
class FinetuneResult:
    model: EncoderModel
    head_weights: np.ndarray
    head_bias: np.ndarray
    classes: tuple
    test_accuracy: float
    init_accuracy: float
    best_step: int
    dev_trace: list[tuple[int, float]]
    splits: dict[str, list[str]]  # partition -> clip ids


@dataclass
class _ClipSet:
    """Windows and label indices for a set of clips, ready for batching."""

    clip_ids: list[str]
    clip_windows: list[list[ContextWindow]]
    clip_labels: list[int]

    def window_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        xs = [w.values for wins in self.clip_windows for w in wins]
        ys = [lab for wins, lab in zip(self.clip_windows, self.clip_labels)
              for _ in wins]
        return np.stack(xs)[:, None, :, :], np.array(ys, dtype=np.intp)


def _split_three(labels: list[str], fractions: tuple[float, float, float],
                 rng: np.random.Generator, max_attempts: int = 100):
    """Stratified train/dev/test clip split; every class lands in all three."""
    _, dev_frac, test_frac = fractions
    for _ in range(max_attempts):
        train_idx: list[int] = []
        dev_idx: list[int] = []
        test_idx: list[int] = []
        ok = True
        for lab in sorted(set(labels)):
            idx = [i for i, l in enumerate(labels) if l == lab]
            if len(idx) < 3:
                ok = False
                break
            order = rng.permutation(len(idx))
            n_test = max(1, round(test_frac * len(idx)))
            n_dev = max(1, round(dev_frac * len(idx)))
            if n_test + n_dev >= len(idx):
                n_test, n_dev = 1, 1
            test_idx += [idx[k] for k in order[:n_test]]
            dev_idx += [idx[k] for k in order[n_test:n_test + n_dev]]
            train_idx += [idx[k] for k in order[n_test + n_dev:]]
        if ok:
            return sorted(train_idx), sorted(dev_idx), sorted(test_idx)
    raise ProtocolError(
        "cannot build an 80/10/10 split: some class has fewer than 3 clips")


def clip_accuracy(model: EncoderModel, head_w: np.ndarray, head_b: np.ndarray,
                  clip_set: _ClipSet) -> float:
    """Clip-level accuracy: mean of window logits, then argmax."""
    if not clip_set.clip_ids:
        raise ValidationError("empty clip set")
    hits = 0
    for wins, lab in zip(clip_set.clip_windows, clip_set.clip_labels):
        rows = embed(model, wins, tap="final").rows
        logits = rows @ head_w + head_b
        hits += int(np.argmax(logits.mean(axis=0)) == lab)
    return hits / len(clip_set.clip_ids)


def _finetune_loop(model: EncoderModel, head_w: np.ndarray, head_b: np.ndarray,
                   train_set: _ClipSet, dev_set: _ClipSet,
                   config: FinetuneConfig, rng: np.random.Generator):
    """Window-level cross-entropy training with early stopping on dev clips.

    Returns (model, head_w, head_b, dev_trace, best_step) at the best-dev
    checkpoint; the dev evaluation at step 0 is the initial best.
    """
    model = model.copy()
    head_w = head_w.copy()
    head_b = head_b.copy()
    x_all, y_all = train_set.window_arrays()

    best_acc = clip_accuracy(model, head_w, head_b, dev_set)
    best = (copy.deepcopy(model.params), head_w.copy(), head_b.copy(), 0)
    trace = [(0, best_acc)]
    fails = 0
    for step in range(1, config.max_steps + 1):
        pick = rng.choice(len(y_all), size=min(config.batch_size, len(y_all)),
                          replace=False)
        try:
            tape = Tape()
            param_ids = {name: tape.parameter(value)
                         for name, value in model.params.items()}
            w_id = tape.parameter(head_w)
            b_id = tape.parameter(head_b)
            taps = forward_graph(tape, model.config, param_ids, tape.leaf(x_all[pick]))
            logits = tape.dense(taps["final"], w_id, b_id)
            loss_id = tape.softmax_xent(logits, y_all[pick])
            grads = tape.backward(loss_id)
        except DivergenceError as exc:
            raise DivergenceError(
                f"fine-tuning diverged at step {step} "
                f"(learning rate {config.learning_rate}): {exc}",
                step=step, learning_rate=config.learning_rate) from exc
        for name, pid in param_ids.items():
            model.params[name] -= config.learning_rate * grads[pid]
        head_w -= config.learning_rate * grads[w_id]
        head_b -= config.learning_rate * grads[b_id]
        if step % config.steps_per_eval == 0:
            acc = clip_accuracy(model, head_w, head_b, dev_set)
            trace.append((step, acc))
            if acc > best_acc:
                best_acc = acc
                best = (copy.deepcopy(model.params), head_w.copy(), head_b.copy(), step)
                fails = 0
            else:
                fails += 1
                if fails >= config.patience:
                    break
    model.params, head_w, head_b, best_step = (
        copy.deepcopy(best[0]), best[1].copy(), best[2].copy(), best[3])
    return model, head_w, head_b, trace, best_step


def _load_features(manifest: Manifest, frontend: FrontendConfig,
                   features: dict[str, ClipFeatures] | None) -> dict[str, ClipFeatures]:
    out = dict(features) if features else {}
    for entry in manifest.entries:
        if entry.clip_id not in out:
            out[entry.clip_id] = stft_logmel(read_wav(entry.path), frontend)
    return out


def _clip_set(manifest: Manifest, indices, feature_map: dict[str, ClipFeatures],
              frontend: FrontendConfig, classes: tuple) -> _ClipSet:
    index = {c: i for i, c in enumerate(classes)}
    ids, wins, labs = [], [], []
    for i in indices:
        entry = manifest.entries[i]
        feats = feature_map[entry.clip_id]
        if feats.n_frames < frontend.context_frames:
            continue
        ids.append(entry.clip_id)
        wins.append(frame_context_windows(feats, frontend))
        labs.append(index[entry.label])
    return _ClipSet(clip_ids=ids, clip_windows=wins, clip_labels=labs)


def finetune(model: EncoderModel, manifest: Manifest, config: FinetuneConfig,
             frontend: FrontendConfig | None = None,
             features: dict[str, ClipFeatures] | None = None) -> FinetuneResult:
    """Fine-tune encoder + dense softmax head on the manifest's label task."""
    manifest.validate()
    config.validate()
    frontend = frontend or FrontendConfig()
    feature_map = _load_features(manifest, frontend, features)
    classes = tuple(sorted({entry.label for entry in manifest.entries}))
    labels = [entry.label for entry in manifest.entries]
    rng = np.random.default_rng(config.seed)
    fractions = (config.train_fraction, config.dev_fraction, config.test_fraction)
    train_idx, dev_idx, test_idx = _split_three(labels, fractions, rng)

    train_set = _clip_set(manifest, train_idx, feature_map, frontend, classes)
    dev_set = _clip_set(manifest, dev_idx, feature_map, frontend, classes)
    test_set = _clip_set(manifest, test_idx, feature_map, frontend, classes)
    if not train_set.clip_ids or not dev_set.clip_ids or not test_set.clip_ids:
        raise ProtocolError("a split partition has no usable clips")

    head_w = np.zeros((tap_width(model.config, "final"), len(classes)))
    head_b = np.zeros(len(classes))
    init_accuracy = clip_accuracy(model, head_w, head_b, test_set)
    tuned, head_w, head_b, trace, best_step = _finetune_loop(
        model, head_w, head_b, train_set, dev_set, config, rng)
    return FinetuneResult(
        model=tuned, head_weights=head_w, head_bias=head_b, classes=classes,
        test_accuracy=clip_accuracy(tuned, head_w, head_b, test_set),
        init_accuracy=init_accuracy, best_step=best_step, dev_trace=trace,
        splits={"train": [manifest.entries[i].clip_id for i in train_idx],
                "dev": [manifest.entries[i].clip_id for i in dev_idx],
                "test": [manifest.entries[i].clip_id for i in test_idx]})


@dataclass
class SpeakerOutcome:
    speaker: str
    stage1_accuracy: float
    stage2_accuracy: float

    @property
    def delta(self) -> float:
        return self.stage2_accuracy - self.stage1_accuracy


@dataclass
class PerSpeakerReport:
    outcomes: list[SpeakerOutcome]
    excluded: list[str]
    improved: int
    unchanged: int
    degraded: int

    @property
    def stage1_mean(self) -> float:
        return float(np.mean([o.stage1_accuracy for o in self.outcomes]))

    @property
    def stage2_mean(self) -> float:
        return float(np.mean([o.stage2_accuracy for o in self.outcomes]))


def write_per_speaker_csv(report: PerSpeakerReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["speaker", "stage1_acc", "stage2_acc", "delta"])
        for o in report.outcomes:
            writer.writerow([o.speaker, f"{o.stage1_accuracy:.6f}",
                             f"{o.stage2_accuracy:.6f}", f"{o.delta:.6f}"])


def finetune_per_speaker(model: EncoderModel, manifest: Manifest,
                         config: FinetuneConfig,
                         frontend: FrontendConfig | None = None,
                         features: dict[str, ClipFeatures] | None = None,
                         ) -> PerSpeakerReport:
    """Two-stage personalization: shared fine-tune, then per-speaker.

    Stage 1 fine-tunes one model on the union of all speakers' train
    partitions (early stop on the union dev). Stage 2 continues from the
    stage-1 checkpoint separately per speaker on that speaker's partitions.
    Speakers whose clips cannot fill train/dev/test are excluded and listed.
    """
    manifest.validate()
    config.validate()
    frontend = frontend or FrontendConfig()
    feature_map = _load_features(manifest, frontend, features)
    classes = tuple(sorted({entry.label for entry in manifest.entries}))
    fractions = (config.train_fraction, config.dev_fraction, config.test_fraction)

    speakers = sorted({entry.speaker_id for entry in manifest.entries})
    splits: dict[str, tuple[list[int], list[int], list[int]]] = {}
    excluded: list[str] = []
    for spk_index, speaker in enumerate(speakers):
        idx = [i for i, e in enumerate(manifest.entries) if e.speaker_id == speaker]
        rng = np.random.default_rng([config.seed, spk_index])
        try:
            tr, dv, te = _split_three([manifest.entries[i].label for i in idx],
                                      fractions, rng)
        except ProtocolError:
            excluded.append(speaker)
            continue
        splits[speaker] = ([idx[k] for k in tr], [idx[k] for k in dv],
                           [idx[k] for k in te])
    if not splits:
        raise ProtocolError("no speaker has enough clips for an 80/10/10 split")

    union_train = [i for tr, _, _ in splits.values() for i in tr]
    union_dev = [i for _, dv, _ in splits.values() for i in dv]
    train_set = _clip_set(manifest, sorted(union_train), feature_map, frontend, classes)
    dev_set = _clip_set(manifest, sorted(union_dev), feature_map, frontend, classes)
    head_w = np.zeros((tap_width(model.config, "final"), len(classes)))
    head_b = np.zeros(len(classes))
    rng = np.random.default_rng(config.seed)
    stage1, w1, b1, _, _ = _finetune_loop(model, head_w, head_b, train_set,
                                          dev_set, config, rng)

    outcomes: list[SpeakerOutcome] = []
    for spk_index, speaker in enumerate(sorted(splits)):
        tr, dv, te = splits[speaker]
        spk_train = _clip_set(manifest, tr, feature_map, frontend, classes)
        spk_dev = _clip_set(manifest, dv, feature_map, frontend, classes)
        spk_test = _clip_set(manifest, te, feature_map, frontend, classes)
        if not spk_train.clip_ids or not spk_dev.clip_ids or not spk_test.clip_ids:
            excluded.append(speaker)
            continue
        acc1 = clip_accuracy(stage1, w1, b1, spk_test)
        rng2 = np.random.default_rng([config.seed, 1, spk_index])
        stage2, w2, b2, _, _ = _finetune_loop(stage1, w1, b1, spk_train,
                                              spk_dev, config, rng2)
        acc2 = clip_accuracy(stage2, w2, b2, spk_test)
        outcomes.append(SpeakerOutcome(speaker=speaker, stage1_accuracy=acc1,
                                       stage2_accuracy=acc2))

    if not outcomes:
        raise ProtocolError("no speaker completed both fine-tuning stages")
    return PerSpeakerReport(
        outcomes=outcomes, excluded=excluded,
        improved=sum(1 for o in outcomes if o.delta > 0),
        unchanged=sum(1 for o in outcomes if o.delta == 0),
        degraded=sum(1 for o in outcomes if o.delta < 0))
