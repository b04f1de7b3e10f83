"""Downstream evaluation: representations, shallow probes, and protocols.

A representation turns a clip's log-mel features into a single fixed-width
vector (per-window embeddings averaged over time, or a band-statistics
baseline). Shallow classifiers (multinomial logistic regression and shrinkage
LDA) are then trained on those vectors under two protocols: inter-speaker
(stratified random splits, speaker-disjoint when the task demands it) and
intra-speaker (train and test within one speaker at a time).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .corpus import Manifest, read_wav
from .encoder import EncoderConfig, EncoderModel, build_encoder, embed, load_checkpoint
from .errors import (
    DegenerateFitError,
    ProtocolError,
    SingularCovarianceError,
    ValidationError,
)
from .frontend import ClipFeatures, FrontendConfig, eval_config, frame_context_windows, stft_logmel

REPRESENTATION_KINDS = ("encoder", "logmel-stats", "random-encoder")


@dataclass
class RepresentationSpec:
    """How to turn a clip into one vector.

    kind "encoder" reads a trained checkpoint (or an injected model) and
    averages per-window embeddings at ``tap``; "random-encoder" does the same
    with a freshly initialized network; "logmel-stats" concatenates per-band
    mean and standard deviation over frames.
    """

    kind: str = "encoder"
    checkpoint: str | Path | None = None
    tap: str = "final"
    seed: int = 0
    speaker_l2_norm: bool = False
    model: EncoderModel | None = None  # injected model wins over checkpoint

    def validate(self) -> None:
        if self.kind not in REPRESENTATION_KINDS:
            raise ValidationError(
                f"unknown representation kind {self.kind!r}; "
                f"expected one of {REPRESENTATION_KINDS}")
        if self.kind == "encoder" and self.model is None:
            if self.checkpoint is None:
                raise ValidationError("encoder representation requires a checkpoint")
            if not Path(self.checkpoint).is_file():
                raise ValidationError(f"checkpoint not found: {self.checkpoint}")

    def describe(self) -> str:
        if self.kind == "encoder":
            name = f"encoder[{self.tap}]"
        elif self.kind == "random-encoder":
            name = f"random-encoder[seed={self.seed},{self.tap}]"
        else:
            name = "logmel-stats"
        return name + ("+spknorm" if self.speaker_l2_norm else "")

    def resolve_model(self) -> EncoderModel:
        """Load (and cache) the encoder behind this spec."""
        if self.kind == "logmel-stats":
            raise ValidationError("logmel-stats has no model")
        if self.model is None:
            if self.kind == "encoder":
                self.model = load_checkpoint(self.checkpoint)
            else:
                self.model = build_encoder(EncoderConfig(seed=self.seed))
        return self.model


@dataclass(frozen=True)
class ProbeConfig:
    model: str = "logreg"  # "logreg" | "lda"
    l2_lambda: float = 1e-4
    max_iters: int = 500
    tol: float = 1e-6
    shrinkage: float = 0.1

    def validate(self) -> None:
        if self.model not in ("logreg", "lda"):
            raise ValidationError(f"unknown probe model {self.model!r}")
        if self.l2_lambda < 0:
            raise ValidationError(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        if not 0.0 <= self.shrinkage <= 1.0:
            raise ValidationError(f"shrinkage must be in [0, 1], got {self.shrinkage}")
        if self.max_iters < 1 or self.tol <= 0:
            raise ValidationError("max_iters must be >= 1 and tol > 0")


def clip_vector(rep: RepresentationSpec, clip: ClipFeatures,
                config: FrontendConfig | None = None) -> np.ndarray:
    """One fixed-width vector per clip (time-averaged embedding or stats)."""
    rep.validate()
    if rep.kind == "logmel-stats":
        if clip.n_frames < 1:
            raise ValidationError(f"clip {clip.clip_id} has no frames")
        return np.concatenate([clip.frames.mean(axis=0), clip.frames.std(axis=0)])
    windows = frame_context_windows(clip, eval_config(config))
    rows = embed(rep.resolve_model(), windows, tap=rep.tap).rows
    return rows.mean(axis=0)


def extract_clip_vectors(manifest: Manifest, rep: RepresentationSpec,
                         config: FrontendConfig | None = None,
                         features: dict[str, ClipFeatures] | None = None,
                         jobs: int = 1) -> np.ndarray:
    """Clip vectors for every manifest entry, in manifest order.

    ``features`` maps clip_id to precomputed features; entries missing from it
    are loaded from the WAV path. ``jobs > 1`` parallelizes across clips with
    threads (pure numpy work releases the GIL in the heavy kernels).
    """
    config = config or FrontendConfig()

    def one(entry) -> np.ndarray:
        feats = features.get(entry.clip_id) if features else None
        if feats is None:
            feats = stft_logmel(read_wav(entry.path), config)
        return clip_vector(rep, feats, config)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, manifest.entries))
    else:
        rows = [one(entry) for entry in manifest.entries]
    return np.stack(rows)


def speaker_l2_normalize(vectors: np.ndarray, speaker_ids,
                         means: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Center each vector at its speaker's mean, then scale to unit L2 norm.

    ``means`` supplies precomputed per-speaker means (train-side statistics);
    speakers missing from it fall back to their mean within ``vectors``.
    Zero vectors after centering stay zero.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    speaker_ids = list(speaker_ids)
    if len(speaker_ids) != len(vectors):
        raise ValidationError(
            f"{len(vectors)} vectors but {len(speaker_ids)} speaker ids")
    out = np.empty_like(vectors)
    for speaker in set(speaker_ids):
        idx = [i for i, s in enumerate(speaker_ids) if s == speaker]
        mean = means.get(speaker) if means else None
        if mean is None:
            mean = vectors[idx].mean(axis=0)
        centered = vectors[idx] - mean
        norms = np.linalg.norm(centered, axis=1, keepdims=True)
        out[idx] = np.where(norms > 0, centered / np.where(norms > 0, norms, 1.0), 0.0)
    return out


def speaker_means(vectors: np.ndarray, speaker_ids) -> dict[str, np.ndarray]:
    vectors = np.asarray(vectors, dtype=np.float64)
    out: dict[str, np.ndarray] = {}
    for speaker in set(speaker_ids):
        idx = [i for i, s in enumerate(speaker_ids) if s == speaker]
        out[speaker] = vectors[idx].mean(axis=0)
    return out


@dataclass(frozen=True)
class LinearClassifier:
    """argmax of X @ weights + bias over known class labels."""

    weights: np.ndarray  # (dim, n_classes)
    bias: np.ndarray  # (n_classes,)
    classes: tuple  # label per column

    def scores(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        z = self.scores(X)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X: np.ndarray):
        cols = self.scores(X).argmax(axis=1)
        return [self.classes[c] for c in cols]

    def accuracy(self, X: np.ndarray, y) -> float:
        pred = self.predict(X)
        y = list(y)
        return float(sum(p == t for p, t in zip(pred, y)) / len(y))


def _encode_labels(y) -> tuple[np.ndarray, tuple]:
    classes = tuple(sorted(set(y)))
    index = {c: i for i, c in enumerate(classes)}
    return np.array([index[c] for c in y]), classes


def logreg_loss_grad(W: np.ndarray, b: np.ndarray, X: np.ndarray, yi: np.ndarray,
                     n_classes: int, l2_lambda: float):
    """Mean cross-entropy + (λ/2)||W||² and its gradients."""
    n = X.shape[0]
    z = X @ W + b
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float((logsum - z[np.arange(n), yi]).mean()) \
        + 0.5 * l2_lambda * float((W * W).sum())
    p = np.exp(z - logsum[:, None])
    p[np.arange(n), yi] -= 1.0
    grad_w = X.T @ p / n + l2_lambda * W
    grad_b = p.mean(axis=0)
    return loss, grad_w, grad_b


def fit_logreg(X: np.ndarray, y, config: ProbeConfig | None = None) -> LinearClassifier:
    """Multinomial logistic regression by full-batch gradient descent.

    Deterministic: zero init, backtracking line search (halve until the Armijo
    decrease holds), stop when the gradient norm drops below tol.
    """
    config = config or ProbeConfig(model="logreg")
    config.validate()
    X = np.asarray(X, dtype=np.float64)
    yi, classes = _encode_labels(y)
    if len(classes) < 2:
        raise DegenerateFitError(
            f"need >= 2 classes to fit a classifier, got {len(classes)}")
    if X.shape[0] != len(yi):
        raise ValidationError(f"{X.shape[0]} rows but {len(yi)} labels")

    W = np.zeros((X.shape[1], len(classes)))
    b = np.zeros(len(classes))
    step = 1.0
    for _ in range(config.max_iters):
        loss, grad_w, grad_b = logreg_loss_grad(W, b, X, yi, len(classes),
                                                config.l2_lambda)
        grad_sq = float((grad_w * grad_w).sum() + (grad_b * grad_b).sum())
        if np.sqrt(grad_sq) < config.tol:
            break
        step = min(1.0, step * 2.0)  # allow recovery after conservative steps
        while step > 1e-12:
            new_loss, _, _ = logreg_loss_grad(W - step * grad_w, b - step * grad_b,
                                              X, yi, len(classes), config.l2_lambda)
            if new_loss <= loss - 1e-4 * step * grad_sq:
                break
            step *= 0.5
        W = W - step * grad_w
        b = b - step * grad_b
    return LinearClassifier(weights=W, bias=b, classes=classes)


def fit_lda(X: np.ndarray, y, shrinkage: float = 0.1) -> LinearClassifier:
    """Linear discriminant analysis with isotropic covariance shrinkage.

    Pooled within-class covariance Σ (divisor n − C), shrunk to
    (1−γ)Σ + γ·(tr(Σ)/dim)·I, solved by Cholesky factorization. Scores are
    the usual linear discriminants with log class priors, so a softmax over
    them gives class posteriors.
    """
    if not 0.0 <= shrinkage <= 1.0:
        raise ValidationError(f"shrinkage must be in [0, 1], got {shrinkage}")
    X = np.asarray(X, dtype=np.float64)
    yi, classes = _encode_labels(y)
    if len(classes) < 2:
        raise DegenerateFitError(
            f"need >= 2 classes to fit a classifier, got {len(classes)}")
    n, dim = X.shape
    counts = np.bincount(yi, minlength=len(classes))
    if counts.min() < 2:
        raise DegenerateFitError("LDA needs >= 2 samples in every class")

    means = np.stack([X[yi == c].mean(axis=0) for c in range(len(classes))])
    centered = X - means[yi]
    cov = centered.T @ centered / (n - len(classes))
    cov = (1.0 - shrinkage) * cov + shrinkage * (np.trace(cov) / dim) * np.eye(dim)
    try:
        factor = scipy.linalg.cho_factor(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(
            "pooled covariance is singular; increase shrinkage above 0") from exc
    solved = scipy.linalg.cho_solve(factor, means.T)  # Σ_γ^{-1} μ_c per column
    priors = counts / n
    bias = -0.5 * np.einsum("dc,cd->c", solved, means) + np.log(priors)
    return LinearClassifier(weights=solved, bias=bias, classes=classes)


def fit_probe(X: np.ndarray, y, config: ProbeConfig) -> LinearClassifier:
    config.validate()
    if config.model == "logreg":
        return fit_logreg(X, y, config)
    return fit_lda(X, y, config.shrinkage)


# Hyperparameter grid searched on a validation fifth of each training split.
LOGREG_LAMBDA_GRID = (1e-4, 1e-2)
LDA_SHRINKAGE_GRID = (0.1, 0.5)


@dataclass
class EvalReport:
    task: str
    representation: str
    probe: str
    split_accuracies: list[float]
    mean: float
    stddev: float
    speaker_table: dict[str, float] = field(default_factory=dict)
    skipped_speakers: list[str] = field(default_factory=list)

    def validate(self) -> None:
        for acc in self.split_accuracies:
            if not 0.0 <= acc <= 1.0:
                raise ValidationError(f"accuracy {acc} outside [0, 1]")
        if self.split_accuracies:
            if abs(self.mean - float(np.mean(self.split_accuracies))) > 1e-9:
                raise ValidationError("report mean inconsistent with split list")

    def rows(self) -> list[dict]:
        """CSV rows: task,rep,probe,split,speaker,accuracy."""
        out = []
        if self.speaker_table:
            for speaker in sorted(self.speaker_table):
                out.append(dict(task=self.task, rep=self.representation,
                                probe=self.probe, split="", speaker=speaker,
                                accuracy=self.speaker_table[speaker]))
        else:
            for s, acc in enumerate(self.split_accuracies):
                out.append(dict(task=self.task, rep=self.representation,
                                probe=self.probe, split=s, speaker="",
                                accuracy=acc))
        out.append(dict(task=self.task, rep=self.representation, probe=self.probe,
                        split="mean", speaker="", accuracy=self.mean))
        return out


def write_report_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["task", "rep", "probe", "split", "speaker", "accuracy"],
            lineterminator="\n")
        writer.writeheader()
        for report in reports:
            for row in report.rows():
                row = dict(row)
                row["accuracy"] = f"{row['accuracy']:.6f}"
                writer.writerow(row)


def format_report_table(reports) -> str:
    lines = [f"{'task':<16} {'representation':<28} {'probe':<8} "
             f"{'mean':>8} {'stddev':>8}"]
    for report in reports:
        lines.append(f"{report.task:<16} {report.representation:<28} "
                     f"{report.probe:<8} {report.mean:>8.4f} {report.stddev:>8.4f}")
    return "\n".join(lines)


def _stratified_split(labels, test_fraction: float, rng: np.random.Generator):
    """Per-class test allocation: max(1, round(f·n_c)), capped at n_c − 1."""
    labels = list(labels)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for lab in sorted(set(labels)):
        idx = [i for i, l in enumerate(labels) if l == lab]
        if len(idx) < 2:
            raise ProtocolError(
                f"class {lab!r} has {len(idx)} sample(s); need >= 2 to split")
        order = rng.permutation(len(idx))
        n_test = min(len(idx) - 1, max(1, round(test_fraction * len(idx))))
        test_idx += [idx[k] for k in order[:n_test]]
        train_idx += [idx[k] for k in order[n_test:]]
    return sorted(train_idx), sorted(test_idx)


def _speaker_disjoint_split(labels, speakers, test_fraction: float,
                            rng: np.random.Generator, max_attempts: int = 100):
    """Random speaker-level split; resample until both sides cover all classes."""
    unique_speakers = sorted(set(speakers))
    if len(unique_speakers) < 2:
        raise ProtocolError("speaker-independent split needs >= 2 speakers")
    n_test = min(len(unique_speakers) - 1,
                 max(1, round(test_fraction * len(unique_speakers))))
    all_classes = set(labels)
    for _ in range(max_attempts):
        order = rng.permutation(len(unique_speakers))
        test_speakers = {unique_speakers[k] for k in order[:n_test]}
        test_idx = [i for i, s in enumerate(speakers) if s in test_speakers]
        train_idx = [i for i, s in enumerate(speakers) if s not in test_speakers]
        if (set(labels[i] for i in train_idx) == all_classes
                and set(labels[i] for i in test_idx) == all_classes):
            return sorted(train_idx), sorted(test_idx)
    raise ProtocolError(
        f"no speaker-disjoint split covered every class in both halves "
        f"after {max_attempts} attempts")


def _select_and_fit(X_train: np.ndarray, y_train, probe: ProbeConfig,
                    rng: np.random.Generator) -> LinearClassifier:
    """Pick the probe hyperparameter on a validation fifth, refit on all."""
    grid = LOGREG_LAMBDA_GRID if probe.model == "logreg" else LDA_SHRINKAGE_GRID
    try:
        fit_idx, val_idx = _stratified_split(y_train, 0.2, rng)
    except ProtocolError:
        fit_idx, val_idx = [], []  # too few per class: fall back to first point
    best = None
    for value in grid:
        cfg = ProbeConfig(model=probe.model,
                          l2_lambda=value if probe.model == "logreg" else probe.l2_lambda,
                          max_iters=probe.max_iters, tol=probe.tol,
                          shrinkage=value if probe.model == "lda" else probe.shrinkage)
        if not val_idx:
            best = (0.0, cfg)
            break
        try:
            clf = fit_probe(X_train[fit_idx], [y_train[i] for i in fit_idx], cfg)
        except DegenerateFitError:
            continue
        acc = clf.accuracy(X_train[val_idx], [y_train[i] for i in val_idx])
        if best is None or acc > best[0]:
            best = (acc, cfg)
    if best is None:
        raise DegenerateFitError("no probe hyperparameter produced a valid fit")
    return fit_probe(X_train, y_train, best[1])


def _task_labels(manifest: Manifest, task: str) -> list[str]:
    if task == "speaker":
        return [entry.speaker_id for entry in manifest.entries]
    return [entry.label for entry in manifest.entries]


def eval_inter(manifest: Manifest, rep: RepresentationSpec, probe: ProbeConfig,
               n_splits: int = 5, test_fraction: float = 0.2, seed: int = 0,
               task: str = "label", config: FrontendConfig | None = None,
               features: dict[str, ClipFeatures] | None = None,
               vectors: np.ndarray | None = None, jobs: int = 1) -> EvalReport:
    """Inter-speaker protocol: stratified random splits, averaged accuracy.

    When the manifest marks the task speaker-independent (and the target is
    not speaker identity itself), train and test speakers are disjoint in
    every split. Split s draws from default_rng(seed + s) so splits can be
    evaluated in parallel without changing results.
    """
    manifest.validate()
    probe.validate()
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError(f"test_fraction must be in (0, 1), got {test_fraction}")
    labels = _task_labels(manifest, task)
    if min(np.bincount(_encode_labels(labels)[0])) < 2:
        raise ProtocolError("every class must appear at least twice")
    speakers = [entry.speaker_id for entry in manifest.entries]
    if vectors is None:
        vectors = extract_clip_vectors(manifest, rep, config, features, jobs)
    vectors = np.asarray(vectors, dtype=np.float64)

    speaker_disjoint = manifest.speaker_independent and task != "speaker"
    accuracies = []
    for s in range(n_splits):
        rng = np.random.default_rng(seed + s)
        if speaker_disjoint:
            train_idx, test_idx = _speaker_disjoint_split(
                labels, speakers, test_fraction, rng)
        else:
            for _ in range(100):
                train_idx, test_idx = _stratified_split(labels, test_fraction, rng)
                if set(labels[i] for i in test_idx) <= set(labels[i] for i in train_idx):
                    break
            else:
                raise ProtocolError("could not build a split covering all classes")
        X_train, X_test = vectors[train_idx], vectors[test_idx]
        if rep.speaker_l2_norm:
            train_speakers = [speakers[i] for i in train_idx]
            test_speakers = [speakers[i] for i in test_idx]
            means = speaker_means(X_train, train_speakers)
            X_train = speaker_l2_normalize(X_train, train_speakers, means)
            X_test = speaker_l2_normalize(X_test, test_speakers, means)
        clf = _select_and_fit(X_train, [labels[i] for i in train_idx], probe, rng)
        accuracies.append(clf.accuracy(X_test, [labels[i] for i in test_idx]))

    report = EvalReport(task=task, representation=rep.describe(),
                        probe=probe.model, split_accuracies=accuracies,
                        mean=float(np.mean(accuracies)),
                        stddev=float(np.std(accuracies)))
    report.validate()
    return report


def eval_intra(manifest: Manifest, rep: RepresentationSpec, probe: ProbeConfig,
               n_splits: int = 5, seed: int = 0, test_fraction: float = 0.2,
               config: FrontendConfig | None = None,
               features: dict[str, ClipFeatures] | None = None,
               vectors: np.ndarray | None = None, jobs: int = 1) -> EvalReport:
    """Intra-speaker protocol: per-speaker splits, unweighted speaker mean.

    A speaker is eligible when it has >= 2 classes with >= 2 clips each;
    others are listed in ``skipped_speakers``. The report mean weights every
    eligible speaker equally regardless of clip count.
    """
    manifest.validate()
    probe.validate()
    labels = [entry.label for entry in manifest.entries]
    speakers = [entry.speaker_id for entry in manifest.entries]
    if vectors is None:
        vectors = extract_clip_vectors(manifest, rep, config, features, jobs)
    vectors = np.asarray(vectors, dtype=np.float64)

    speaker_table: dict[str, float] = {}
    skipped: list[str] = []
    for spk_index, speaker in enumerate(sorted(set(speakers))):
        idx = [i for i, s in enumerate(speakers) if s == speaker]
        counts = {}
        for i in idx:
            counts[labels[i]] = counts.get(labels[i], 0) + 1
        if sum(1 for c in counts.values() if c >= 2) < 2:
            skipped.append(speaker)
            continue
        usable = [i for i in idx if counts[labels[i]] >= 2]
        X_spk = vectors[usable]
        y_spk = [labels[i] for i in usable]
        split_accs = []
        for s in range(n_splits):
            rng = np.random.default_rng([seed, spk_index, s])
            train_idx, test_idx = _stratified_split(y_spk, test_fraction, rng)
            clf = _select_and_fit(X_spk[train_idx], [y_spk[i] for i in train_idx],
                                  probe, rng)
            split_accs.append(clf.accuracy(X_spk[test_idx],
                                           [y_spk[i] for i in test_idx]))
        speaker_table[speaker] = float(np.mean(split_accs))

    if not speaker_table:
        raise ProtocolError("no speaker has >= 2 classes with >= 2 clips each")
    per_speaker = [speaker_table[s] for s in sorted(speaker_table)]
    report = EvalReport(task="label-intra", representation=rep.describe(),
                        probe=probe.model, split_accuracies=per_speaker,
                        mean=float(np.mean(per_speaker)),
                        stddev=float(np.std(per_speaker)),
                        speaker_table=speaker_table, skipped_speakers=skipped)
    report.validate()
    return report
