"""Temporal-proximity triplet training.

Two windows are a positive pair when they come from the same temporal group;
a group is the whole clip when the clip is no longer than tau seconds, and a
tau-second segment of the clip otherwise. Negatives come from any other
group, which for long clips includes far-apart windows of the same clip.

The loss over mined triples (a, p, n) is
``mean(max(D[a,p] - D[a,n] + margin, 0))`` with squared Euclidean distances.
Semi-hard mining picks, per (anchor, positive) pair, the negative with the
smallest distance still greater than D[a, p]; if none qualifies it falls
back to the farthest negative; ties resolve to the lowest index.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .encoder import EncoderModel, forward_graph
from .errors import ContractError, DivergenceError, MiningError, SamplingError, ValidationError
from .frontend import ClipFeatures, ContextWindow, FrontendConfig, frame_context_windows

MINING_STRATEGIES = ("semi-hard", "hard", "all-valid")
OPTIMIZERS = ("sgd", "sgd-momentum")
_MOMENTUM = 0.9


@dataclass(frozen=True)
class SamplerConfig:
    tau_seconds: float = 10.0
    clips_per_batch: int = 8
    windows_per_clip: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.tau_seconds <= 0:
            raise ValidationError(f"tau_seconds must be positive, got {self.tau_seconds}")
        if self.clips_per_batch < 2:
            raise ValidationError("need at least 2 clips per batch to form negatives")
        if self.windows_per_clip < 2:
            raise ValidationError("need at least 2 windows per clip to form positives")


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.2
    mining: str = "semi-hard"

    def validate(self) -> None:
        if self.margin < 0:
            raise ValidationError(f"margin must be non-negative, got {self.margin}")
        if self.mining not in MINING_STRATEGIES:
            raise ValidationError(
                f"mining must be one of {MINING_STRATEGIES}, got '{self.mining}'")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    learning_rate: float = 0.05
    optimizer: str = "sgd-momentum"
    log_every: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValidationError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}, got '{self.optimizer}'")
        if self.log_every < 1:
            raise ValidationError(f"log_every must be >= 1, got {self.log_every}")


@dataclass
class TripletBatch:
    windows: list[ContextWindow]
    group_ids: list[str]
    triples: list[tuple[int, int, int]] = field(default_factory=list)

    def validate(self) -> None:
        if len(self.windows) != len(self.group_ids):
            raise ValidationError(
                f"{len(self.windows)} windows but {len(self.group_ids)} group ids")
        n = len(self.windows)
        for a, p, k in self.triples:
            if not (0 <= a < n and 0 <= p < n and 0 <= k < n):
                raise ValidationError(f"triple ({a}, {p}, {k}) out of range for {n} windows")
            if self.group_ids[a] != self.group_ids[p]:
                raise ValidationError(f"anchor {a} and positive {p} are in different groups")
            if self.group_ids[a] == self.group_ids[k]:
                raise ValidationError(f"anchor {a} and negative {k} share a group")


@dataclass
class ClipWindows:
    """Context windows of one clip with start times and temporal group ids."""

    clip_id: str
    windows: list[ContextWindow]
    start_seconds: np.ndarray
    duration_seconds: float


def window_corpus(features: list[ClipFeatures], frontend: FrontendConfig,
                  tau_seconds: float = 10.0) -> list[ClipWindows]:
    """Window every clip and precompute temporal groups against tau.

    Clips shorter than one context window are skipped (they cannot yield
    training material); everything else is deterministic bookkeeping.
    """
    out = []
    hop_s = frontend.hop_ms / 1000.0
    win_s = frontend.window_ms / 1000.0
    for f in features:
        if f.n_frames < frontend.context_frames:
            continue
        wins = frame_context_windows(f, frontend)
        starts = np.array([w.start_frame * hop_s for w in wins])
        duration = (f.n_frames - 1) * hop_s + win_s
        out.append(ClipWindows(clip_id=f.clip_id, windows=wins,
                               start_seconds=starts, duration_seconds=duration))
    return out


def group_ids_for_clip(clip: ClipWindows, tau_seconds: float) -> list[str]:
    """The clip id itself for short clips; tau-second segment ids otherwise."""
    if clip.duration_seconds <= tau_seconds:
        return [clip.clip_id] * len(clip.windows)
    return [f"{clip.clip_id}#{int(s // tau_seconds)}" for s in clip.start_seconds]


def sample_batch(corpus: list[ClipWindows], config: SamplerConfig,
                 rng: np.random.Generator) -> TripletBatch:
    """Uniformly draw P clips then K distinct windows from each.

    Only clips with at least K windows are eligible; fewer than P eligible
    clips is a SamplingError. Triples are left empty for the miner.
    """
    config.validate()
    eligible = [c for c in corpus if len(c.windows) >= config.windows_per_clip]
    if len(eligible) < config.clips_per_batch:
        raise SamplingError(
            f"need {config.clips_per_batch} clips with >= {config.windows_per_clip} "
            f"windows, corpus has {len(eligible)}")
    clip_idx = rng.choice(len(eligible), size=config.clips_per_batch, replace=False)
    windows: list[ContextWindow] = []
    groups: list[str] = []
    for ci in clip_idx:
        clip = eligible[ci]
        clip_groups = group_ids_for_clip(clip, config.tau_seconds)
        win_idx = rng.choice(len(clip.windows), size=config.windows_per_clip, replace=False)
        for wi in win_idx:
            windows.append(clip.windows[wi])
            groups.append(clip_groups[wi])
    return TripletBatch(windows=windows, group_ids=groups)


def pairwise_sqdist(x: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows: symmetric, zero diagonal,
    clamped at zero against rounding."""
    x = np.asarray(x, dtype=np.float64)
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    d = 0.5 * (d + d.T)
    d = np.maximum(d, 0.0)
    np.fill_diagonal(d, 0.0)
    return d


def _check_groups(group_ids) -> None:
    groups = list(group_ids)
    counts: dict[str, int] = {}
    for g in groups:
        counts[g] = counts.get(g, 0) + 1
    if not any(n >= 2 for n in counts.values()):
        raise MiningError("no group has >= 2 members; no positive pairs exist")
    if len(counts) < 2:
        raise MiningError("all windows share one group; no negatives exist")


def mine_semihard(dist: np.ndarray, group_ids, margin: float = 0.2) -> list[tuple[int, int, int]]:
    """Semi-hard negatives for every ordered (anchor, positive) pair.

    For each pair, pick the negative minimising D[a, n] subject to
    D[a, n] > D[a, p]; if no negative is that far, fall back to the one
    maximising D[a, n]. Ties break to the lowest index.
    """
    _check_groups(group_ids)
    groups = np.asarray(group_ids)
    n = dist.shape[0]
    triples = []
    for a in range(n):
        neg = np.flatnonzero(groups != groups[a])
        pos = np.flatnonzero(groups == groups[a])
        for p in pos:
            if p == a:
                continue
            d_ap = dist[a, p]
            beyond = neg[dist[a, neg] > d_ap]
            if beyond.size:
                choice = beyond[np.argmin(dist[a, beyond])]
            else:
                choice = neg[np.argmax(dist[a, neg])]
            triples.append((a, int(p), int(choice)))
    return triples


def mine_hard(dist: np.ndarray, group_ids, margin: float = 0.2) -> list[tuple[int, int, int]]:
    """Hardest negative (minimum D[a, n]) for every ordered positive pair."""
    _check_groups(group_ids)
    groups = np.asarray(group_ids)
    triples = []
    for a in range(dist.shape[0]):
        neg = np.flatnonzero(groups != groups[a])
        choice = neg[np.argmin(dist[a, neg])]
        for p in np.flatnonzero(groups == groups[a]):
            if p != a:
                triples.append((a, int(p), int(choice)))
    return triples


def mine_all_valid(dist: np.ndarray, group_ids, margin: float = 0.2) -> list[tuple[int, int, int]]:
    """Every valid (anchor, positive, negative) combination."""
    _check_groups(group_ids)
    groups = np.asarray(group_ids)
    triples = []
    for a in range(dist.shape[0]):
        neg = np.flatnonzero(groups != groups[a])
        for p in np.flatnonzero(groups == groups[a]):
            if p == a:
                continue
            for k in neg:
                triples.append((a, int(p), int(k)))
    return triples


_MINERS = {"semi-hard": mine_semihard, "hard": mine_hard, "all-valid": mine_all_valid}


def mine_triplets(dist: np.ndarray, group_ids, config: LossConfig) -> list[tuple[int, int, int]]:
    config.validate()
    return _MINERS[config.mining](dist, group_ids, config.margin)


def triplet_loss(tape: Tape, embeddings: int, triples, margin: float) -> int:
    """Differentiable mean hinge over triples, built on the tape.

    ``embeddings`` is a tape node of shape (n, d). Returns the scalar loss
    node id; backward on it yields encoder gradients.
    """
    if not triples:
        raise ContractError("triplet_loss: empty triple list")
    n = tape.value(embeddings).shape[0]
    dist = tape.pairwise_sqdist(embeddings)
    ap = [a * n + p for a, p, _ in triples]
    an = [a * n + k for a, _, k in triples]
    d_ap = tape.take(dist, ap)
    d_an = tape.take(dist, an)
    return tape.mean_all(tape.hinge(tape.add_scalar(tape.sub(d_ap, d_an), margin)))


def train(model: EncoderModel, features: list[ClipFeatures], frontend: FrontendConfig,
          sampler: SamplerConfig, loss: LossConfig, config: TrainConfig,
          ) -> tuple[EncoderModel, list[tuple[int, float]]]:
    """Train a private copy of the model with plain SGD (optional momentum).

    Each step samples a fresh batch, mines triples from the current
    embedding distances, and applies one update. Returns the trained copy
    and the loss trace [(step, loss)] recorded every ``log_every`` steps.
    Non-finite losses or activations raise DivergenceError with the step.
    """
    sampler.validate()
    loss.validate()
    config.validate()
    model = model.copy()
    corpus = window_corpus(features, frontend, sampler.tau_seconds)
    rng = np.random.default_rng(sampler.seed)
    velocity = {name: np.zeros_like(p) for name, p in model.params.items()}
    trace: list[tuple[int, float]] = []

    for step in range(1, config.steps + 1):
        batch = sample_batch(corpus, sampler, rng)
        x = np.stack([w.values for w in batch.windows])[:, None, :, :]
        try:
            tape = Tape()
            param_ids = {name: tape.parameter(value) for name, value in model.params.items()}
            taps = forward_graph(tape, model.config, param_ids, tape.leaf(x))
            emb = tape.value(taps["final"])
            dist = pairwise_sqdist(emb)
            batch.triples = mine_triplets(dist, batch.group_ids, loss)
            batch.validate()
            loss_id = triplet_loss(tape, taps["final"], batch.triples, loss.margin)
            grads = tape.backward(loss_id)
        except DivergenceError as exc:
            raise DivergenceError(
                f"training diverged at step {step} (learning rate {config.learning_rate}): {exc}",
                step=step, learning_rate=config.learning_rate) from exc
        value = float(tape.value(loss_id))
        if not np.isfinite(value):
            raise DivergenceError(
                f"non-finite loss at step {step} (learning rate {config.learning_rate})",
                step=step, learning_rate=config.learning_rate)
        for name, pid in param_ids.items():
            g = grads[pid]
            if config.optimizer == "sgd-momentum":
                velocity[name] = _MOMENTUM * velocity[name] + g
                g = velocity[name]
            model.params[name] -= config.learning_rate * g
        if step % config.log_every == 0:
            trace.append((step, value))
    return model, trace


def write_trace(trace: list[tuple[int, float]], path) -> None:
    """Loss trace as a two-column CSV, full float precision."""
    lines = ["step,loss"] + [f"{step},{value!r}" for step, value in trace]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
