"""WAV ingest, labeled manifests, and a deterministic synthetic corpus.

Audio enters the pipeline as 16-bit PCM RIFF WAV, mono or stereo. Stereo is
averaged to mono, samples are scaled by 1/32768 into [-1, 1], and anything
not at 16 kHz is linearly resampled (documented lossy).

The synthetic corpus is a source-filter vocoder. Each speaker owns a base
pitch, a vocal-tract length scale, and small per-vowel formant
idiosyncrasies; each class owns a pitch-contour / amplitude-modulation
pattern. A clip is a random sequence of vowel segments drawn from a shared
inventory with a clip-specific usage mixture, rendered as a harmonic pulse
train through the time-varying formant filter, then passed through channel
and background nuisances (a drifting noise floor, broadband noise bursts,
short tonal events, slowly drifting gain and a morphing EQ). Every nuisance
drifts or re-randomises within the clip, so whole-clip band statistics
absorb each clip's random draw while no nuisance is stable enough to
identify the clip from a single window; the voice and the class pattern are
the only within-clip constants. Everything is derived from the corpus seed,
so the same spec renders byte-identical files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .errors import (
    UnsupportedWavError,
    ValidationError,
    WavParseError,
    WriteError,
)

TARGET_SAMPLE_RATE = 16000
MANIFEST_HEADER = ["clip_id", "path", "speaker_id", "label"]
_PCM_SCALE = 32768.0


@dataclass
class Waveform:
    clip_id: str
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int

    @property
    def duration_seconds(self) -> float:
        return self.samples.size / self.sample_rate

    def validate(self) -> None:
        if self.sample_rate <= 0:
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise ValidationError(f"samples must be 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError(f"clip '{self.clip_id}' contains non-finite samples")
        if self.samples.size and np.abs(self.samples).max() > 1.0:
            raise ValidationError(f"clip '{self.clip_id}' has samples outside [-1, 1]")


# ---------------------------------------------------------------------------
# RIFF WAV


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM WAV file, average stereo to mono, resample to 16 kHz."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"WAV file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 12 or blob[0:4] != b"RIFF":
        raise WavParseError(f"{path}: missing 'RIFF' chunk header")
    if blob[8:12] != b"WAVE":
        raise WavParseError(f"{path}: missing 'WAVE' form type")

    fmt = None
    data = None
    offset = 12
    while offset + 8 <= len(blob):
        chunk_id = blob[offset : offset + 4]
        (size,) = np.frombuffer(blob[offset + 4 : offset + 8], dtype="<u4")
        body = blob[offset + 8 : offset + 8 + size]
        if len(body) < size:
            name = chunk_id.decode("ascii", errors="replace").strip()
            raise WavParseError(f"{path}: truncated '{name}' chunk")
        if chunk_id == b"fmt ":
            fmt = body
        elif chunk_id == b"data":
            data = body
        offset += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None:
        raise WavParseError(f"{path}: missing 'fmt ' chunk")
    if data is None:
        raise WavParseError(f"{path}: missing 'data' chunk")
    if len(fmt) < 16:
        raise WavParseError(f"{path}: 'fmt ' chunk shorter than 16 bytes")

    audio_format = int(np.frombuffer(fmt[0:2], "<u2")[0])
    channels = int(np.frombuffer(fmt[2:4], "<u2")[0])
    sample_rate = int(np.frombuffer(fmt[4:8], "<u4")[0])
    bits = int(np.frombuffer(fmt[14:16], "<u2")[0])
    if audio_format != 1:
        raise UnsupportedWavError(f"{path}: only PCM (format 1) is supported, got format {audio_format}")
    if bits != 16:
        raise UnsupportedWavError(f"{path}: only 16-bit samples are supported, got {bits}-bit")
    if channels not in (1, 2):
        raise UnsupportedWavError(f"{path}: only mono or stereo supported, got {channels} channels")

    usable = len(data) - (len(data) % (2 * channels))
    raw = np.frombuffer(data[:usable], dtype="<i2").astype(np.float64)
    if channels == 2:
        raw = raw.reshape(-1, 2).mean(axis=1)
    samples = raw / _PCM_SCALE
    if sample_rate != TARGET_SAMPLE_RATE:
        samples = _resample_linear(samples, sample_rate, TARGET_SAMPLE_RATE)
    return Waveform(clip_id=path.stem, samples=samples, sample_rate=TARGET_SAMPLE_RATE)


def _resample_linear(x: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    if x.size == 0:
        return x
    n_out = int(round(x.size * rate_out / rate_in))
    positions = np.arange(n_out) * (rate_in / rate_out)
    return np.interp(positions, np.arange(x.size), x)


def write_wav(path, waveform: Waveform) -> None:
    """Write mono 16-bit PCM at the waveform's sample rate."""
    quantised = np.clip(np.round(waveform.samples * _PCM_SCALE), -32768, 32767).astype("<i2")
    payload = quantised.tobytes()
    header = b"".join([
        b"RIFF",
        np.uint32(36 + len(payload)).tobytes(),
        b"WAVE",
        b"fmt ",
        np.uint32(16).tobytes(),
        np.uint16(1).tobytes(),                      # PCM
        np.uint16(1).tobytes(),                      # mono
        np.uint32(waveform.sample_rate).tobytes(),
        np.uint32(waveform.sample_rate * 2).tobytes(),  # byte rate
        np.uint16(2).tobytes(),                      # block align
        np.uint16(16).tobytes(),                     # bits per sample
        b"data",
        np.uint32(len(payload)).tobytes(),
    ])
    try:
        Path(path).write_bytes(header + payload)
    except OSError as exc:
        raise WriteError(f"cannot write WAV to {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    path: Path
    speaker_id: str
    label: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    task_name: str = "task"
    # Evaluation splits keep speakers disjoint across train/test unless the
    # task is inherently speaker-dependent (e.g. speaker identification).
    speaker_independent: bool = True

    def labels(self) -> list[str]:
        return sorted({e.label for e in self.entries})

    def speakers(self) -> list[str]:
        return sorted({e.speaker_id for e in self.entries})

    def validate(self) -> None:
        seen: dict[str, int] = {}
        for e in self.entries:
            seen[e.clip_id] = seen.get(e.clip_id, 0) + 1
        dups = sorted(c for c, n in seen.items() if n > 1)
        if dups:
            raise ValidationError(f"duplicate clip ids in manifest: {', '.join(dups)}")
        missing = sorted(str(e.path) for e in self.entries if not e.path.exists())
        if missing:
            raise ValidationError(f"manifest references missing files: {', '.join(missing)}")


def load_manifest(path, task_name: str | None = None,
                  speaker_independent: bool = True) -> Manifest:
    """Load a ``clip_id,path,speaker_id,label`` CSV; relative paths resolve
    against the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != MANIFEST_HEADER:
        raise ValidationError(
            f"{path}: manifest header must be exactly '{','.join(MANIFEST_HEADER)}'")
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ValidationError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        clip_id, rel, speaker_id, label = row
        p = Path(rel)
        if not p.is_absolute():
            p = path.parent / p
        entries.append(ManifestEntry(clip_id=clip_id, path=p, speaker_id=speaker_id, label=label))
    manifest = Manifest(entries=entries,
                        task_name=task_name if task_name is not None else path.stem,
                        speaker_independent=speaker_independent)
    manifest.validate()
    return manifest


def write_manifest(manifest: Manifest, path) -> None:
    """Write the manifest CSV with LF line endings and paths relative to it."""
    path = Path(path)
    lines = [",".join(MANIFEST_HEADER)]
    for e in manifest.entries:
        try:
            rel = e.path.relative_to(path.parent)
        except ValueError:
            rel = e.path
        lines.append(f"{e.clip_id},{rel.as_posix()},{e.speaker_id},{e.label}")
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise WriteError(f"cannot write manifest to {path}: {exc}") from exc


def speaker_task(manifest: Manifest) -> Manifest:
    """Relabel a manifest for speaker identification (labels := speaker ids).

    Speaker-disjoint splits are impossible for this task, so the flag is off.
    """
    entries = [replace(e, label=e.speaker_id) for e in manifest.entries]
    return Manifest(entries=entries, task_name=f"{manifest.task_name}-speakers",
                    speaker_independent=False)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthSpec:
    n_speakers: int = 20
    clips_per_speaker: int = 20
    n_classes: int = 4
    clip_seconds: float = 3.0
    seed: int = 0
    sample_rate: int = TARGET_SAMPLE_RATE

    def validate(self) -> None:
        if self.n_speakers < 1 or self.clips_per_speaker < 1 or self.n_classes < 1:
            raise ValidationError("speaker, clip, and class counts must be >= 1")
        if self.clips_per_speaker < self.n_classes:
            raise ValidationError(
                f"{self.clips_per_speaker} clips per speaker cannot cover "
                f"{self.n_classes} classes")
        if self.clip_seconds < 1.0:
            raise ValidationError(f"clip_seconds must be >= 1.0, got {self.clip_seconds}")


# Shared vowel inventory: first three formant centres in Hz. Individual
# voices move the whole table with a vocal-tract scale plus small per-vowel
# offsets, so voice identity lives in how the inventory is shifted rather
# than in any single resonance.
_VOWEL_TABLE = np.array([
    [270.0, 2290.0, 3010.0],
    [390.0, 1990.0, 2550.0],
    [530.0, 1840.0, 2480.0],
    [660.0, 1720.0, 2410.0],
    [730.0, 1090.0, 2440.0],
    [570.0, 840.0, 2410.0],
    [440.0, 1020.0, 2240.0],
    [300.0, 870.0, 2240.0],
])
_FORMANT_BANDWIDTHS = (70.0, 110.0, 180.0)
_FORMANT_GAINS_DB = (0.0, -4.0, -10.0)


@dataclass(frozen=True)
class _Voice:
    base_f0: float
    tract_scale: float  # multiplies every vowel formant centre
    vowel_offsets: np.ndarray  # (n_vowels, 3) multiplicative idiosyncrasies
    tilt: float  # one-pole lowpass coefficient
    # Personal tempo: scales every label pattern's modulation rates, so the
    # same label is expressed slightly differently by each speaker.
    rate_scale: float = 1.0


def _speaker_voice(spec: SynthSpec, idx: int, f0_grid: np.ndarray) -> _Voice:
    rng = np.random.default_rng([spec.seed, 0, idx])
    f0 = float(f0_grid[idx] * 2.0 ** rng.uniform(-0.02, 0.02))
    tract = float(2.0 ** rng.uniform(-0.26, 0.26))
    offsets = 2.0 ** rng.uniform(-0.04, 0.04, size=_VOWEL_TABLE.shape)
    tilt = float(rng.uniform(0.15, 0.6))
    rate = float(2.0 ** rng.uniform(-0.17, 0.17))
    return _Voice(base_f0=f0, tract_scale=tract, vowel_offsets=offsets, tilt=tilt,
                  rate_scale=rate)


def _class_pattern(c: int) -> dict:
    """Distinct pitch-contour / AM recipe per class; cycles with scaled rates
    when there are more classes than base patterns."""
    base = [
        # slope (oct/s), vibrato rate (Hz), vibrato depth (oct), AM rate (Hz), AM depth
        # Vibrato depths and slopes stay well under the speaker pitch-grid
        # spacing so intonation never masquerades as a different voice.
        dict(slope=0.04, vib_rate=2.0, vib_depth=0.045, am_rate=1.5, am_depth=0.35),
        dict(slope=-0.04, vib_rate=5.0, vib_depth=0.025, am_rate=4.0, am_depth=0.60),
        dict(slope=0.00, vib_rate=3.2, vib_depth=0.080, am_rate=8.0, am_depth=0.40),
        dict(slope=0.015, vib_rate=0.9, vib_depth=0.035, am_rate=2.5, am_depth=0.75),
    ]
    pattern = dict(base[c % len(base)])
    scale = 1.0 + 0.35 * (c // len(base))
    pattern["vib_rate"] *= scale
    pattern["am_rate"] *= scale
    return pattern


def _resonator_coeffs(freq: float, bandwidth: float, sr: int):
    r = np.exp(-np.pi * bandwidth / sr)
    theta = 2.0 * np.pi * freq / sr
    b0 = (1.0 - r) * abs(1.0 - r * np.exp(-2.0j * theta))  # unit gain at centre
    return [b0], [1.0, -2.0 * r * np.cos(theta), r * r]


# Channel severity: the first cosine term acts as a broad tilt, higher
# terms as smooth EQ ripple. Because the channel morphs across the clip it
# punishes whole-clip band statistics more than any single analysis window.
_EQ_DEPTHS = (1.0, 0.6, 0.4)
_GAIN_SPREAD_OCTAVES = 0.5


def _channel_eq_fir(rng: np.random.Generator, n_taps: int = 65) -> np.ndarray:
    """Smooth random EQ as a linear-phase FIR; |H| = exp(sum of low cosines)."""
    freqs = np.linspace(0.0, 1.0, n_taps // 2 + 1)
    log_mag = np.zeros_like(freqs)
    for k, depth in enumerate(_EQ_DEPTHS, start=1):
        log_mag += rng.uniform(-depth, depth) * np.cos(np.pi * k * freqs + rng.uniform(0, 2 * np.pi))
    mag = np.exp(log_mag)
    h = np.fft.irfft(mag, n=n_taps)
    h = np.roll(h, n_taps // 2)
    h *= 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_taps) / (n_taps - 1))  # Hann taper
    return h


def _render_clip(voice: _Voice, pattern: dict, rng: np.random.Generator,
                 n_samples: int, sr: int) -> np.ndarray:
    t = np.arange(n_samples) / sr
    vib_rate = pattern["vib_rate"] * voice.rate_scale * 2.0 ** rng.uniform(-0.08, 0.08)
    am_rate = pattern["am_rate"] * voice.rate_scale * 2.0 ** rng.uniform(-0.08, 0.08)
    vib_depth = pattern["vib_depth"] * rng.uniform(0.85, 1.15)
    am_depth = min(0.95, pattern["am_depth"] * rng.uniform(0.85, 1.15))
    vib_phase = rng.uniform(0, 2 * np.pi)
    am_phase = rng.uniform(0, 2 * np.pi)

    # Slow mean-zero pitch wander on top of the class contour: it smears the
    # harmonic comb in whole-clip averages more than in any single window.
    wander = (0.015 * np.sin(2 * np.pi * rng.uniform(0.2, 0.5) * t + rng.uniform(0, 2 * np.pi))
              + 0.015 * np.sin(2 * np.pi * rng.uniform(0.5, 0.9) * t + rng.uniform(0, 2 * np.pi)))
    contour = (pattern["slope"] * (t - t[-1] / 2.0)
               + vib_depth * np.sin(2 * np.pi * vib_rate * t + vib_phase)
               + wander)
    # Per-clip pitch offset reaching over halfway to the neighbouring
    # speaker's pitch: whole-clip comb position is ambiguous between
    # neighbours, so identity needs joint cues (comb together with envelope,
    # tilt, and tempo), not the comb position alone.
    f0 = voice.base_f0 * 2.0 ** (contour + rng.uniform(-0.05, 0.05))

    # Glottal-like pulse train: one unit impulse per completed pitch cycle.
    phase = np.cumsum(f0) / sr + rng.uniform(0, 1)
    source = np.zeros(n_samples)
    source[1:] = np.floor(phase[1:]) > np.floor(phase[:-1])
    tilted = lfilter([1.0 - voice.tilt], [1.0, -voice.tilt], source)

    # Vowel sequence: segment boundaries and a sparse usage mixture that
    # drifts from one random draw to another across the clip. The average
    # mixture dominates whole-clip band statistics, but windows from the two
    # ends of a clip sample visibly different mixtures, so content cannot
    # serve as a stable clip signature.
    min_seg = int(0.06 * sr)
    bounds = [0]
    while bounds[-1] < n_samples:
        bounds.append(bounds[-1] + int(rng.uniform(0.12, 0.30) * sr))
    bounds[-1] = n_samples
    if len(bounds) >= 3 and bounds[-1] - bounds[-2] < min_seg:
        del bounds[-2]
    usage_start = rng.dirichlet(0.35 * np.ones(len(_VOWEL_TABLE)))
    usage_end = rng.dirichlet(0.35 * np.ones(len(_VOWEL_TABLE)))
    vowel_ids = []
    for start, stop in zip(bounds[:-1], bounds[1:]):
        w = 0.5 * (start + stop) / n_samples
        p = (1.0 - w) * usage_start + w * usage_end
        vowel_ids.append(int(rng.choice(len(_VOWEL_TABLE), p=p)))

    # Per-clip renderings of each formant slot: small centre jitter, width
    # and height spread. Constant within the clip so the voice stays
    # recognisable across its own segments.
    centre_jitter = 2.0 ** rng.uniform(-0.04, 0.04, size=3)
    width_scale = rng.uniform(0.75, 1.3, size=3)
    height_db = rng.uniform(-3.0, 3.0, size=3)

    overlap = int(0.02 * sr)
    preroll = int(0.05 * sr)
    voiced = np.zeros(n_samples)
    for (start, stop), vowel in zip(zip(bounds[:-1], bounds[1:]), vowel_ids):
        lo = max(0, start - overlap)
        hi = min(n_samples, stop + overlap)
        xlo = max(0, lo - preroll)
        seg = np.zeros(hi - lo)
        for k in range(3):
            freq = (_VOWEL_TABLE[vowel, k] * voice.tract_scale
                    * voice.vowel_offsets[vowel, k] * centre_jitter[k])
            width = _FORMANT_BANDWIDTHS[k] * width_scale[k]
            gain = 10.0 ** ((_FORMANT_GAINS_DB[k] + height_db[k]) / 20.0)
            b, a = _resonator_coeffs(freq, width, sr)
            seg += gain * lfilter(b, a, tilted[xlo:hi])[lo - xlo:]
        # Linear crossfade so adjacent segment envelopes sum to one.
        g = np.arange(lo, hi, dtype=np.float64)
        env = np.ones(hi - lo)
        if start > 0:
            ramp = g < start + overlap
            env[ramp] = (g[ramp] - (start - overlap)) / (2.0 * overlap)
        if stop < n_samples:
            ramp = g >= stop - overlap
            env[ramp] = np.minimum(env[ramp], (stop + overlap - g[ramp]) / (2.0 * overlap))
        voiced[lo:hi] += seg * env

    excited = voiced + 0.02 * tilted
    excited *= 1.0 + am_depth * np.sin(2 * np.pi * am_rate * t + am_phase)

    rms = np.sqrt(np.mean(excited**2))
    if rms > 0:
        excited *= 0.06 / rms

    # Every nuisance from here on drifts or re-randomises within the clip:
    # whole-clip band statistics absorb each clip's random draws, but no
    # single window reveals a value that another window of the same clip
    # would confirm, so none of it works as a clip signature.
    blend = np.linspace(0.0, 1.0, n_samples)
    clip_len = n_samples / sr

    def _floor_noise() -> np.ndarray:
        color = rng.uniform(0.0, 0.9)
        x = lfilter([1.0 - color], [1.0, -color], rng.normal(0.0, 1.0, size=n_samples))
        snr_db = rng.uniform(12.0, 30.0)
        return x * (0.06 * 10.0 ** (-snr_db / 20.0) / max(np.sqrt(np.mean(x**2)), 1e-12))

    # Noise floor crossfading between two independent colours and levels.
    clip = excited + (1.0 - blend) * _floor_noise() + blend * _floor_noise()

    # Broadband noise bursts: each event has its own colour, level, and span.
    n_bursts = int(rng.integers(3, 8))
    for _ in range(n_bursts):
        dur = rng.uniform(0.2, 0.8)
        onset = rng.uniform(0.0, max(0.01, clip_len - dur))
        start = int(onset * sr)
        stop = min(n_samples, start + int(dur * sr))
        if stop - start < int(0.05 * sr):
            continue
        color = rng.uniform(0.0, 0.95)
        seg = lfilter([1.0 - color], [1.0, -color],
                      rng.normal(0.0, 1.0, size=stop - start))
        ramp = min(int(0.03 * sr), (stop - start) // 2)
        env = np.ones(stop - start)
        env[:ramp] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / max(1, ramp))
        env[stop - start - ramp:] = env[:ramp][::-1]
        seg *= env
        seg_rms = np.sqrt(np.mean(seg**2))
        if seg_rms > 0:
            clip[start:stop] += seg * (0.06 * 10.0 ** (-rng.uniform(-3.0, 9.0) / 20.0) / seg_rms)

    # Transient narrowband interference: short tonal events at random times,
    # centres, and levels.
    n_events = int(rng.integers(8, 17))
    tones = np.zeros(n_samples)
    for _ in range(n_events):
        centre = float(np.exp(rng.uniform(np.log(140.0), np.log(3800.0))))
        width = float(rng.uniform(30.0, 120.0))
        level_db = rng.uniform(-8.0, 8.0)
        dur = rng.uniform(0.25, 0.9)
        onset = rng.uniform(0.0, max(0.01, clip_len - dur))
        start = int(onset * sr)
        stop = min(n_samples, start + int(dur * sr))
        if stop - start < int(0.05 * sr):
            continue
        seg = rng.normal(0.0, 1.0, size=stop - start)
        b, a = _resonator_coeffs(centre, width, sr)
        seg = lfilter(b, a, seg)
        ramp = min(int(0.03 * sr), (stop - start) // 2)
        env = np.ones(stop - start)
        env[:ramp] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / max(1, ramp))
        env[stop - start - ramp:] = env[:ramp][::-1]
        seg *= env
        seg_rms = np.sqrt(np.mean(seg**2))
        if seg_rms > 0:
            tones[start:stop] += seg * (0.06 * 10.0 ** (level_db / 20.0) / seg_rms)
    clip = clip + tones

    # Channel: per-clip broadband gain, then an EQ that morphs between two
    # random curves over the course of the clip.
    clip *= 2.0 ** rng.uniform(-_GAIN_SPREAD_OCTAVES, _GAIN_SPREAD_OCTAVES)
    clip = ((1.0 - blend) * fftconvolve(clip, _channel_eq_fir(rng), mode="same")
            + blend * fftconvolve(clip, _channel_eq_fir(rng), mode="same"))

    peak = np.abs(clip).max()
    if peak > 0.97:
        clip *= 0.97 / peak
    return clip


def synth_corpus(spec: SynthSpec, out_dir) -> Manifest:
    """Render the synthetic corpus into ``out_dir`` and write manifest.csv.

    Clip j of every speaker gets label ``class{j % n_classes}`` so labels are
    balanced within speakers. Deterministic: the same spec produces
    byte-identical WAV files and manifest.
    """
    spec.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise WriteError(f"cannot create corpus directory {out_dir}: {exc}") from exc

    # Base pitches sit on a shuffled log grid so no two speakers collide.
    grid = np.geomspace(90.0, 260.0, spec.n_speakers)
    perm = np.random.default_rng([spec.seed, 2]).permutation(spec.n_speakers)
    f0_grid = grid[perm]

    n_samples = int(round(spec.clip_seconds * spec.sample_rate))
    entries = []
    for s in range(spec.n_speakers):
        voice = _speaker_voice(spec, s, f0_grid)
        speaker_id = f"spk{s:03d}"
        for j in range(spec.clips_per_speaker):
            label_idx = j % spec.n_classes
            rng = np.random.default_rng([spec.seed, 1, s, j])
            samples = _render_clip(voice, _class_pattern(label_idx), rng,
                                   n_samples, spec.sample_rate)
            clip_id = f"s{s:03d}c{j:03d}"
            wav_path = out_dir / f"{clip_id}.wav"
            write_wav(wav_path, Waveform(clip_id=clip_id, samples=samples,
                                         sample_rate=spec.sample_rate))
            entries.append(ManifestEntry(clip_id=clip_id, path=wav_path,
                                         speaker_id=speaker_id,
                                         label=f"class{label_idx}"))
    manifest = Manifest(entries=entries, task_name="synthetic",
                        speaker_independent=True)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
