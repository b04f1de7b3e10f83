"""Log-mel spectrogram frontend and fixed-size context windows.

A waveform is framed into 25 ms Hann windows every 10 ms, each frame is
transformed with a 512-point FFT, the power spectrum is mapped through a
64-band triangular mel filterbank spanning 125-7500 Hz, and a stabilised log
is taken: log(mel_power + 0.01). Context windows stack T=96 consecutive
frames (0.96 s) into the (F, T) patches the encoder consumes.

No padding or centering is applied: frame n covers samples
[n*hop, n*hop + window), so trailing samples that do not complete a new hop
never change the output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FileFormatError, TooShortError, ValidationError

FEATURE_MAGIC = b"TRLFEAT"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class FrontendConfig:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    n_mels: int = 64
    fmin_hz: float = 125.0
    fmax_hz: float = 7500.0
    log_offset: float = 0.01
    context_frames: int = 96
    # Non-overlapping windows for training; evaluation passes construct a
    # config with context_frames // 2 for denser coverage.
    context_hop_frames: int = 96

    def window_samples(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.window_ms / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.hop_ms / 1000.0))

    def validate(self, sample_rate: int) -> None:
        if self.n_mels < 1:
            raise ValidationError(f"n_mels must be >= 1, got {self.n_mels}")
        if not 0 <= self.fmin_hz < self.fmax_hz:
            raise ValidationError(f"need 0 <= fmin < fmax, got [{self.fmin_hz}, {self.fmax_hz}]")
        if self.fmax_hz > sample_rate / 2:
            raise ValidationError(
                f"fmax {self.fmax_hz} Hz exceeds Nyquist {sample_rate / 2} Hz")
        if self.fft_size < self.window_samples(sample_rate):
            raise ValidationError(
                f"fft_size {self.fft_size} smaller than window of "
                f"{self.window_samples(sample_rate)} samples")
        if self.hop_samples(sample_rate) < 1 or self.window_samples(sample_rate) < 1:
            raise ValidationError("window and hop must span at least one sample")
        if self.context_frames < 1 or self.context_hop_frames < 1:
            raise ValidationError("context_frames and context_hop_frames must be >= 1")
        if self.log_offset <= 0:
            raise ValidationError(f"log_offset must be > 0, got {self.log_offset}")


def eval_config(config: FrontendConfig | None = None) -> FrontendConfig:
    """The evaluation variant of a frontend config: half-window context hop."""
    from dataclasses import replace
    base = config if config is not None else FrontendConfig()
    return replace(base, context_hop_frames=max(1, base.context_frames // 2))


@dataclass
class ClipFeatures:
    """Log-mel frames for one clip: ``frames`` has shape (n_frames, n_mels)."""

    clip_id: str
    frames: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class ContextWindow:
    """One (F, T) patch of consecutive log-mel frames."""

    clip_id: str
    start_frame: int
    values: np.ndarray  # shape (n_mels, context_frames)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(config: FrontendConfig) -> np.ndarray:
    """n_mels + 2 mel-spaced edge frequencies in Hz, fmin to fmax inclusive."""
    mels = np.linspace(hz_to_mel(config.fmin_hz), hz_to_mel(config.fmax_hz), config.n_mels + 2)
    return mel_to_hz(mels)


def mel_center_frequencies(config: FrontendConfig) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter; strictly increasing."""
    return mel_band_edges(config)[1:-1]


def mel_filterbank(config: FrontendConfig, sample_rate: int) -> np.ndarray:
    """Triangular filters as a (n_fft_bins, n_mels) matrix.

    Each filter rises linearly in mel space from its lower band edge to its
    center and falls to its upper edge; it is zero outside those edges.
    """
    n_bins = config.fft_size // 2 + 1
    bin_mels = hz_to_mel(np.arange(n_bins) * sample_rate / config.fft_size)
    edge_mels = hz_to_mel(mel_band_edges(config))
    weights = np.zeros((n_bins, config.n_mels))
    for i in range(config.n_mels):
        lower, center, upper = edge_mels[i], edge_mels[i + 1], edge_mels[i + 2]
        up = (bin_mels - lower) / (center - lower)
        down = (upper - bin_mels) / (upper - center)
        weights[:, i] = np.maximum(0.0, np.minimum(up, down))
    return weights


def frame_count(n_samples: int, window: int, hop: int) -> int:
    """Frames that fit without padding: 1 + floor((n - window) / hop)."""
    if n_samples < window:
        return 0
    return 1 + (n_samples - window) // hop


def stft_logmel(waveform, config: FrontendConfig | None = None) -> ClipFeatures:
    """Compute log-mel frames for a waveform.

    ``waveform`` is a corpus.Waveform (samples + sample_rate + clip_id).
    Raises TooShortError when the signal cannot fill a single analysis window.
    """
    if config is None:
        config = FrontendConfig()
    config.validate(waveform.sample_rate)
    x = np.asarray(waveform.samples, dtype=np.float64)
    window = config.window_samples(waveform.sample_rate)
    hop = config.hop_samples(waveform.sample_rate)
    n = frame_count(x.size, window, hop)
    if n == 0:
        raise TooShortError(
            f"clip '{waveform.clip_id}' has {x.size} samples; "
            f"one analysis window needs {window}",
            required=window, actual=x.size)

    stride = x.strides[0]
    frames = np.lib.stride_tricks.as_strided(
        x, shape=(n, window), strides=(hop * stride, stride), writeable=False)
    # Periodic Hann window.
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)
    spectrum = np.fft.rfft(frames * hann, n=config.fft_size, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    mel_power = power @ mel_filterbank(config, waveform.sample_rate)
    return ClipFeatures(clip_id=waveform.clip_id, frames=np.log(mel_power + config.log_offset))


def frame_context_windows(features: ClipFeatures, config: FrontendConfig | None = None) -> list[ContextWindow]:
    """Slice a clip's frames into (F, T) windows at the configured frame hop.

    Window starts are 0, h, 2h, ... while start + T <= n_frames. A clip with
    fewer than T frames raises TooShortError.
    """
    if config is None:
        config = FrontendConfig()
    t = config.context_frames
    h = config.context_hop_frames
    if features.n_frames < t:
        raise TooShortError(
            f"clip '{features.clip_id}' has {features.n_frames} frames; "
            f"a context window needs {t}",
            required=t, actual=features.n_frames)
    windows = []
    for start in range(0, features.n_frames - t + 1, h):
        windows.append(ContextWindow(
            clip_id=features.clip_id,
            start_frame=start,
            values=features.frames[start : start + t].T.copy()))
    return windows


# ---------------------------------------------------------------------------
# feature cache: TRLFEAT | version u8 | u32 n_frames | u32 n_mels | f32 rows


def save_features(features: ClipFeatures, path) -> None:
    n_frames, n_mels = features.frames.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<BII", FEATURE_VERSION, n_frames, n_mels))
        f.write(np.ascontiguousarray(features.frames, dtype="<f4").tobytes())


def load_features(path, clip_id: str | None = None) -> ClipFeatures:
    with open(path, "rb") as f:
        blob = f.read()
    head = len(FEATURE_MAGIC) + struct.calcsize("<BII")
    if blob[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise FileFormatError(f"{path}: bad feature-cache magic")
    if len(blob) < head:
        raise FileFormatError(f"{path}: truncated feature-cache header")
    version, n_frames, n_mels = struct.unpack("<BII", blob[len(FEATURE_MAGIC) : head])
    if version != FEATURE_VERSION:
        raise FileFormatError(f"{path}: unsupported feature-cache version {version}")
    expect = n_frames * n_mels * 4
    if len(blob) - head != expect:
        raise FileFormatError(
            f"{path}: expected {expect} payload bytes, found {len(blob) - head}")
    frames = np.frombuffer(blob, dtype="<f4", offset=head).astype(np.float64)
    name = clip_id if clip_id is not None else str(path)
    return ClipFeatures(clip_id=name, frames=frames.reshape(n_frames, n_mels))
