"""Log-mel frontend: framing arithmetic, filterbank geometry, exact oracles.

The full pipeline is checked against an independent per-frame implementation
built on scipy's window and FFT routines; silence, pure tones, and frame
counts have closed-form expected values computed in the tests themselves.
"""

import numpy as np
import pytest
import scipy.fft
import scipy.signal

from audiotriplet.corpus import Waveform
from audiotriplet.errors import FileFormatError, TooShortError, ValidationError
from audiotriplet.frontend import (
    ClipFeatures,
    FrontendConfig,
    eval_config,
    frame_context_windows,
    frame_count,
    hz_to_mel,
    load_features,
    mel_band_edges,
    mel_center_frequencies,
    mel_filterbank,
    mel_to_hz,
    save_features,
    stft_logmel,
)

SR = 16000


def _waveform(samples, clip_id="w"):
    return Waveform(clip_id=clip_id, samples=np.asarray(samples, dtype=np.float64),
                    sample_rate=SR)


# ---------------------------------------------------------------------------
# framing arithmetic


def test_frame_count_formula():
    # window = 400 samples (25 ms), hop = 160 (10 ms) at 16 kHz
    assert frame_count(400, 400, 160) == 1
    assert frame_count(399, 400, 160) == 0
    assert frame_count(559, 400, 160) == 1
    assert frame_count(560, 400, 160) == 2
    assert frame_count(16000, 400, 160) == 98
    assert frame_count(48000, 400, 160) == 298


def test_trailing_samples_never_change_frames():
    # 8000 samples give 48 frames; the 49th would need 8080, so up to 79
    # trailing samples are invisible to the output.
    rng = np.random.default_rng(0)
    x = rng.normal(size=8000)
    base = stft_logmel(_waveform(x)).frames
    assert base.shape == (48, 64)
    extended = stft_logmel(_waveform(np.concatenate([x, rng.normal(size=79)]))).frames
    assert extended.shape == base.shape
    np.testing.assert_array_equal(extended, base)
    # One more sample and a new frame appears, leaving old frames untouched.
    longer = stft_logmel(_waveform(np.concatenate([x, rng.normal(size=80)]))).frames
    assert longer.shape == (49, 64)
    np.testing.assert_array_equal(longer[:48], base)


def test_too_short_clip_raises_with_counts():
    with pytest.raises(TooShortError) as exc_info:
        stft_logmel(_waveform(np.zeros(399)))
    assert exc_info.value.required == 400
    assert exc_info.value.actual == 399


# ---------------------------------------------------------------------------
# spectral content


def test_silence_maps_to_log_offset_everywhere():
    feats = stft_logmel(_waveform(np.zeros(SR // 2)))
    assert feats.frames.shape == (frame_count(SR // 2, 400, 160), 64)
    np.testing.assert_array_equal(feats.frames, np.log(0.01))


def test_pure_tone_peaks_in_matching_mel_band():
    config = FrontendConfig()
    t = np.arange(SR) / SR
    tone = 0.5 * np.sin(2 * np.pi * 1000.0 * t)
    feats = stft_logmel(_waveform(tone), config)
    band_means = feats.frames.mean(axis=0)
    # Oracle: 1 kHz falls exactly on FFT bin 32; the winning band is the
    # filter with the largest weight at that bin.
    bin_hz = SR / config.fft_size
    assert 1000.0 / bin_hz == 32.0
    expected_band = int(np.argmax(mel_filterbank(config, SR)[32]))
    assert int(np.argmax(band_means)) == expected_band
    # Bands far from 1 kHz stay near the silence floor.
    far = np.abs(np.arange(64) - expected_band) > 6
    assert band_means[far].max() < band_means[expected_band] - 4.0


def test_stft_logmel_matches_independent_reference():
    rng = np.random.default_rng(3)
    x = rng.normal(size=5000) * 0.1
    config = FrontendConfig()
    feats = stft_logmel(_waveform(x), config)

    hann = scipy.signal.get_window("hann", 400, fftbins=True)  # periodic
    fb = mel_filterbank(config, SR)
    expected = []
    for i in range(frame_count(5000, 400, 160)):
        seg = x[i * 160 : i * 160 + 400] * hann
        spectrum = scipy.fft.rfft(seg, n=512)
        power = np.abs(spectrum) ** 2
        expected.append(np.log(power @ fb + 0.01))
    np.testing.assert_allclose(feats.frames, np.array(expected), atol=1e-12)


# ---------------------------------------------------------------------------
# mel geometry


def test_mel_scale_round_trip():
    hz = np.array([125.0, 440.0, 1000.0, 7500.0])
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(hz)), hz, rtol=1e-12)
    assert hz_to_mel(1000.0) == pytest.approx(999.9855, abs=1e-3)


def test_band_edges_span_and_monotone():
    config = FrontendConfig()
    edges = mel_band_edges(config)
    assert edges.shape == (66,)
    assert edges[0] == pytest.approx(125.0, abs=1e-9)
    assert edges[-1] == pytest.approx(7500.0, abs=1e-9)
    assert np.all(np.diff(edges) > 0)
    # Edges are equally spaced in mel, not in Hz.
    mel_gaps = np.diff(hz_to_mel(edges))
    np.testing.assert_allclose(mel_gaps, mel_gaps[0], rtol=1e-9)
    centers = mel_center_frequencies(config)
    np.testing.assert_allclose(centers, edges[1:-1])


def test_filterbank_support_and_shape():
    config = FrontendConfig()
    fb = mel_filterbank(config, SR)
    assert fb.shape == (257, 64)
    assert fb.min() >= 0.0
    assert np.all(fb.sum(axis=0) > 0)  # every filter catches some bin
    bin_hz = np.arange(257) * SR / 512
    assert fb[bin_hz < 125.0].sum() == 0.0
    assert fb[bin_hz > 7500.0].sum() == 0.0
    # Peak bins move strictly upward band over band.
    peaks = fb.argmax(axis=0)
    assert np.all(np.diff(peaks) > 0)
    # Filter i peaks at its center frequency's bin neighbourhood.
    centers = mel_center_frequencies(config)
    np.testing.assert_allclose(bin_hz[peaks], centers, atol=bin_hz[1])


def test_filterbank_triangle_values_match_formula():
    config = FrontendConfig()
    fb = mel_filterbank(config, SR)
    edges_mel = hz_to_mel(mel_band_edges(config))
    bin_mels = hz_to_mel(np.arange(257) * SR / 512)
    # Check one interior filter pointwise against the triangle definition.
    i = 20
    lower, center, upper = edges_mel[i], edges_mel[i + 1], edges_mel[i + 2]
    expected = np.maximum(0.0, np.minimum((bin_mels - lower) / (center - lower),
                                          (upper - bin_mels) / (upper - center)))
    np.testing.assert_allclose(fb[:, i], expected, atol=1e-12)


# ---------------------------------------------------------------------------
# context windows


def test_context_windows_training_hop_non_overlapping():
    frames = np.arange(218 * 64, dtype=np.float64).reshape(218, 64)
    feats = ClipFeatures(clip_id="c", frames=frames)
    windows = frame_context_windows(feats, FrontendConfig())
    assert [w.start_frame for w in windows] == [0, 96]
    assert windows[0].values.shape == (64, 96)
    np.testing.assert_array_equal(windows[1].values, frames[96:192].T)


def test_context_windows_eval_hop_half_window():
    config = eval_config(FrontendConfig())
    assert config.context_hop_frames == 48
    frames = np.zeros((218, 64))
    windows = frame_context_windows(ClipFeatures(clip_id="c", frames=frames), config)
    assert [w.start_frame for w in windows] == [0, 48, 96]


def test_context_windows_too_few_frames():
    with pytest.raises(TooShortError):
        frame_context_windows(ClipFeatures(clip_id="c", frames=np.zeros((95, 64))),
                              FrontendConfig())


def test_exact_fit_gives_single_window():
    frames = np.zeros((96, 64))
    windows = frame_context_windows(ClipFeatures(clip_id="c", frames=frames),
                                    FrontendConfig())
    assert len(windows) == 1 and windows[0].start_frame == 0


# ---------------------------------------------------------------------------
# validation


def test_config_validation_errors():
    with pytest.raises(ValidationError):
        FrontendConfig(fmax_hz=9000.0).validate(SR)  # above Nyquist
    with pytest.raises(ValidationError):
        FrontendConfig(fft_size=256).validate(SR)  # smaller than 400-sample window
    with pytest.raises(ValidationError):
        FrontendConfig(log_offset=0.0).validate(SR)
    with pytest.raises(ValidationError):
        FrontendConfig(fmin_hz=500.0, fmax_hz=100.0).validate(SR)
    FrontendConfig().validate(SR)  # default is valid


# ---------------------------------------------------------------------------
# feature cache


def test_feature_cache_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    frames = rng.normal(size=(50, 64))
    path = tmp_path / "clip.feat"
    save_features(ClipFeatures(clip_id="clip", frames=frames), path)
    loaded = load_features(path, clip_id="clip")
    assert loaded.clip_id == "clip"
    # Stored as little-endian float32: exact up to that cast.
    np.testing.assert_array_equal(loaded.frames,
                                  frames.astype("<f4").astype(np.float64))
    assert load_features(path).clip_id == str(path)


def test_feature_cache_bad_magic(tmp_path):
    path = tmp_path / "bad.feat"
    path.write_bytes(b"NOTFEAT" + b"\x00" * 16)
    with pytest.raises(FileFormatError):
        load_features(path)


def test_feature_cache_truncated_payload(tmp_path):
    rng = np.random.default_rng(6)
    path = tmp_path / "trunc.feat"
    save_features(ClipFeatures(clip_id="c", frames=rng.normal(size=(4, 8))), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(FileFormatError):
        load_features(path)


def test_feature_cache_wrong_version(tmp_path):
    rng = np.random.default_rng(7)
    path = tmp_path / "ver.feat"
    save_features(ClipFeatures(clip_id="c", frames=rng.normal(size=(4, 8))), path)
    blob = bytearray(path.read_bytes())
    blob[7] = 99  # version byte sits right after the 7-byte magic
    path.write_bytes(bytes(blob))
    with pytest.raises(FileFormatError):
        load_features(path)
