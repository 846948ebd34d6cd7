import numpy as np
import pytest
import scipy.signal
from hypothesis import given, settings
from hypothesis import strategies as st

from neutralvoice.signal import (
    HOP,
    LOG_FLOOR,
    N_MELS,
    SAMPLE_RATE,
    AudioClip,
    FormantTrack,
    MelSpectrogram,
    PitchTrack,
    SynthCorpusConfig,
    compute_mel,
    estimate_f0,
    extract_formants,
    formant_statistics,
    invert_mel,
    load_mel,
    mel_filterbank,
    read_wav,
    save_mel,
    synth_corpus,
    write_wav,
)

SR = SAMPLE_RATE


def tone(freq, seconds=1.0, amp=0.5):
    t = np.arange(int(seconds * SR)) / SR
    return AudioClip(amp * np.sin(2 * np.pi * freq * t))


def harmonic(f0, n_harm, seconds=1.0):
    t = np.arange(int(seconds * SR)) / SR
    x = sum(np.sin(2 * np.pi * f0 * k * t) / k for k in range(1, n_harm + 1))
    return AudioClip(0.5 * x / np.max(np.abs(x)))


def all_pole(formants, bandwidths, f0=100.0, seconds=1.0):
    """Impulse train through a cascade of second-order resonators with known poles.

    Autocorrelation LPC pulls F1 toward the nearest harmonic, so the source
    stays low-pitched to keep harmonic spacing well below the bandwidths tested.
    """
    n = int(seconds * SR)
    src = np.zeros(n)
    src[:: int(round(SR / f0))] = 1.0
    a = np.array([1.0])
    for f, b in zip(formants, bandwidths):
        r = np.exp(-np.pi * b / SR)
        a = np.convolve(a, [1.0, -2 * r * np.cos(2 * np.pi * f / SR), r * r])
    y = scipy.signal.lfilter([1.0], a, src)
    return AudioClip(0.5 * y / np.max(np.abs(y)))


def htk_mel(f):
    return 2595.0 * np.log10(1.0 + f / 700.0)


# -- types -----------------------------------------------------------------


def test_audio_clip_rejects_out_of_range():
    with pytest.raises(ValueError):
        AudioClip(np.array([0.0, 1.5]))
    with pytest.raises(ValueError):
        AudioClip(np.array([0.0, np.nan]))
    with pytest.raises(ValueError):
        AudioClip(np.zeros(100), sample_rate=8000)


def test_mel_requires_80_bands():
    with pytest.raises(ValueError):
        MelSpectrogram(np.zeros((40, 10)))
    assert MelSpectrogram(np.zeros((N_MELS, 3))).low.shape == (40, 3)


def test_pitch_track_zero_iff_unvoiced():
    with pytest.raises(ValueError):
        PitchTrack(np.array([100.0, 0.0]), np.array([True, True]))
    with pytest.raises(ValueError):
        PitchTrack(np.array([100.0, 50.0]), np.array([True, False]))


# -- mel analysis ----------------------------------------------------------


def test_one_second_gives_101_frames():
    assert compute_mel(tone(440)).values.shape == (80, 101)


def test_silence_is_floor():
    mel = compute_mel(AudioClip(np.zeros(SR)))
    assert np.all(mel.values == np.float32(LOG_FLOOR))


def test_clip_too_short():
    with pytest.raises(ValueError, match="clip too short"):
        compute_mel(AudioClip(np.zeros(100)))


def test_440_peak_in_band_containing_440():
    mel = compute_mel(tone(440))
    peak = int(np.bincount(mel.values.argmax(axis=0)).argmax())
    # independent band-centre table on the HTK mel scale
    centres = np.linspace(htk_mel(0.0), htk_mel(8000.0), N_MELS + 2)[1:-1]
    assert peak == int(np.argmin(np.abs(centres - htk_mel(440.0))))


def test_filterbank_triangles():
    fb = mel_filterbank()
    assert fb.shape == (80, 513)
    assert np.all(fb >= 0)
    assert np.all(fb.max(axis=1) > 0)


def test_compute_mel_pure():
    clip = harmonic(130, 8)
    np.testing.assert_array_equal(compute_mel(clip).values, compute_mel(clip).values)


# -- inversion -------------------------------------------------------------


def test_invert_length_formula():
    mel = compute_mel(tone(300))
    out = invert_mel(mel, iterations=5)
    assert abs(out.samples.size - 16000) <= 400
    assert out.samples.size == (mel.n_frames - 1) * HOP


def test_invert_silence():
    out = invert_mel(MelSpectrogram(np.full((80, 101), LOG_FLOOR)), iterations=5)
    assert np.sqrt(np.mean(out.samples ** 2)) < 1e-3


def test_invert_rejects_zero_iterations():
    with pytest.raises(ValueError):
        invert_mel(compute_mel(tone(300)), iterations=0)


def bandwise_corr(a, b):
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    num = (a * b).sum(axis=1)
    den = np.sqrt((a * a).sum(axis=1) * (b * b).sum(axis=1))
    ok = den > 1e-9
    return np.mean(num[ok] / den[ok])


def test_round_trip_on_synth_vowels():
    for utt in synth_corpus(SynthCorpusConfig(n_clips=2, seed=3)):
        m = compute_mel(utt.clip).values
        back = compute_mel(invert_mel(MelSpectrogram(m))).values[:, : m.shape[1]]
        assert bandwise_corr(m, back) >= 0.90


# -- pitch -----------------------------------------------------------------


def test_pitch_sine_220():
    p = estimate_f0(tone(220))
    assert p.voiced.mean() > 0.9
    assert np.all(np.abs(p.f0_hz[p.voiced] - 220) <= 1.0)


def test_pitch_harmonic_150():
    p = estimate_f0(harmonic(150, 5))
    assert abs(p.mean_f0() - 150) <= 2.0


def test_pitch_silence_unvoiced():
    p = estimate_f0(AudioClip(np.zeros(SR)))
    assert not p.voiced.any()
    assert len(p) == 101


def test_pitch_aligned_with_mel():
    clip = harmonic(180, 6, seconds=0.73)
    assert len(estimate_f0(clip)) == compute_mel(clip).n_frames


@settings(max_examples=12, deadline=None)
@given(f0=st.floats(90, 250), r=st.floats(1.05, 1.6))
def test_pitch_shift_covariance(f0, r):
    lo = estimate_f0(harmonic(f0, 6, 0.5)).mean_f0()
    hi = estimate_f0(harmonic(f0 * r, 6, 0.5)).mean_f0()
    assert abs(hi / lo - r) <= 0.02 * r


# -- formants --------------------------------------------------------------

RES = (700.0, 1200.0, 2600.0)
BWS = (80.0, 100.0, 120.0)


def test_lpc_recovers_resonances():
    track = extract_formants(all_pole(RES, BWS))
    est = np.median(track.confident_formants(), axis=1)
    np.testing.assert_allclose(est, RES, rtol=0.05)


def test_lpc_tracks_ten_percent_shift():
    base = np.median(extract_formants(all_pole(RES, BWS)).confident_formants(), axis=1)
    moved = np.median(extract_formants(all_pole([1.1 * f for f in RES], BWS)).confident_formants(), axis=1)
    np.testing.assert_allclose(moved / base, 1.1, atol=0.02)


def test_white_noise_mostly_not_confident():
    rng = np.random.default_rng(0)
    clip = AudioClip(0.3 * rng.standard_normal(SR).clip(-3, 3) / 3)
    n = compute_mel(clip).n_frames
    forced = PitchTrack(np.full(n, 100.0), np.ones(n, dtype=bool))
    track = extract_formants(clip, pitch=forced)
    assert track.confident.mean() < 0.5


def test_formant_order_error():
    with pytest.raises(ValueError, match="order too small for 3 formants"):
        extract_formants(tone(200), lpc_order=6)


def test_formants_ordered_on_synth():
    for utt in synth_corpus(SynthCorpusConfig(n_clips=4, seed=1)):
        f = extract_formants(utt.clip).confident_formants()
        assert f.shape[1] > 0
        assert np.all((0 < f[0]) & (f[0] < f[1]) & (f[1] < f[2]) & (f[2] < SR / 2))


def _track(cols):
    cols = np.asarray(cols, dtype=float)
    return FormantTrack(cols, np.ones(cols.shape[1], dtype=bool), np.arange(cols.shape[1]))


def test_formant_statistics_constant():
    m = formant_statistics([_track([[700, 700], [1200, 1200], [2600, 2600]])])
    assert m.mean[0] == 700 and m.std[0] == 0


def test_formant_statistics_population_std():
    m = formant_statistics([_track([[600], [1200], [2600]]), _track([[800], [1200], [2600]])])
    assert m.mean[0] == 700 and m.std[0] == 100


def test_formant_statistics_empty():
    empty = FormantTrack(np.full((3, 2), np.nan), np.zeros(2, dtype=bool), np.arange(2))
    with pytest.raises(ValueError, match="no formant data"):
        formant_statistics([empty])


# -- synthetic corpus ------------------------------------------------------


def test_synth_deterministic():
    a = synth_corpus(SynthCorpusConfig(n_clips=4, seed=7))
    b = synth_corpus(SynthCorpusConfig(n_clips=4, seed=7))
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u.clip.samples, v.clip.samples)
        assert u.tokens == v.tokens


def test_synth_balanced_and_pitch_class_mean():
    corpus = synth_corpus(SynthCorpusConfig(n_clips=200))
    labels = np.array([u.sex for u in corpus])
    assert (labels == 0).sum() == 100 and (labels == 1).sum() == 100
    means = [estimate_f0(u.clip).mean_f0() for u in corpus if u.sex == 0]
    assert abs(np.mean(means) - 120) <= 5


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthCorpusConfig(n_clips=3)
    with pytest.raises(ValueError):
        SynthCorpusConfig(class_f0_mean_hz=(0.0, 200.0))


# -- file formats ----------------------------------------------------------


def test_wav_round_trip(tmp_path):
    clip = tone(330, 0.2)
    write_wav(tmp_path / "a.wav", clip)
    back = read_wav(tmp_path / "a.wav")
    np.testing.assert_allclose(back.samples, clip.samples, atol=1 / 32768)


def test_mel_container_layout(tmp_path):
    mel = compute_mel(tone(330, 0.2))
    save_mel(tmp_path / "m.bin", mel)
    raw = (tmp_path / "m.bin").read_bytes()
    n_mels, n_frames = np.frombuffer(raw[:8], "<u4")
    assert (n_mels, n_frames) == (80, mel.n_frames)
    assert np.frombuffer(raw[8:16], "<f8")[0] == pytest.approx(0.01)
    np.testing.assert_array_equal(np.frombuffer(raw[16:], "<f4").reshape(80, -1), mel.values)
    np.testing.assert_array_equal(load_mel(tmp_path / "m.bin").values, mel.values)
