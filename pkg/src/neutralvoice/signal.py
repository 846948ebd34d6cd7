"""Audio analysis and synthesis: mel front-end, phase reconstruction, pitch and
formant tracking, and the synthetic two-class vowel corpus."""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.io.wavfile
import scipy.linalg
import scipy.signal

SAMPLE_RATE = 16000
N_MELS = 80
LOW_BANDS = 40
HOP = 160
WIN = 400
N_FFT = 1024
FMIN = 0.0
FMAX = 8000.0
MAG_FLOOR = 1e-5
LOG_FLOOR = float(np.log(MAG_FLOOR))
F0_MIN = 50.0
F0_MAX = 500.0


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("clip must be mono")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample rate must be {SAMPLE_RATE} Hz")
        if not np.all(np.isfinite(x)):
            raise ValueError("clip has non-finite samples")
        if x.size and np.max(np.abs(x)) > 1.0:
            raise ValueError("samples must lie in [-1, 1]")
        object.__setattr__(self, "samples", x)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray
    frame_hop_s: float = HOP / SAMPLE_RATE
    frame_window_s: float = WIN / SAMPLE_RATE

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] != N_MELS:
            raise ValueError(f"mel must have shape [{N_MELS}, T], got {v.shape}")
        if v.shape[1] < 1:
            raise ValueError("mel needs at least one frame")
        if not np.all(np.isfinite(v)):
            raise ValueError("mel has non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def low(self) -> np.ndarray:
        return self.values[:LOW_BANDS]


@dataclass(frozen=True)
class PitchTrack:
    f0_hz: np.ndarray
    voiced: np.ndarray

    def __post_init__(self):
        f0 = np.asarray(self.f0_hz, dtype=np.float64)
        v = np.asarray(self.voiced, dtype=bool)
        if f0.shape != v.shape or f0.ndim != 1:
            raise ValueError("f0 and voicing must be aligned 1-D arrays")
        if np.any(f0[~v] != 0) or np.any(f0[v] <= 0):
            raise ValueError("f0 must be zero exactly on unvoiced frames")
        object.__setattr__(self, "f0_hz", f0)
        object.__setattr__(self, "voiced", v)

    def __len__(self):
        return self.f0_hz.size

    def mean_f0(self) -> float:
        """Mean F0 over voiced frames, 0.0 when nothing is voiced."""
        if not self.voiced.any():
            return 0.0
        return float(self.f0_hz[self.voiced].mean())


@dataclass(frozen=True)
class FormantTrack:
    """F1..F3 per voiced frame; NaN columns where the frame is not confident."""

    formant_hz: np.ndarray  # [3, T_v]
    confident: np.ndarray  # [T_v]
    frames: np.ndarray  # mel-frame index of each column

    def confident_formants(self) -> np.ndarray:
        return self.formant_hz[:, self.confident]


class FormantMoments(NamedTuple):
    mean: np.ndarray  # [3]
    std: np.ndarray  # [3]


@dataclass(frozen=True)
class SynthCorpusConfig:
    n_clips: int = 2000
    clip_seconds: float = 1.0
    class_f0_mean_hz: tuple[float, float] = (120.0, 210.0)
    class_f0_std_hz: tuple[float, float] = (15.0, 25.0)
    class_formant_offsets_hz: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (-40.0, -100.0, -150.0),
        (40.0, 100.0, 150.0),
    )
    vowels_per_clip: int = 4
    vocal_tract_jitter: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.n_clips < 2 or self.n_clips % 2:
            raise ValueError("n_clips must be even and >= 2")
        if min(self.class_f0_mean_hz) <= 0:
            raise ValueError("class F0 means must be positive")
        if self.clip_seconds < 0.2:
            raise ValueError("clip_seconds must be at least 0.2")


class Utterance(NamedTuple):
    clip: AudioClip
    sex: int
    tokens: str


# -- framing ---------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def analysis_window() -> np.ndarray:
    w = scipy.signal.get_window("hann", WIN)
    pad = (N_FFT - WIN) // 2
    return np.pad(w, (pad, N_FFT - WIN - pad))


def n_frames_for(n_samples: int) -> int:
    return 1 + n_samples // HOP


def stft(x: np.ndarray) -> np.ndarray:
    """Centered STFT, [N_FFT//2 + 1, 1 + len(x)//HOP]."""
    n = n_frames_for(x.size)
    padded = np.pad(x, (N_FFT // 2, N_FFT // 2 + HOP))
    frames = np.lib.stride_tricks.sliding_window_view(padded, N_FFT)[::HOP][:n]
    return np.fft.rfft(frames * analysis_window(), axis=1).T


def istft(spec: np.ndarray, length: int) -> np.ndarray:
    w = analysis_window()
    frames = np.fft.irfft(spec.T, n=N_FFT, axis=1) * w
    total = N_FFT + HOP * (frames.shape[0] - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t, fr in enumerate(frames):
        out[t * HOP:t * HOP + N_FFT] += fr
        norm[t * HOP:t * HOP + N_FFT] += w ** 2
    out = out / np.maximum(norm, 1e-8)
    return out[N_FFT // 2:N_FFT // 2 + length]


# -- mel -------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=None)
def mel_band_edges() -> np.ndarray:
    """N_MELS + 2 corner frequencies in Hz; band i peaks at edges[i + 1]."""
    return mel_to_hz(np.linspace(hz_to_mel(FMIN), hz_to_mel(FMAX), N_MELS + 2))


@functools.lru_cache(maxsize=None)
def mel_filterbank() -> np.ndarray:
    edges = mel_band_edges()
    freqs = np.fft.rfftfreq(N_FFT, 1.0 / SAMPLE_RATE)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None] - lo) / (mid - lo)
    down = (hi - freqs[None]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


@functools.lru_cache(maxsize=None)
def _filterbank_pinv() -> np.ndarray:
    return np.linalg.pinv(mel_filterbank())


def compute_mel(clip: AudioClip) -> MelSpectrogram:
    x = clip.samples
    if x.size < WIN:
        raise ValueError("clip too short")
    mag = np.abs(stft(x))
    mel = mel_filterbank() @ mag
    return MelSpectrogram(np.log(np.maximum(mel, MAG_FLOOR)))


def invert_mel(mel: MelSpectrogram, iterations: int = 60, momentum: float = 0.99) -> AudioClip:
    """Waveform from a log-mel via pseudo-inverse magnitudes and fast Griffin-Lim."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    v = mel.values.astype(np.float64)
    mel_mag = np.where(v <= LOG_FLOOR + 1e-6, 0.0, np.exp(v))
    mag = np.maximum(_filterbank_pinv() @ mel_mag, 0.0)
    length = (mel.n_frames - 1) * HOP
    if not mag.any() or length == 0:
        return AudioClip(np.zeros(max(length, 1)))

    rng = np.random.default_rng(0)
    angles = np.exp(2j * np.pi * rng.random(mag.shape))
    prev = np.zeros_like(angles)
    for _ in range(iterations):
        y = istft(mag * angles, length)
        rebuilt = stft(y)[:, :mag.shape[1]]
        accel = rebuilt - (momentum / (1.0 + momentum)) * prev
        angles = accel / np.maximum(np.abs(accel), 1e-16)
        prev = rebuilt
    y = istft(mag * angles, length)
    return AudioClip(np.clip(y, -1.0, 1.0))


# -- pitch -----------------------------------------------------------------


def _nccf(x: np.ndarray, n_frames: int, lag_min: int, lag_max: int):
    """Normalized cross-correlation per frame over lags [0, lag_max]; frame energies."""
    half = WIN // 2
    padded = np.pad(x, (half, half + lag_max + HOP))
    ext = np.lib.stride_tricks.sliding_window_view(padded, WIN + lag_max)[::HOP][:n_frames]
    base = ext[:, :WIN]
    L = 1 << int(np.ceil(np.log2(2 * WIN + lag_max)))
    corr = np.fft.irfft(np.conj(np.fft.rfft(base, L, axis=1)) * np.fft.rfft(ext, L, axis=1), L, axis=1)
    corr = corr[:, :lag_max + 1]
    sq = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(ext ** 2, axis=1)], axis=1)
    lags = np.arange(lag_max + 1)
    lagged_energy = sq[:, lags + WIN] - sq[:, lags]
    e0 = lagged_energy[:, :1]
    denom = np.sqrt(np.maximum(e0 * lagged_energy, 1e-20))
    return corr / denom, e0[:, 0]


def estimate_f0(
    clip: AudioClip,
    voicing_threshold: float = 0.5,
    silence_db: float = -35.0,
    smooth: int = 5,
) -> PitchTrack:
    """Normalized-autocorrelation pitch with median smoothing, one value per mel frame."""
    sr = clip.sample_rate
    n = n_frames_for(clip.samples.size)
    lag_min = int(np.floor(sr / F0_MAX))
    lag_max = int(np.ceil(sr / F0_MIN))
    r, energy = _nccf(clip.samples, n, lag_min, lag_max)

    f0 = np.zeros(n)
    loud = energy > max(energy.max() * 10 ** (silence_db / 10), 1e-8)
    for t in np.flatnonzero(loud):
        c = r[t]
        seg = c[lag_min:lag_max]
        peaks = np.flatnonzero((seg[1:-1] > seg[:-2]) & (seg[1:-1] >= seg[2:])) + 1 + lag_min
        if peaks.size == 0:
            continue
        best = c[peaks].max()
        if best < voicing_threshold:
            continue
        # shortest lag close to the best peak avoids sub-octave picks
        lag = peaks[np.argmax(c[peaks] >= 0.9 * best)]
        a, b, d = c[lag - 1], c[lag], c[lag + 1]
        denom = a - 2 * b + d
        shift = 0.5 * (a - d) / denom if denom < 0 else 0.0
        hz = sr / (lag + shift)
        if F0_MIN <= hz <= F0_MAX:
            f0[t] = hz

    voiced = f0 > 0
    if smooth > 1 and voiced.any():
        vals = np.where(voiced, f0, np.nan)
        padded = np.pad(vals, smooth // 2, constant_values=np.nan)
        windows = np.lib.stride_tricks.sliding_window_view(padded, smooth)
        med = np.nanmedian(np.where(voiced[:, None], windows, 0.0), axis=1)
        f0 = np.where(voiced, med, 0.0)
        f0 = np.where(voiced, np.clip(f0, F0_MIN, F0_MAX), 0.0)
    return PitchTrack(f0, voiced)


# -- formants --------------------------------------------------------------


def lpc(frame: np.ndarray, order: int) -> np.ndarray:
    """Autocorrelation-method predictor polynomial [1, a1, ..., a_order]."""
    r = np.correlate(frame, frame, mode="full")[frame.size - 1:frame.size + order]
    if r[0] <= 0:
        return np.r_[1.0, np.zeros(order)]
    r = r.copy()
    r[0] *= 1.0 + 1e-9
    a = scipy.linalg.solve_toeplitz(r[:order], -r[1:order + 1])
    return np.r_[1.0, a]


def extract_formants(
    clip: AudioClip,
    lpc_order: int = 18,
    max_bandwidth_hz: float = 400.0,
    min_hz: float = 90.0,
    preemphasis: float = 0.97,
    pitch: PitchTrack | None = None,
) -> FormantTrack:
    if lpc_order < 8:
        raise ValueError("order too small for 3 formants")
    sr = clip.sample_rate
    if pitch is None:
        pitch = estimate_f0(clip)
    x = clip.samples
    x = np.r_[x[0], x[1:] - preemphasis * x[:-1]]
    half = WIN // 2
    padded = np.pad(x, (half, half + HOP))
    window = scipy.signal.get_window("hamming", WIN)
    frames = np.flatnonzero(pitch.voiced)
    out = np.full((3, frames.size), np.nan)
    confident = np.zeros(frames.size, dtype=bool)
    for j, t in enumerate(frames):
        seg = padded[t * HOP:t * HOP + WIN] * window
        roots = np.roots(lpc(seg, lpc_order))
        roots = roots[(roots.imag > 0) & (np.abs(roots) < 1.0)]
        freqs = np.angle(roots) * sr / (2 * np.pi)
        bws = -np.log(np.abs(roots)) * sr / np.pi
        keep = np.sort(freqs[(bws < max_bandwidth_hz) & (freqs > min_hz) & (freqs < sr / 2)])
        if keep.size >= 3:
            out[:, j] = keep[:3]
            confident[j] = True
    return FormantTrack(out, confident, frames)


def formant_statistics(tracks) -> FormantMoments:
    cols = [t.confident_formants() for t in tracks]
    pooled = np.concatenate(cols, axis=1) if cols else np.empty((3, 0))
    if pooled.shape[1] == 0:
        raise ValueError("no formant data")
    return FormantMoments(pooled.mean(axis=1), pooled.std(axis=1))


# -- harmonic ripple templates ---------------------------------------------

RIPPLE_GRID = np.exp(np.linspace(np.log(F0_MIN), np.log(F0_MAX), 241))


@functools.lru_cache(maxsize=None)
def ripple_table() -> np.ndarray:
    """Log-mel of an equal-PSD harmonic source at each F0 on RIPPLE_GRID, [grid, N_MELS].

    Differences between rows move harmonic structure without touching the
    spectral envelope.
    """
    n = 4 * WIN
    t = np.arange(n) / SAMPLE_RATE
    rows = []
    for f0 in RIPPLE_GRID:
        k = np.arange(1, int((SAMPLE_RATE / 2 - 1) // f0) + 1)
        x = np.sqrt(f0 / 100.0) * np.cos(2 * np.pi * f0 * np.outer(k, t)).sum(axis=0)
        mag = np.abs(stft(x))[:, 2]
        rows.append(np.log(np.maximum(mel_filterbank() @ mag, MAG_FLOOR)))
    table = np.asarray(rows)
    return table - table.mean(axis=0, keepdims=True)


def ripple(f0_hz: np.ndarray) -> np.ndarray:
    """Interpolated ripple template per frame, [N_MELS, T]; zero where f0 == 0."""
    f0 = np.asarray(f0_hz, dtype=np.float64)
    table = ripple_table()
    pos = np.interp(np.log(np.clip(f0, F0_MIN, F0_MAX)), np.log(RIPPLE_GRID), np.arange(RIPPLE_GRID.size))
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, RIPPLE_GRID.size - 1)
    w = (pos - i0)[:, None]
    out = (1 - w) * table[i0] + w * table[i1]
    out[f0 <= 0] = 0.0
    return out.T


# -- synthetic corpus ------------------------------------------------------

VOWELS = {
    "a": (750.0, 1250.0, 2650.0),
    "e": (500.0, 1850.0, 2600.0),
    "i": (320.0, 2300.0, 3000.0),
    "o": (500.0, 900.0, 2450.0),
    "u": (350.0, 850.0, 2300.0),
}
SYNTH_BANDWIDTHS = (80.0, 100.0, 120.0)
_UPPER_FORMANTS = ((3500.0, 250.0), (4500.0, 300.0))


def resonator_gain(freqs: np.ndarray, formants, bandwidths, sr: int = SAMPLE_RATE) -> np.ndarray:
    """|H| of a cascade of two-pole resonators, unit gain at DC."""
    z = np.exp(-2j * np.pi * np.asarray(freqs) / sr)
    h = np.ones(np.shape(freqs))
    for fc, bw in zip(formants, bandwidths):
        r = np.exp(-np.pi * np.asarray(bw) / sr)
        theta = 2 * np.pi * np.asarray(fc) / sr
        a1, a2 = -2 * r * np.cos(theta), r * r
        h = h * np.abs((1 + a1 + a2) / (1 + a1 * z + a2 * z * z))
    return h


def synth_vowels(
    f0_track: np.ndarray,
    formant_track: np.ndarray,
    rng: np.random.Generator,
    noise_level: float = 1e-3,
) -> np.ndarray:
    """Additive harmonic synthesis; f0_track [N] Hz, formant_track [3, N] Hz."""
    n = f0_track.size
    sr = SAMPLE_RATE
    phase = 2 * np.pi * np.cumsum(f0_track) / sr
    step = 16
    idx = np.arange(0, n, step)
    k_max = int((sr / 2) // max(f0_track.min(), F0_MIN))
    k = np.arange(1, k_max + 1)[:, None]
    hk = k * f0_track[idx][None]
    formants = [formant_track[j, idx][None] for j in range(3)] + [np.full((1, 1), f) for f, _ in _UPPER_FORMANTS]
    bws = list(SYNTH_BANDWIDTHS) + [b for _, b in _UPPER_FORMANTS]
    amp = resonator_gain(hk, formants, bws) / k
    amp = np.where(hk < sr / 2 - 200, amp, 0.0)
    y = np.zeros(n)
    for j in range(k_max):
        a = np.interp(np.arange(n), idx, amp[j])
        y += a * np.sin((j + 1) * phase)
    return y + noise_level * rng.standard_normal(n)


def synth_corpus(cfg: SynthCorpusConfig) -> list[Utterance]:
    sr = SAMPLE_RATE
    n = int(round(cfg.clip_seconds * sr))
    names = sorted(VOWELS)
    lead = int(0.05 * sr)
    body = n - 2 * lead
    seg = body // cfg.vowels_per_clip
    glide = int(0.03 * sr)
    out = []
    for i in range(cfg.n_clips):
        rng = np.random.default_rng([cfg.seed, i])
        sex = i % 2
        f0_mean = float(np.clip(rng.normal(cfg.class_f0_mean_hz[sex], cfg.class_f0_std_hz[sex]), 70.0, 400.0))
        t = np.arange(n) / sr
        contour = 1.0 + 0.04 * np.sin(2 * np.pi * rng.uniform(1.0, 3.0) * t + rng.uniform(0, 2 * np.pi))
        contour *= 1.0 + 0.06 * (0.5 - t / cfg.clip_seconds)
        f0 = f0_mean * contour

        tokens = []
        prev = None
        for _ in range(cfg.vowels_per_clip):
            v = rng.choice([v for v in names if v != prev])
            tokens.append(str(v))
            prev = v
        scale = rng.normal(1.0, cfg.vocal_tract_jitter)
        offsets = np.asarray(cfg.class_formant_offsets_hz[sex])
        targets = np.array([np.asarray(VOWELS[v]) * scale + offsets for v in tokens])
        knots_t, knots_f = [], []
        for j, ft in enumerate(targets):
            start = lead + j * seg
            lo = start + (glide // 2 if j else 0)
            hi = start + seg - (glide // 2 if j < len(targets) - 1 else 0)
            knots_t += [lo, hi]
            knots_f += [ft, ft]
        knots_f = np.asarray(knots_f).T
        ftrack = np.vstack([np.interp(np.arange(n), knots_t, knots_f[j]) for j in range(3)])

        y = synth_vowels(f0, ftrack, rng, noise_level=0.0)
        env = np.zeros(n)
        ramp = int(0.01 * sr)
        env[lead:lead + seg * cfg.vowels_per_clip] = 1.0
        fade = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
        env[lead:lead + ramp] = fade
        end = lead + seg * cfg.vowels_per_clip
        env[end - ramp:end] = fade[::-1]
        y = y * env
        y = 0.5 * y / max(np.max(np.abs(y)), 1e-9)
        y = y + 1e-4 * rng.standard_normal(n)
        out.append(Utterance(AudioClip(np.clip(y, -1.0, 1.0)), sex, " ".join(tokens)))
    return out


# -- file formats ----------------------------------------------------------

_MEL_HEADER = struct.Struct("<IId")


def read_wav(path) -> AudioClip:
    sr, data = scipy.io.wavfile.read(path)
    if data.ndim > 1:
        raise ValueError(f"{path}: expected mono audio")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif np.issubdtype(data.dtype, np.floating):
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if sr != SAMPLE_RATE:
        raise ValueError(f"{path}: sample rate {sr} Hz, expected {SAMPLE_RATE}")
    return AudioClip(np.clip(x, -1.0, 1.0))


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.round(np.clip(clip.samples, -1.0, 32767 / 32768) * 32768).astype(np.int16)
    scipy.io.wavfile.write(path, clip.sample_rate, pcm)


def save_mel(path, mel: MelSpectrogram) -> None:
    with open(path, "wb") as f:
        f.write(_MEL_HEADER.pack(N_MELS, mel.n_frames, mel.frame_hop_s))
        f.write(np.ascontiguousarray(mel.values, dtype="<f4").tobytes())


def load_mel(path) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    n_mels, n_frames, hop = _MEL_HEADER.unpack_from(raw)
    values = np.frombuffer(raw, dtype="<f4", offset=_MEL_HEADER.size)
    if n_mels != N_MELS or values.size != n_mels * n_frames:
        raise ValueError(f"{path}: corrupt mel container")
    return MelSpectrogram(values.reshape(n_mels, n_frames).copy(), frame_hop_s=hop)
