"""Audio synthesis, augmentation, and log-mel feature extraction.

Everything runs at 16 kHz mono float64. Each sound class has a fixed timbre
signature (inharmonic partial stack plus an amplitude envelope); a seed adds a
small detune and randomizes phases so repeated instances of one class differ
without losing their spectral identity.

The augmentation chain is reverb -> pitch shift -> compression -> additive
noise with gain jitter -> peak re-normalization. Each stage after the noise
injection is linear, so the chain can carry the exact signal and noise
components through to the output; the returned trace holds them, which lets
tests verify the realized SNR against the drawn target without estimators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import instrument
from .errors import EmptyInputError, ParameterError

__all__ = [
    "SAMPLE_RATE",
    "NUM_CLASSES",
    "Waveform",
    "AugmentConfig",
    "AugmentTrace",
    "synth_waveform",
    "pitch_shift",
    "augment_chain",
    "stft_magnitude",
    "mel_filterbank",
    "log_mel",
    "class_embedding",
    "save_wav",
    "load_wav",
]

SAMPLE_RATE = 16000
NUM_CLASSES = 4

# (partial frequencies in Hz, relative amplitudes, envelope kind)
# Partial sets are inharmonic and disjoint across classes; the first partial is
# the loudest so it is also the spectral peak.
_SIGNATURES: tuple[tuple[tuple[float, ...], tuple[float, ...], str], ...] = (
    ((440.0, 1100.0, 1870.0), (1.0, 0.5, 0.25), "sustain"),
    ((196.0, 530.0, 914.0), (1.0, 0.6, 0.3), "decay"),
    ((1480.0, 2220.0, 3330.0), (1.0, 0.45, 0.2), "tremolo"),
    ((310.0, 775.0, 1395.0), (1.0, 0.55, 0.3), "swell"),
)


@dataclass
class Waveform:
    """Mono float64 samples at a fixed rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ParameterError(f"waveform must be mono 1-D, got shape {self.samples.shape}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class AugmentConfig:
    """Ranges and fixed settings for the augmentation chain.

    Ranges are inclusive uniform draws. The compressor is a fixed soft-knee
    setting, not randomized.
    """

    reverb_mix_percent: tuple[float, float] = (20.0, 40.0)
    pitch_cents: tuple[float, float] = (-150.0, 150.0)
    snr_db: tuple[float, float] = (10.0, 20.0)
    gain_db: tuple[float, float] = (-3.0, 3.0)
    comp_threshold_db: float = -20.0
    comp_ratio: float = 4.0
    comp_knee_db: float = 6.0
    ir_seconds: float = 0.3


@dataclass
class AugmentTrace:
    """Parameters drawn for one augmentation plus exact output components.

    ``signal_part + noise_part`` equals the returned samples bit-for-bit, and
    the realized SNR is ``10*log10(sum(signal^2)/sum(noise^2))``.
    """

    reverb_mix_percent: float
    pitch_cents: float
    snr_db: float
    gain_db: float
    final_scale: float
    signal_part: np.ndarray = field(repr=False)
    noise_part: np.ndarray = field(repr=False)


def synth_waveform(
    class_id: int,
    seed: int = 0,
    duration_s: float = 1.0,
    detune_cents: float | None = None,
    sample_rate: int = SAMPLE_RATE,
) -> Waveform:
    """Render one sounding-class tone, peak-normalized to 1.0.

    Deterministic per ``(class_id, seed)``. ``detune_cents=None`` draws a small
    seeded detune in [-10, 10]; pass 0.0 to pin the partials exactly.
    """
    if not 0 <= class_id < NUM_CLASSES:
        raise ParameterError(f"class_id must be in [0, {NUM_CLASSES}), got {class_id}")
    if duration_s <= 0:
        raise ParameterError("duration must be positive")
    rng = np.random.default_rng([class_id, seed])
    detune = rng.uniform(-10.0, 10.0) if detune_cents is None else float(detune_cents)
    partials, amps, env_kind = _SIGNATURES[class_id]
    phases = rng.uniform(0.0, 2.0 * np.pi, size=len(partials))

    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    factor = 2.0 ** (detune / 1200.0)
    x = np.zeros(n)
    for f, a, ph in zip(partials, amps, phases):
        x += a * np.sin(2.0 * np.pi * f * factor * t + ph)
    x *= _envelope(env_kind, t, duration_s)
    peak = np.abs(x).max()
    if peak > 0:
        x /= peak
    return Waveform(x, sample_rate)


def _envelope(kind: str, t: np.ndarray, duration_s: float) -> np.ndarray:
    sr_fade = max(1, int(0.01 * SAMPLE_RATE))  # 10 ms raised-cosine edges
    env = np.ones_like(t)
    if t.size >= 2 * sr_fade:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(sr_fade) / sr_fade)
        env[:sr_fade] = ramp
        env[-sr_fade:] = ramp[::-1]
    if kind == "sustain":
        return env
    if kind == "decay":
        return env * np.exp(-t / 0.35)
    if kind == "tremolo":
        return env * (1.0 + 0.5 * np.sin(2.0 * np.pi * 6.0 * t)) / 1.5
    if kind == "swell":
        attack = max(0.05, 0.4 * duration_s)
        return env * np.minimum(t / attack, 1.0)
    raise ParameterError(f"unknown envelope kind {kind!r}")


def pitch_shift(w: Waveform, cents: float) -> Waveform:
    """Shift pitch by ``cents`` while keeping the sample count fixed.

    Linear-interpolation resampling changes the pitch (and length); an
    overlap-add time stretch with 50 ms Hann grains restores the length.
    ``cents == 0`` returns a bit-exact copy.
    """
    x = w.samples
    n = x.size
    if n == 0:
        raise EmptyInputError("cannot pitch-shift an empty waveform")
    factor = 2.0 ** (cents / 1200.0)
    if factor == 1.0:
        return Waveform(x.copy(), w.sample_rate)

    m = max(2, int(round(n / factor)))
    pos = np.clip(np.arange(m) * factor, 0.0, n - 1.0)
    resampled = np.interp(pos, np.arange(n), x)

    grain = min(800, m, n)
    if n - grain <= 0 or m - grain <= 0:
        # input shorter than one grain: plain length-matching resample
        short = np.interp(np.linspace(0.0, m - 1.0, n), np.arange(m), resampled)
        return Waveform(short, w.sample_rate)

    hop = max(1, grain // 2)
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(grain) / grain)
    out = np.zeros(n)
    norm = np.zeros(n)
    starts = list(range(0, n - grain + 1, hop))
    if starts[-1] != n - grain:
        starts.append(n - grain)
    for ps in starts:
        pa = int(round(ps * (m - grain) / (n - grain)))
        out[ps : ps + grain] += win * resampled[pa : pa + grain]
        norm[ps : ps + grain] += win
    out = np.where(norm > 1e-8, out / np.maximum(norm, 1e-8), 0.0)
    return Waveform(out, w.sample_rate)


def _reverb(x: np.ndarray, mix: float, cfg: AugmentConfig, rng: np.random.Generator, sr: int) -> np.ndarray:
    ir_len = max(8, int(cfg.ir_seconds * sr))
    decay = np.exp(-np.arange(ir_len) / (cfg.ir_seconds * sr / 6.9))  # ~-60 dB at the tail
    ir = rng.standard_normal(ir_len) * decay
    ir /= np.linalg.norm(ir)
    n_fft = 1 << int(x.size + ir_len - 1).bit_length()
    wet = np.fft.irfft(np.fft.rfft(x, n_fft) * np.fft.rfft(ir, n_fft), n_fft)[: x.size]
    return (1.0 - mix) * x + mix * wet


def _compress(x: np.ndarray, cfg: AugmentConfig, sr: int) -> np.ndarray:
    # 10 ms sliding RMS envelope, then a memoryless soft-knee gain curve
    win = max(1, int(0.01 * sr))
    p = np.concatenate([[0.0], np.cumsum(x * x)])
    lo = np.maximum(np.arange(x.size) - win // 2, 0)
    hi = np.minimum(np.arange(x.size) + win - win // 2, x.size)
    env2 = (p[hi] - p[lo]) / np.maximum(hi - lo, 1)
    level_db = 10.0 * np.log10(env2 + 1e-12)

    over = level_db - cfg.comp_threshold_db
    knee = cfg.comp_knee_db
    slope = 1.0 - 1.0 / cfg.comp_ratio
    gain_db = np.where(
        over <= -knee / 2,
        0.0,
        np.where(
            over >= knee / 2,
            -slope * over,
            -slope * (over + knee / 2) ** 2 / (2.0 * knee),
        ),
    )
    return x * 10.0 ** (gain_db / 20.0)


def augment_chain(w: Waveform, cfg: AugmentConfig, seed) -> tuple[Waveform, AugmentTrace]:
    """Run the full augmentation chain; deterministic per seed.

    Returns the augmented waveform and a trace with the drawn parameters and
    the exact signal/noise decomposition of the output.
    """
    instrument.bump("augment_chain")
    if w.samples.size == 0:
        raise EmptyInputError("cannot augment an empty waveform")
    rng = np.random.default_rng(seed)
    mix = rng.uniform(*cfg.reverb_mix_percent)
    cents = rng.uniform(*cfg.pitch_cents)
    snr_db = rng.uniform(*cfg.snr_db)
    gain_db = rng.uniform(*cfg.gain_db)

    sr = w.sample_rate
    s = _reverb(w.samples, mix / 100.0, cfg, rng, sr)
    s = pitch_shift(Waveform(s, sr), cents).samples
    s = _compress(s, cfg, sr)

    noise = rng.standard_normal(s.size)
    sig_power = float(np.mean(s * s))
    target_noise_power = sig_power / 10.0 ** (snr_db / 10.0)
    noise_power = float(np.mean(noise * noise))
    noise *= np.sqrt(target_noise_power / noise_power) if noise_power > 0 else 0.0

    gain = 10.0 ** (gain_db / 20.0)
    sig_part = s * gain
    noise_part = noise * gain
    peak = np.abs(sig_part + noise_part).max()
    scale = 1.0 / peak if peak > 1.0 else 1.0  # clamp back to full scale only
    sig_part *= scale
    noise_part *= scale

    out = Waveform(sig_part + noise_part, sr)
    trace = AugmentTrace(
        reverb_mix_percent=mix,
        pitch_cents=cents,
        snr_db=snr_db,
        gain_db=gain_db,
        final_scale=gain * scale,
        signal_part=sig_part,
        noise_part=noise_part,
    )
    return out, trace


def stft_magnitude(
    x: np.ndarray, win_length: int = 400, hop_length: int = 160, n_fft: int = 512
) -> np.ndarray:
    """Magnitude spectrogram, shape (frames, n_fft//2 + 1), Hann analysis window.

    Frame count is ``1 + (len(x) - win_length) // hop_length``; shorter inputs
    are an error rather than a silent padding choice.
    """
    if x.size < win_length:
        raise EmptyInputError(
            f"waveform too short for analysis: {x.size} samples < window {win_length}"
        )
    if n_fft < win_length:
        raise ParameterError("n_fft must be at least the window length")
    n_frames = 1 + (x.size - win_length) // hop_length
    idx = np.arange(win_length)[None, :] + hop_length * np.arange(n_frames)[:, None]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win_length) / win_length)
    frames = x[idx] * window
    return np.abs(np.fft.rfft(frames, n=n_fft, axis=1))


def mel_filterbank(
    n_mels: int,
    n_fft: int = 512,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Triangular HTK-mel filterbank and the filter center frequencies in Hz.

    Weights have shape (n_mels, n_fft//2 + 1) with unit peaks.
    """
    if n_mels < 1:
        raise ParameterError("need at least one mel band")
    fmax = sample_rate / 2.0 if fmax is None else fmax

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    mel_points = np.linspace(to_mel(fmin), to_mel(fmax), n_mels + 2)
    hz_points = from_mel(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft

    weights = np.zeros((n_mels, bin_freqs.size))
    for m in range(n_mels):
        left, center, right = hz_points[m : m + 3]
        up = (bin_freqs - left) / max(center - left, 1e-9)
        down = (right - bin_freqs) / max(right - center, 1e-9)
        weights[m] = np.clip(np.minimum(up, down), 0.0, 1.0)
    return weights, hz_points[1:-1]


def log_mel(
    w: Waveform,
    n_mels: int = 32,
    win_length: int = 400,
    hop_length: int = 160,
    n_fft: int = 512,
) -> np.ndarray:
    """log(mel energy + 1e-6), shape (frames, n_mels). Silence maps to log(1e-6)."""
    mag = stft_magnitude(w.samples, win_length, hop_length, n_fft)
    fbank, _ = mel_filterbank(n_mels, n_fft, w.sample_rate)
    return np.log(mag @ fbank.T + 1e-6)


def class_embedding(
    class_id: int, seed: int, duration_s: float = 1.0, n_mels: int = 32
) -> np.ndarray:
    """Time-mean log-mel vector of one clean rendered tone (bank raw material)."""
    w = synth_waveform(class_id, seed=seed, duration_s=duration_s)
    return log_mel(w, n_mels=n_mels).mean(axis=0)


def save_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM mono WAV (debugging aid; features never round-trip disk)."""
    import wave

    data = np.clip(w.samples, -1.0, 1.0)
    pcm = (data * 32767.0).round().astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def load_wav(path) -> Waveform:
    import wave

    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ParameterError("expected mono WAV")
        if f.getsampwidth() != 2:
            raise ParameterError("expected 16-bit PCM WAV")
        sr = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(samples, sr)
