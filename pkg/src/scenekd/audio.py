"""Waveform-level impulse-response augmentation with an energy-adaptive wet/dry
policy, plus the fixed log-mel front end that produces network inputs."""

from __future__ import annotations

import wave as _wave
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ParameterError


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # 1-D float, nominally in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64).reshape(-1))
        if self.sample_rate <= 0:
            raise InputError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains non-finite samples")


@dataclass(frozen=True)
class ImpulseResponse:
    taps: np.ndarray
    sample_rate: int

    def __post_init__(self):
        object.__setattr__(self, "taps", np.asarray(self.taps, dtype=np.float64).reshape(-1))
        if len(self.taps) < 1 or not np.any(self.taps):
            raise InputError("impulse response needs at least one nonzero tap")
        if self.sample_rate <= 0:
            raise InputError("sample_rate must be positive")


@dataclass(frozen=True)
class EnergyPolicy:
    """Maps input RMS to a wet-mix coefficient via a clamped affine ramp."""

    r_lo: float
    r_hi: float
    m_min: float = 0.1
    m_max: float = 0.9

    def __post_init__(self):
        if not 0 <= self.m_min <= self.m_max <= 1:
            raise ParameterError("need 0 <= m_min <= m_max <= 1")
        if not 0 <= self.r_lo < self.r_hi:
            raise ParameterError("need 0 <= r_lo < r_hi")

    def mix(self, rms_value: float) -> float:
        t = np.clip((rms_value - self.r_lo) / (self.r_hi - self.r_lo), 0.0, 1.0)
        return self.m_min + (self.m_max - self.m_min) * float(t)


@dataclass(frozen=True)
class MelConfig:
    n_fft: int = 512
    hop: int = 256
    n_mels: int = 64
    f_min: float = 50.0
    f_max: float = 8000.0
    log_eps: float = 1e-5

    def __post_init__(self):
        if self.n_mels < 1:
            raise ParameterError("n_mels must be >= 1")
        if self.hop < 1:
            raise ParameterError("hop must be >= 1")
        if self.log_eps <= 0:
            raise ParameterError("log_eps must be positive")


def rms(w: Waveform) -> float:
    if len(w.samples) == 0:
        raise InputError("empty waveform")
    return float(np.sqrt(np.mean(w.samples**2)))


def convolve_ir(w: Waveform, ir: ImpulseResponse) -> Waveform:
    """Full linear convolution truncated to the input length."""
    if w.sample_rate != ir.sample_rate:
        raise InputError(f"sample rate mismatch: {w.sample_rate} vs {ir.sample_rate}")
    out = np.convolve(w.samples, ir.taps)[: len(w.samples)]
    return Waveform(out, w.sample_rate)


def adaptive_augment(w: Waveform, ir: ImpulseResponse, policy: EnergyPolicy,
                     rng_seed: int = 0) -> Waveform:
    """Energy-adaptive IR augmentation: louder inputs get a stronger wet mix.

    The wet path is RMS-matched to the dry input before mixing, so the policy
    shifts timbre, not loudness. rng_seed is accepted for call-site symmetry
    with per-sample seeding; the mix itself is deterministic.
    """
    del rng_seed
    dry_rms = rms(w)
    m = policy.mix(dry_rms)
    wet = convolve_ir(w, ir)
    wet_rms = rms(wet)
    if dry_rms == 0 or wet_rms == 0:
        return w
    wet_samples = wet.samples * (dry_rms / wet_rms)
    return Waveform((1 - m) * w.samples + m * wet_samples, w.sample_rate)


def calibrate_policy(rms_values, lo_pct: float, hi_pct: float,
                     m_min: float = 0.1, m_max: float = 0.9) -> EnergyPolicy:
    """Nearest-rank percentiles of a dataset's RMS values become the ramp bounds."""
    vals = np.sort(np.asarray(rms_values, dtype=np.float64))
    if len(vals) < 2:
        raise InputError("need at least 2 RMS values to calibrate")
    if not 0 <= lo_pct < hi_pct <= 100:
        raise ParameterError("need 0 <= lo_pct < hi_pct <= 100")
    r_lo = _nearest_rank(vals, lo_pct)
    r_hi = _nearest_rank(vals, hi_pct)
    if r_lo == r_hi:
        raise InputError(
            "degenerate RMS distribution: percentiles coincide; set r_lo/r_hi manually")
    return EnergyPolicy(r_lo=r_lo, r_hi=r_hi, m_min=m_min, m_max=m_max)


def _nearest_rank(sorted_vals: np.ndarray, pct: float) -> float:
    idx = max(0, int(np.ceil(pct / 100.0 * len(sorted_vals))) - 1)
    return float(sorted_vals[idx])


def mel_filterbank(sample_rate: int, cfg: MelConfig) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular filters on the HTK mel scale."""
    if cfg.f_max > sample_rate / 2:
        raise ParameterError(f"f_max {cfg.f_max} above Nyquist {sample_rate / 2}")

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    mel_pts = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fft_freqs = np.arange(cfg.n_fft // 2 + 1) * sample_rate / cfg.n_fft
    fb = np.zeros((cfg.n_mels, len(fft_freqs)))
    for i in range(cfg.n_mels):
        lo, ctr, hi = hz_pts[i : i + 3]
        up = (fft_freqs - lo) / (ctr - lo)
        down = (hi - fft_freqs) / (hi - ctr)
        fb[i] = np.clip(np.minimum(up, down), 0, None)
    return fb


def band_center_hz(sample_rate: int, cfg: MelConfig, band: int) -> float:
    """Center frequency of one mel band, for synthesizing probe tones."""
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)
    mel_pts = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2)
    return float(700.0 * (10.0 ** (mel_pts[band + 1] / 2595.0) - 1.0))


def mel_spectrogram(w: Waveform, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Hann-windowed magnitude STFT -> mel filterbank -> log. Shape (1, n_mels, frames)."""
    x = w.samples
    if len(x) < cfg.n_fft:
        raise InputError(f"waveform ({len(x)} samples) shorter than n_fft ({cfg.n_fft})")
    frames = 1 + (len(x) - cfg.n_fft) // cfg.hop
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop * np.arange(frames)[:, None]
    window = np.hanning(cfg.n_fft)
    spec = np.abs(np.fft.rfft(x[idx] * window, axis=1))  # (frames, bins)
    fb = mel_filterbank(w.sample_rate, cfg)
    mel = spec @ fb.T  # (frames, n_mels)
    return np.log(mel.T + cfg.log_eps)[None, :, :]


def fit_frames(spec: np.ndarray, frames: int) -> np.ndarray:
    """Center-crop or edge-pad the time axis of a (1, mels, t) spectrogram."""
    t = spec.shape[-1]
    if t == frames:
        return spec
    if t > frames:
        start = (t - frames) // 2
        return spec[..., start : start + frames]
    pad = frames - t
    return np.pad(spec, ((0, 0), (0, 0), (pad // 2, pad - pad // 2)), mode="edge")


def ir_fixtures(sample_rate: int = 16000) -> dict[str, ImpulseResponse]:
    """Deterministic synthetic IRs: identity, 2-tap lowpass, 64-tap reverb tail."""
    rng = np.random.default_rng(1234)
    tail = 0.6 ** np.arange(64) * rng.choice([-1.0, 1.0], size=64)
    tail[0] = 1.0
    return {
        "identity": ImpulseResponse(np.array([1.0]), sample_rate),
        "lowpass2": ImpulseResponse(np.array([0.7, 0.3]), sample_rate),
        "reverb64": ImpulseResponse(tail, sample_rate),
    }


def read_wav(path) -> Waveform:
    """16-bit PCM mono little-endian WAV; compressed formats are rejected."""
    with _wave.open(str(path), "rb") as fh:
        if fh.getcomptype() != "NONE":
            raise InputError(f"compressed WAV ({fh.getcomptype()}) not supported")
        if fh.getnchannels() != 1:
            raise InputError("only mono WAV is supported")
        if fh.getsampwidth() != 2:
            raise InputError("only 16-bit PCM WAV is supported")
        raw = fh.readframes(fh.getnframes())
        sr = fh.getframerate()
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, sr)


def write_wav(path, w: Waveform) -> None:
    with _wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
        fh.writeframes(pcm.tobytes())
