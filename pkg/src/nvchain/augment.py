"""Waveform augmentation (pitch shift, speaking-rate change) and VAD trimming."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window, resample

from .errors import ConfigError, InputError
from .wav import Waveform, read_wav, write_wav  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

N_FFT = 1024
HOP = 256


@dataclass(frozen=True)
class AugmentConfig:
    pitch_range_cents: tuple = (-300.0, 300.0)
    rate_range: tuple = (0.8, 1.2)

    def __post_init__(self):
        plo, phi = self.pitch_range_cents
        rlo, rhi = self.rate_range
        if plo > phi or rlo > rhi:
            raise ConfigError("augmentation ranges need lo <= hi")
        if rlo <= 0:
            raise ConfigError("speaking-rate bounds must be positive")
        if max(abs(plo), abs(phi)) > 1200 or rlo < 0.5 or rhi > 2.0:
            raise ConfigError("augmentation ranges exceed |cents| <= 1200, rate in [0.5, 2]")


def _clipped(samples, sample_rate, prior=0):
    over = int(np.count_nonzero(np.abs(samples) > 1.0))
    if over:
        log.warning("clipped %d samples to [-1, 1]", over)
        samples = np.clip(samples, -1.0, 1.0)
    return Waveform(sample_rate, samples, prior + over)


def _stft(x, win):
    pad = N_FFT // 2
    n_frames = 1 + int(np.ceil(x.size / HOP))
    total = (n_frames - 1) * HOP + N_FFT
    padded = np.zeros(total)
    padded[pad:pad + x.size] = x
    idx = np.arange(N_FFT)[None, :] + HOP * np.arange(n_frames)[:, None]
    return np.fft.rfft(padded[idx] * win, axis=1)


def _istft(spectrum, win, length):
    n_frames = spectrum.shape[0]
    total = (n_frames - 1) * HOP + N_FFT
    out = np.zeros(total)
    norm = np.zeros(total)
    frames = np.fft.irfft(spectrum, n=N_FFT, axis=1) * win
    w2 = win * win
    for t in range(n_frames):
        out[t * HOP:t * HOP + N_FFT] += frames[t]
        norm[t * HOP:t * HOP + N_FFT] += w2
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out = out[N_FFT // 2:]
    if out.size >= length:
        return out[:length]
    return np.concatenate([out, np.zeros(length - out.size)])


def _phase_vocoder(x, rate):
    """Stretch ``x`` to ``round(len / rate)`` samples keeping its pitch."""
    win = get_window("hann", N_FFT)
    spectrum = _stft(x, win)
    n_frames = spectrum.shape[0]
    mag = np.abs(spectrum)
    phase = np.angle(spectrum)
    mag = np.vstack([mag, np.zeros((1, mag.shape[1]))])
    phase = np.vstack([phase, np.zeros((1, phase.shape[1]))])
    advance = 2.0 * np.pi * HOP * np.arange(spectrum.shape[1]) / N_FFT

    steps = np.arange(0.0, n_frames, rate)
    out = np.empty((steps.size, spectrum.shape[1]), dtype=complex)
    acc = phase[0].copy()
    for t, step in enumerate(steps):
        i = int(step)
        frac = step - i
        out[t] = ((1.0 - frac) * mag[i] + frac * mag[i + 1]) * np.exp(1j * acc)
        dphi = phase[i + 1] - phase[i] - advance
        dphi -= 2.0 * np.pi * np.round(dphi / (2.0 * np.pi))
        acc += advance + dphi
    return _istft(out, win, int(round(x.size / rate)))


def time_stretch(w, rate):
    """Change speaking rate by ``rate`` (>1 faster) without changing pitch."""
    if not 0.5 <= rate <= 2.0:
        raise InputError(f"rate must lie in [0.5, 2.0], got {rate}")
    return _clipped(_phase_vocoder(w.samples, rate), w.sample_rate, w.n_clipped)


def pitch_shift(w, cents):
    """Shift pitch by ``cents`` keeping the duration.

    Stretch by the frequency ratio with the phase vocoder, then resample back
    to the original length.
    """
    if abs(cents) > 1200:
        raise InputError(f"|cents| must be <= 1200, got {cents}")
    if cents == 0:
        return time_stretch(w, 1.0)
    ratio = 2.0 ** (cents / 1200.0)
    stretched = _phase_vocoder(w.samples, 1.0 / ratio)
    return _clipped(resample(stretched, w.samples.size), w.sample_rate, w.n_clipped)


def vad_trim(w, frame_ms=30, threshold_db=-40.0):
    """Drop leading and trailing frames quieter than the loudest by ``threshold_db``."""
    if not 10 <= frame_ms <= 50:
        raise InputError(f"frame_ms must lie in [10, 50], got {frame_ms}")
    if threshold_db >= 0:
        raise InputError(f"threshold_db must be negative, got {threshold_db}")
    x = w.samples
    flen = max(1, int(round(w.sample_rate * frame_ms / 1000.0)))
    n = int(np.ceil(x.size / flen))
    rms = np.array([np.sqrt(np.mean(x[i * flen:(i + 1) * flen] ** 2)) for i in range(n)])
    loud = np.flatnonzero(rms > rms.max() * 10.0 ** (threshold_db / 20.0))
    if loud.size == 0:
        k = int(np.argmax(rms))
        first = last = k
    else:
        first, last = loud[0], loud[-1]
    return Waveform(w.sample_rate, x[first * flen:(last + 1) * flen].copy(), w.n_clipped)


def draw_augment_params(config, seed):
    rng = np.random.default_rng(seed)
    cents = float(rng.uniform(*config.pitch_range_cents))
    rate = float(rng.uniform(*config.rate_range))
    return cents, rate


def random_augment(w, config, rng_seed):
    """Random pitch shift then random rate change, both drawn from ``config``."""
    cents, rate = draw_augment_params(config, rng_seed)
    return time_stretch(pitch_shift(w, cents), rate)


def band_energy_features(w, n_bands=16, frame_ms=25.0, hop_ms=10.0):
    """Log band energies per frame; a simple waveform-to-features hook.

    Bands split the spectrum up to Nyquist evenly on a log-frequency scale.
    """
    flen = int(round(w.sample_rate * frame_ms / 1000.0))
    hop = int(round(w.sample_rate * hop_ms / 1000.0))
    x = w.samples
    if x.size < flen:
        x = np.concatenate([x, np.zeros(flen - x.size)])
    n = 1 + (x.size - flen) // hop
    idx = np.arange(flen)[None, :] + hop * np.arange(n)[:, None]
    power = np.abs(np.fft.rfft(x[idx] * np.hanning(flen), axis=1)) ** 2
    edges = np.unique(np.round(np.geomspace(1, power.shape[1], n_bands + 1)).astype(int))
    if edges.size < n_bands + 1:
        edges = np.linspace(1, power.shape[1], n_bands + 1).astype(int)
    bands = np.stack([power[:, a:max(b, a + 1)].sum(axis=1) for a, b in zip(edges[:-1], edges[1:])],
                     axis=1)
    return np.log(bands + 1e-10)
