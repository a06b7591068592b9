"""Minimal RIFF/WAVE reader and writer for 16-bit PCM mono audio."""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import InputError, TruncatedError, UnsupportedWavError, WavError
from .fileio import atomic_write_bytes

WAVE_FORMAT_PCM = 1


@dataclass
class Waveform:
    sample_rate: int
    samples: np.ndarray
    n_clipped: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InputError("waveform must be a non-empty 1-D signal")
        if int(self.sample_rate) <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


def decode_wav(data):
    if len(data) < 12:
        raise TruncatedError("RIFF header")
    riff, _, wave = struct.unpack_from("<4sI4s", data, 0)
    if riff != b"RIFF" or wave != b"WAVE":
        raise WavError("not a RIFF/WAVE file")
    pos = 12
    fmt = None
    while True:
        if pos + 8 > len(data):
            if fmt is None:
                raise WavError("malformed WAV: no fmt chunk")
            raise WavError("malformed WAV: no data chunk")
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = pos + 8
        if cid == b"fmt ":
            if size < 16:
                raise WavError(f"malformed WAV: fmt chunk of {size} bytes")
            if body + 16 > len(data):
                raise TruncatedError("fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", data, body)
        elif cid == b"data":
            if fmt is None:
                raise WavError("malformed WAV: data chunk before fmt chunk")
            break
        pos = body + size + (size & 1)

    tag, channels, rate, _, block_align, bits = fmt
    if tag != WAVE_FORMAT_PCM:
        raise UnsupportedWavError(f"unsupported encoding: format tag {tag} is not PCM")
    if channels != 1:
        raise UnsupportedWavError(f"unsupported channel count: {channels}")
    if bits != 16 or block_align != 2:
        raise UnsupportedWavError(f"unsupported sample width: {bits} bits")
    if size % 2:
        raise WavError("malformed WAV: odd data chunk size for 16-bit audio")
    if body + size > len(data):
        raise TruncatedError("data chunk")
    if size == 0:
        raise WavError("WAV file has no samples")
    pcm = np.frombuffer(data, dtype="<i2", count=size // 2, offset=body)
    return Waveform(rate, pcm.astype(np.float64) / 32768.0)


def encode_wav(w):
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = pcm.tobytes()
    fmt = struct.pack("<HHIIHH", WAVE_FORMAT_PCM, 1, w.sample_rate, 2 * w.sample_rate, 2, 16)
    return (b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(payload)) + b"WAVE"
            + b"fmt " + struct.pack("<I", len(fmt)) + fmt
            + b"data" + struct.pack("<I", len(payload)) + payload)


def read_wav(path):
    with open(path, "rb") as f:
        return decode_wav(f.read())


def write_wav(path, w):
    atomic_write_bytes(path, encode_wav(w))
