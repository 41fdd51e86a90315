"""RF signal preprocessing: normalization/truncation, SNR-targeted noise
injection, log-power spectrograms, and sample mixing.

Records are complex64 I/Q sequences truncated to 50,000 samples and scaled
to unit average power.  Noise is complex white Gaussian with the variance
split evenly across the I and Q components.  Spectrograms use a periodic
Hann window of 256 samples with hop 128 and a 256-point transform, which
maps a 50,000-sample record onto exactly 389 time frames; the log floor
keeps zero-power cells finite.  All randomness flows through explicit
seeds, so identical seeds give bit-identical outputs.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import RecordRejected, ValidationError

TARGET_LEN = 50_000
MIN_FILE_BYTES = 200 * 1024  # ingestion guard on raw capture files
CLASS_COUNT = 7

WIN_LEN = 256
HOP = 128
FFT_LEN = 256
LOG_EPS = 1e-12
IMAGE_ROWS = 102

CLEAN = math.inf  # snr_db sentinel: no noise


@dataclass
class IqRecord:
    samples: np.ndarray  # complex64, length TARGET_LEN after preprocessing
    label: int
    source_id: str


@dataclass
class Spectrogram:
    data: np.ndarray       # (frames, bins) float64 log-power
    label: np.ndarray      # soft-label simplex vector, length CLASS_COUNT
    params: dict

    def copy(self) -> "Spectrogram":
        return Spectrogram(self.data.copy(), self.label.copy(), dict(self.params))


def one_hot(label: int, classes: int = CLASS_COUNT) -> np.ndarray:
    if not 0 <= label < classes:
        raise ValidationError(f"label {label} outside [0, {classes})")
    v = np.zeros(classes)
    v[label] = 1.0
    return v


def normalize_truncate(raw: np.ndarray, min_len: int = TARGET_LEN, *,
                       label: int = 0, source_id: str = "") -> IqRecord:
    """Keep the first 50,000 samples and scale to unit average power.

    Rejects records shorter than ``min_len`` and records with zero power.
    """
    raw = np.asarray(raw)
    if raw.size < min_len:
        raise RecordRejected(
            f"record {source_id or '<anon>'}: {raw.size} samples < {min_len}"
        )
    samples = raw[:TARGET_LEN].astype(np.complex64)
    power = float(np.mean(np.abs(samples.astype(np.complex128)) ** 2))
    if power <= 0.0 or not math.isfinite(power):
        raise RecordRejected(
            f"record {source_id or '<anon>'}: power {power} is not normalizable"
        )
    samples = (samples / np.sqrt(power)).astype(np.complex64)
    return IqRecord(samples=samples, label=label, source_id=source_id)


def inject_awgn(rec: IqRecord, snr_db: float, seed: int) -> IqRecord:
    """Add complex white Gaussian noise hitting the target SNR in dB.

    The noise power is sigma^2 = P_signal * 10^(-snr/10), split evenly
    between I and Q.  ``snr_db=inf`` is the "clean" sentinel and returns
    the record unchanged.
    """
    if isinstance(snr_db, float) and math.isnan(snr_db):
        raise ValidationError("snr_db is NaN")
    if snr_db == CLEAN:
        return IqRecord(rec.samples.copy(), rec.label, rec.source_id)
    if not math.isfinite(snr_db):
        raise ValidationError(f"snr_db {snr_db} is not finite")
    n = rec.samples.size
    p_signal = float(np.mean(np.abs(rec.samples.astype(np.complex128)) ** 2))
    sigma2 = p_signal * 10.0 ** (-snr_db / 10.0)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    scale = np.sqrt(sigma2 / 2.0)
    noise_i = rng.standard_normal(n) * scale
    noise_q = rng.standard_normal(n) * scale
    noisy = (rec.samples.astype(np.complex128) + noise_i + 1j * noise_q)
    return IqRecord(noisy.astype(np.complex64), rec.label, rec.source_id)


def hann_window(length: int = WIN_LEN) -> np.ndarray:
    """Periodic Hann window (DFT-even)."""
    m = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * m / length)


def frame_count(n_samples: int, win_len: int = WIN_LEN, hop: int = HOP) -> int:
    return (n_samples - win_len) // hop + 1


def stft_spectrogram(rec: IqRecord) -> Spectrogram:
    """Log-power short-time spectrum: log10(|X(t, f)|^2 + eps).

    Frames of 256 samples advance by 128; each frame is Hann-windowed and
    transformed with a 256-point DFT (two-sided, complex input).
    """
    n = rec.samples.size
    if n < WIN_LEN:
        raise ValidationError(f"record length {n} shorter than one window ({WIN_LEN})")
    frames = frame_count(n)
    window = hann_window()
    idx = np.arange(WIN_LEN)[None, :] + HOP * np.arange(frames)[:, None]
    segments = rec.samples.astype(np.complex128)[idx] * window[None, :]
    spectrum = np.fft.fft(segments, n=FFT_LEN, axis=1)
    data = np.log10(np.abs(spectrum) ** 2 + LOG_EPS)
    return Spectrogram(
        data=data,
        label=one_hot(rec.label),
        params={"window": "hann", "win_len": WIN_LEN, "hop": HOP, "fft_len": FFT_LEN},
    )


def spectrogram_image(spec: Spectrogram, rows: int = IMAGE_ROWS,
                      arrange: str = "shift") -> np.ndarray:
    """Arrange a spectrogram as a (rows, frames) image.

    ``shift`` centers the spectrum (fftshift) before taking the first
    ``rows`` bins; ``low`` takes bins 0..rows-1 unshifted.  The exact
    bin-to-row mapping is a configuration choice.
    """
    bins = spec.data.shape[1]
    if rows > bins:
        raise ValidationError(f"rows {rows} > available bins {bins}")
    grid = spec.data.T  # (bins, frames)
    if arrange == "shift":
        grid = np.fft.fftshift(grid, axes=0)
    elif arrange != "low":
        raise ValidationError(f"unknown arrangement {arrange!r}")
    return np.ascontiguousarray(grid[:rows], dtype=np.float32)


def beta_lambda(alpha: float, rng: np.random.Generator) -> float:
    """Beta(alpha, alpha) draw via two Gamma(alpha, 1) variates."""
    g1 = rng.standard_gamma(alpha)
    g2 = rng.standard_gamma(alpha)
    total = g1 + g2
    if total <= 0.0:
        return 1.0
    return float(g1 / total)


def mixup(a: Spectrogram, b: Spectrogram, alpha: float, seed: int) -> Spectrogram:
    """Convex combination of two spectrograms and their labels.

    lambda ~ Beta(alpha, alpha); ``alpha=0`` is the disabled sentinel
    (lambda = 1, output equals the first input exactly).
    """
    if a.data.shape != b.data.shape or a.label.shape != b.label.shape:
        raise ValidationError(
            f"mixup shape mismatch: {a.data.shape} vs {b.data.shape}"
        )
    if not math.isfinite(alpha) or alpha < 0.0:
        raise ValidationError(f"alpha {alpha} must be finite and >= 0")
    if alpha == 0.0:
        return a.copy()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    lam = beta_lambda(alpha, rng)
    data = lam * a.data + (1.0 - lam) * b.data
    label = lam * a.label + (1.0 - lam) * b.label
    return Spectrogram(data=data, label=label, params=dict(a.params))


# -- dataset construction -----------------------------------------------------

def record_seed(master_seed: int, source_id: str, purpose: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{purpose}:{source_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def load_labels_csv(path: str | Path) -> dict[str, int]:
    labels: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "file":
                continue
            if len(row) < 2:
                raise ValidationError(f"labels row {row!r} needs file,label")
            labels[row[0].strip()] = int(row[1])
    if not labels:
        raise ValidationError(f"labels file {path} holds no entries")
    return labels


def load_iq_file(path: str | Path) -> np.ndarray:
    """Raw little-endian complex64 I/Q samples; small captures are rejected."""
    path = Path(path)
    size = path.stat().st_size
    if size < MIN_FILE_BYTES:
        raise RecordRejected(
            f"file {path.name}: {size} bytes < {MIN_FILE_BYTES} ingestion threshold"
        )
    return np.fromfile(path, dtype="<c8")
