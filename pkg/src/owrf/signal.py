"""Synthetic RF burst generation, I/Q file ingestion, and spectrogram conversion.

All operations are pure: records and spectrograms are never mutated after
construction, so they are safe to share across threads.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from .errors import (
    ConfigurationError,
    DataFormatError,
    TooShortRecordError,
    UnknownWindowError,
)

LOG_EPS = 1e-12          # floor inside 10*log10(power + LOG_EPS); keeps dB finite
BURST_PERIOD = 512       # samples per on/off gating cycle when burst_duty < 1
AM_CYCLE = 64            # samples per AM envelope cycle

CACHE_MAGIC = b"OWRF"
CACHE_VERSION = 1
# magic, version u16, n_frames u32, n_bins u32, 2 reserved bytes -> 16 bytes
_CACHE_HEADER = struct.Struct("<4sHII2x")

_WINDOW_ALIASES = {
    "hann": "hann",
    "hamming": "hamming",
    "blackman": "blackman",
    "rectangular": "boxcar",
}

MANIFEST_REQUIRED_FIELDS = ("path", "sample_rate", "carrier_freq", "source_id")


@dataclass(frozen=True)
class IQRecord:
    """A complex baseband capture plus its provenance metadata."""

    samples: np.ndarray          # complex64, interleaved-I/Q precision
    sample_rate: float           # Hz
    carrier_freq: float          # Hz
    label: str | None = None
    source_id: str = ""

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.complex64)
        object.__setattr__(self, "samples", samples)
        if samples.size == 0:
            raise DataFormatError("record has no samples")
        if not self.sample_rate > 0:
            raise ConfigurationError(f"sample_rate must be > 0, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise DataFormatError("record contains non-finite samples")


@dataclass(frozen=True)
class SynthClassProfile:
    """Synthetic emitter signature: tones, hopping, chip bandwidth, gating, AM.

    Profiles are the testing substrate; parameters control how much spectral
    overlap distinct classes have, which drives open-set difficulty.
    """

    class_id: str
    tone_set: tuple[float, ...]        # baseband offsets, Hz
    hop_period: float = 0.0            # seconds; 0 = no hopping (tones summed)
    bandwidth: float = 0.0             # Hz; >0 applies BPSK chips at this rate
    burst_duty: float = 1.0            # fraction of each gating cycle that is on
    am_depth: float = 0.0              # amplitude-modulation depth in [0, 1)

    def validate(self, sample_rate: float | None = None) -> None:
        if not self.class_id:
            raise ConfigurationError("profile class_id must be non-empty")
        if len(self.tone_set) == 0:
            raise ConfigurationError(f"profile {self.class_id!r}: empty tone_set")
        if self.hop_period < 0:
            raise ConfigurationError(f"profile {self.class_id!r}: negative hop_period")
        if self.bandwidth < 0:
            raise ConfigurationError(f"profile {self.class_id!r}: negative bandwidth")
        if not 0 < self.burst_duty <= 1:
            raise ConfigurationError(
                f"profile {self.class_id!r}: burst_duty must be in (0, 1]"
            )
        if not 0 <= self.am_depth < 1:
            raise ConfigurationError(
                f"profile {self.class_id!r}: am_depth must be in [0, 1)"
            )
        if sample_rate is not None:
            half = sample_rate / 2
            for f in self.tone_set:
                if abs(f) > half:
                    raise ConfigurationError(
                        f"profile {self.class_id!r}: tone {f} Hz outside ±{half} Hz"
                    )


@dataclass(frozen=True)
class Spectrogram:
    """Normalized log-power time-frequency matrix, values in [0, 1]."""

    values: np.ndarray           # [n_frames, n_bins], float64
    frame_hop: int
    fft_size: int
    window: str
    label: str | None = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 2:
            raise ConfigurationError("spectrogram values must be 2-D")
        if values.shape[1] != self.fft_size // 2 + 1:
            raise ConfigurationError(
                f"n_bins {values.shape[1]} != fft_size/2+1 = {self.fft_size // 2 + 1}"
            )
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ConfigurationError("spectrogram values must lie in [0, 1]")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


def _window_coefficients(name: str, length: int) -> np.ndarray:
    try:
        scipy_name = _WINDOW_ALIASES[name]
    except KeyError:
        raise UnknownWindowError(
            f"unknown window {name!r}; supported: {sorted(_WINDOW_ALIASES)}"
        ) from None
    return get_window(scipy_name, length, fftbins=True).astype(np.float64)


def _chip_stream(rng: np.random.Generator, n: int, chip_len: int) -> np.ndarray:
    """Random ±1 chips held for chip_len samples each (constant envelope)."""
    n_chips = -(-n // chip_len)
    chips = rng.integers(0, 2, size=n_chips) * 2.0 - 1.0
    return np.repeat(chips, chip_len)[:n]


def generate_burst(
    profile: SynthClassProfile,
    duration: float,
    snr_db: float,
    seed: int,
    *,
    sample_rate: float = 1_000_000.0,
    carrier_freq: float = 2.4e9,
) -> IQRecord:
    """Generate one labeled baseband burst: tone carrier(s) plus AWGN.

    The waveform is built from the profile (tones, optional hopping, BPSK
    chipping at ``bandwidth``, AM envelope, on/off gating) and mixed with
    complex white Gaussian noise scaled so the empirical power ratio
    mean|signal|^2 / mean|noise|^2 matches ``snr_db`` exactly. Pass
    ``snr_db=math.inf`` to disable noise.

    Deterministic for fixed arguments: chips are drawn first (in tone order),
    noise last, from a generator seeded with ``seed``.
    """
    profile.validate(sample_rate)
    if not duration > 0:
        raise ConfigurationError(f"duration must be > 0, got {duration}")
    n = int(round(duration * sample_rate))
    if n < 1:
        raise TooShortRecordError(
            f"duration {duration}s yields {n} samples at {sample_rate} Hz"
        )

    rng = np.random.default_rng(seed)
    t = np.arange(n, dtype=np.float64) / sample_rate
    tones = np.asarray(profile.tone_set, dtype=np.float64)
    if profile.bandwidth > 0:
        # one chip per bandwidth period, never longer than the record itself;
        # clamp in float space first (tiny bandwidths overflow to inf)
        period = sample_rate / profile.bandwidth
        chip_len = int(round(min(float(n), max(1.0, period))))
    else:
        chip_len = 0

    if profile.hop_period > 0:
        # One tone active at a time; hop index advances every hop_period.
        hop_len = max(1, int(round(profile.hop_period * sample_rate)))
        active = tones[(np.arange(n) // hop_len) % len(tones)]
        signal = np.exp(2j * np.pi * active * t)
        if chip_len:
            signal = signal * _chip_stream(rng, n, chip_len)
    else:
        parts = []
        for f in tones:
            c = np.exp(2j * np.pi * f * t)
            if chip_len:
                c = c * _chip_stream(rng, n, chip_len)
            parts.append(c)
        signal = np.add.reduce(parts) / math.sqrt(len(tones))

    if profile.am_depth > 0:
        signal = signal * (
            1.0 + profile.am_depth * np.cos(2 * np.pi * np.arange(n) / AM_CYCLE)
        )
    if profile.burst_duty < 1:
        on_len = max(1, int(round(profile.burst_duty * BURST_PERIOD)))
        signal = signal * ((np.arange(n) % BURST_PERIOD) < on_len)

    if math.isfinite(snr_db):
        noise = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / math.sqrt(2)
        p_signal = float(np.mean(np.abs(signal) ** 2))
        p_noise = float(np.mean(np.abs(noise) ** 2))
        scale = math.sqrt(p_signal / (10 ** (snr_db / 10) * p_noise))
        mixture = signal + scale * noise
    else:
        mixture = signal

    return IQRecord(
        samples=mixture.astype(np.complex64),
        sample_rate=sample_rate,
        carrier_freq=carrier_freq,
        label=profile.class_id,
        source_id=f"synth:{profile.class_id}:{seed}",
    )


def write_iq(record: IQRecord, path: str | Path) -> None:
    """Write samples as interleaved I,Q little-endian float32, no header."""
    flat = np.empty(record.samples.size * 2, dtype="<f4")
    flat[0::2] = record.samples.real
    flat[1::2] = record.samples.imag
    Path(path).write_bytes(flat.tobytes())


def ingest_iq(path: str | Path, manifest_entry: dict) -> IQRecord:
    """Load an interleaved-float32 I/Q file with metadata from a manifest row.

    The manifest row must carry ``path``, ``sample_rate``, ``carrier_freq``
    and ``source_id``; ``label`` is optional. Extra fields are ignored.
    """
    for field_name in MANIFEST_REQUIRED_FIELDS:
        if field_name not in manifest_entry:
            raise DataFormatError(f"manifest entry missing field {field_name!r}")
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"I/Q file not found: {path}")
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size == 0:
        raise DataFormatError(f"empty I/Q file: {path}")
    if raw.size % 2 != 0:
        raise DataFormatError(
            f"truncated I/Q file {path}: {raw.size} floats is not a whole "
            "number of complex samples"
        )
    if not np.all(np.isfinite(raw)):
        raise DataFormatError(f"non-finite values in I/Q file: {path}")
    samples = raw[0::2].astype(np.complex64)
    samples += 1j * raw[1::2].astype(np.complex64)
    return IQRecord(
        samples=samples,
        sample_rate=float(manifest_entry["sample_rate"]),
        carrier_freq=float(manifest_entry["carrier_freq"]),
        label=manifest_entry.get("label"),
        source_id=str(manifest_entry["source_id"]),
    )


def stft_spectrogram(
    record: IQRecord,
    fft_size: int,
    frame_hop: int,
    window: str = "hann",
) -> Spectrogram:
    """Short-time Fourier transform to a normalized log-power spectrogram.

    Frames of ``fft_size`` samples advance by ``frame_hop``; the two-sided
    complex spectrum is folded onto fft_size/2 + 1 bins by summing the powers
    of bins m and fft_size - m, which preserves total power (Parseval holds
    exactly for the rectangular window). Bin powers are scaled to dB via
    10*log10(p + 1e-12) and min-max normalized to [0, 1]; a zero dynamic
    range (constant spectrogram, e.g. an all-zero capture) maps to all zeros.
    """
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise ConfigurationError(f"fft_size must be a power of two, got {fft_size}")
    if not 0 < frame_hop <= fft_size:
        raise ConfigurationError(
            f"frame_hop must be in (0, fft_size], got {frame_hop}"
        )
    n = record.samples.size
    if n < fft_size:
        raise TooShortRecordError(
            f"record of {n} samples is shorter than fft_size {fft_size}"
        )
    coeffs = _window_coefficients(window, fft_size)

    frames = np.lib.stride_tricks.sliding_window_view(record.samples, fft_size)
    frames = frames[::frame_hop].astype(np.complex128)
    spectrum = np.fft.fft(frames * coeffs, axis=1)
    power = np.abs(spectrum) ** 2 / fft_size

    half = fft_size // 2
    folded = np.empty((power.shape[0], half + 1), dtype=np.float64)
    folded[:, 0] = power[:, 0]
    folded[:, half] = power[:, half]
    folded[:, 1:half] = power[:, 1:half] + power[:, :half:-1]

    db = 10.0 * np.log10(folded + LOG_EPS)
    lo = db.min()
    hi = db.max()
    if hi - lo > 0:
        values = (db - lo) / (hi - lo)
    else:
        values = np.zeros_like(db)
    return Spectrogram(
        values=values,
        frame_hop=frame_hop,
        fft_size=fft_size,
        window=window,
        label=record.label,
    )


def linear_power_frame(
    record: IQRecord, fft_size: int, frame_index: int, window: str = "rectangular"
) -> np.ndarray:
    """Folded linear power spectrum of one frame (pre-dB); oracle support."""
    start = frame_index * fft_size
    frame = record.samples[start : start + fft_size].astype(np.complex128)
    if frame.size != fft_size:
        raise TooShortRecordError("frame extends past end of record")
    coeffs = _window_coefficients(window, fft_size)
    spectrum = np.fft.fft(frame * coeffs)
    power = np.abs(spectrum) ** 2 / fft_size
    half = fft_size // 2
    folded = np.empty(half + 1)
    folded[0] = power[0]
    folded[half] = power[half]
    folded[1:half] = power[1:half] + power[:half:-1]
    return folded


def save_spectrogram_cache(spec: Spectrogram, path: str | Path) -> None:
    """Binary cache: 16-byte header (OWRF magic) + row-major float32 values."""
    header = _CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, spec.n_frames, spec.n_bins)
    body = spec.values.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(header + body)


def load_spectrogram_cache(
    path: str | Path,
    *,
    frame_hop: int | None = None,
    window: str = "hann",
    label: str | None = None,
) -> Spectrogram:
    """Load a cached spectrogram; fft_size is inferred from the bin count.

    The cache stores only the value matrix; hop/window/label metadata is not
    persisted and must be supplied by the caller when it matters.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _CACHE_HEADER.size:
        raise DataFormatError(f"spectrogram cache too short: {path}")
    magic, version, n_frames, n_bins = _CACHE_HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise DataFormatError(f"bad cache magic {magic!r} in {path}")
    if version != CACHE_VERSION:
        raise DataFormatError(f"unsupported cache version {version} in {path}")
    expected = _CACHE_HEADER.size + 4 * n_frames * n_bins
    if len(raw) != expected:
        raise DataFormatError(
            f"cache {path}: expected {expected} bytes, found {len(raw)}"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=_CACHE_HEADER.size)
    values = values.reshape(n_frames, n_bins).astype(np.float64)
    fft_size = (n_bins - 1) * 2
    return Spectrogram(
        values=values,
        frame_hop=fft_size if frame_hop is None else frame_hop,
        fft_size=fft_size,
        window=window,
        label=label,
    )


def write_manifest(entries: list[dict], path: str | Path) -> None:
    """One JSON object per line, keys sorted for reproducible bytes."""
    lines = [json.dumps(e, sort_keys=True) for e in entries]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"manifest not found: {path}")
    entries = []
    for i, line in enumerate(path.read_text().splitlines()):
        line = line.strip()
        if not line:
            continue
        try:
            entries.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"manifest {path} line {i + 1}: {exc}") from exc
    return entries
