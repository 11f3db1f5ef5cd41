from __future__ import annotations

import numpy as np
import pytest

from owrf.signal import SynthClassProfile, generate_burst, stft_spectrogram

# Small-world parameters shared by the fast tests: 128-sample records,
# 16-point FFT -> 8 frames x 9 bins = 72 input dims.
SMALL_FS = 16_000.0
SMALL_DURATION = 0.008
SMALL_FFT = 16
SMALL_HOP = 16
SMALL_SHAPE = (8, 9)


def small_profile(class_id: str, tone: float, **kwargs) -> SynthClassProfile:
    return SynthClassProfile(class_id=class_id, tone_set=(tone,), **kwargs)


def make_small_dataset(
    profiles: list[SynthClassProfile],
    per_class: int,
    snr_db: float | tuple[float, ...] = 25.0,
    seed_base: int = 0,
) -> list[tuple]:
    """(spectrogram, class index) pairs over the small-world geometry.

    Passing several SNRs multiplies the per-class count; mixed-SNR training
    keeps the class gates from overfitting a single noise level.
    """
    snrs = snr_db if isinstance(snr_db, tuple) else (snr_db,)
    out = []
    for ci, profile in enumerate(profiles):
        for si, snr in enumerate(snrs):
            for i in range(per_class):
                record = generate_burst(
                    profile,
                    SMALL_DURATION,
                    snr,
                    seed=seed_base + 100_000 * si + 1000 * ci + i,
                    sample_rate=SMALL_FS,
                )
                spec = stft_spectrogram(record, SMALL_FFT, SMALL_HOP, "hann")
                out.append((spec, ci))
    return out


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
