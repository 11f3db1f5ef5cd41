"""owrf: open-world RF emitter recognition.

Embeds spectrograms into a metric space, rejects unknown emitters with
per-class Mahalanobis gates, discovers novel classes by validity-scored
clustering, and assimilates them through replay-bounded incremental updates.
"""

from .embedding import EncoderConfig, LossConfig, TrainState, composite_loss, encode
from .errors import OwrfError
from .openset import UNKNOWN, ClassStatistics, OpenSetDecision, decide, fit_class_stats
from .signal import IQRecord, Spectrogram, SynthClassProfile, generate_burst, stft_spectrogram

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig",
    "LossConfig",
    "TrainState",
    "composite_loss",
    "encode",
    "OwrfError",
    "UNKNOWN",
    "ClassStatistics",
    "OpenSetDecision",
    "decide",
    "fit_class_stats",
    "IQRecord",
    "Spectrogram",
    "SynthClassProfile",
    "generate_burst",
    "stft_spectrogram",
    "__version__",
]
