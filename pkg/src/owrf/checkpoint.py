"""Versioned binary checkpoints: encoder state plus per-class gate statistics.

Layout: magic ``OWCK``, version u16, u32 header length, JSON header (config,
class table, step counters, statistics metadata), then raw little-endian
float64 blocks: the flat parameter vector followed by each class's mean and
covariance. Writes are atomic (temp file + rename) and byte-reproducible.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .embedding import EncoderConfig, TrainState, _Layout
from .errors import DataFormatError, MissingArtifactError
from .openset import ClassStatistics, _build_stats

MAGIC = b"OWCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointBundle:
    """Loaded checkpoint contents."""

    def __init__(
        self,
        state: TrainState,
        stats: dict[int, ClassStatistics] | None,
        extra: dict | None,
    ):
        self.state = state
        self.stats = stats
        self.extra = extra or {}

    def __iter__(self):
        # allows `state, stats = load_checkpoint(...)` for the common case
        return iter((self.state, self.stats))


def save_checkpoint(
    path: str | Path,
    state: TrainState,
    stats: dict[int, ClassStatistics] | None = None,
    extra: dict | None = None,
) -> None:
    path = Path(path)
    header = {
        "extra": extra or {},
        "config": {
            "input_dims": list(state.config.input_dims),
            "hidden_widths": list(state.config.hidden_widths),
            "embed_dim": state.config.embed_dim,
            "activation": state.config.activation,
            "seed": state.config.seed,
        },
        "class_ids": list(state.class_ids),
        "step_count": state.step_count,
        "epoch_count": state.epoch_count,
        "param_count": int(state.params.size),
        "stats": None
        if stats is None
        else [
            {
                "class_id": int(cid),
                "tau": float(stats[cid].tau),
                "n_samples": int(stats[cid].n_samples),
            }
            for cid in sorted(stats)
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = [_PREFIX.pack(MAGIC, VERSION, len(header_bytes)), header_bytes]
    blobs.append(state.params.astype("<f8").tobytes())
    if stats is not None:
        for cid in sorted(stats):
            blobs.append(stats[cid].mu.astype("<f8").tobytes())
            blobs.append(stats[cid].sigma.astype("<f8").tobytes())

    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise DataFormatError(f"checkpoint too short: {path}")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise DataFormatError(f"bad checkpoint magic {magic!r} in {path}")
    if version != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    offset = _PREFIX.size
    try:
        header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"corrupt checkpoint header in {path}") from exc
    offset += header_len

    config = EncoderConfig(
        input_dims=tuple(header["config"]["input_dims"]),
        hidden_widths=tuple(header["config"]["hidden_widths"]),
        embed_dim=header["config"]["embed_dim"],
        activation=header["config"]["activation"],
        seed=header["config"]["seed"],
    )
    class_ids = tuple(int(c) for c in header["class_ids"])
    param_count = int(header["param_count"])
    expected = _Layout(config, len(class_ids)).total
    if param_count != expected:
        raise DataFormatError(
            f"checkpoint {path}: {param_count} parameters, layout expects {expected}"
        )

    def take(count: int) -> np.ndarray:
        nonlocal offset
        end = offset + 8 * count
        if end > len(raw):
            raise DataFormatError(f"truncated checkpoint: {path}")
        block = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset = end
        return block.astype(np.float64)

    params = take(param_count)
    state = TrainState(
        config=config,
        class_ids=class_ids,
        params=params,
        adam_m=np.zeros_like(params),
        adam_v=np.zeros_like(params),
        step_count=int(header["step_count"]),
        epoch_count=int(header["epoch_count"]),
    )

    stats = None
    if header["stats"] is not None:
        d = config.embed_dim
        stats = {}
        for entry in header["stats"]:
            mu = take(d)
            sigma = take(d * d).reshape(d, d)
            built = _build_stats(
                int(entry["class_id"]), mu, sigma, float(entry["tau"]),
                int(entry["n_samples"]),
            )
            stats[int(entry["class_id"])] = built
    if offset != len(raw):
        raise DataFormatError(f"trailing bytes in checkpoint: {path}")
    return CheckpointBundle(state, stats, header.get("extra"))
