"""Command implementations behind the CLI: dataset generation, base training,
open-set evaluation, streaming sessions with discovery, and standalone
clustering of a saved unknown buffer.

Every command writes its artifacts under a run directory and finishes by
writing ``manifest.json`` listing each produced file with its SHA-256, so a
run is self-describing and reruns can be compared byte by byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import embedding as emb
from . import evaluation as ev
from . import signal as sig
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PipelineConfig
from .discovery import discover, write_report_json, write_score_csv
from .errors import ConfigurationError, MissingArtifactError
from .incremental import SessionConfig, init_session, process_stream
from .openset import decide_many, fit_class_stats
from .seeding import derive_seed

log = logging.getLogger("owrf")

TRAIN_MANIFEST = "manifest_train.jsonl"
KNOWN_EVAL_MANIFEST = "manifest_known_eval.jsonl"
UNKNOWN_STREAM_MANIFEST = "manifest_unknown_stream.jsonl"
UNKNOWN_EVAL_MANIFEST = "manifest_unknown_eval.jsonl"
CHECKPOINT_NAME = "checkpoint.owck"
UPDATED_CHECKPOINT_NAME = "checkpoint_updated.owck"


def _write_run_manifest(out_dir: Path, files: list[Path]) -> None:
    rows = []
    for path in sorted(set(files)):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        rows.append(
            {
                "path": str(path.relative_to(out_dir)),
                "sha256": digest,
                "bytes": path.stat().st_size,
            }
        )
    (out_dir / "manifest.json").write_text(
        json.dumps({"files": rows}, sort_keys=True, indent=2) + "\n"
    )


def _prepare_out(out_dir: str | Path) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"output directory not writable: {out}: {exc}")
    return out


# ---------------------------------------------------------------------------
# generate


def cmd_generate(config: PipelineConfig, out_dir: str | Path) -> Path:
    """Synthesize the dataset: I/Q files plus split manifests."""
    if len(config.profiles) < 2:
        raise ConfigurationError("need at least 2 synthetic profiles")
    out = _prepare_out(out_dir)
    s = config.signal
    produced: list[Path] = []
    manifests: dict[str, list[dict]] = {
        TRAIN_MANIFEST: [],
        KNOWN_EVAL_MANIFEST: [],
        UNKNOWN_STREAM_MANIFEST: [],
        UNKNOWN_EVAL_MANIFEST: [],
    }
    split_plan = {
        "known": [("train", s.train_per_class, TRAIN_MANIFEST),
                  ("eval", s.eval_per_class, KNOWN_EVAL_MANIFEST)],
        "unknown": [("stream", s.stream_per_class, UNKNOWN_STREAM_MANIFEST),
                    ("eval", s.eval_per_class, UNKNOWN_EVAL_MANIFEST)],
    }
    for entry in config.profiles:
        profile = entry.profile
        class_dir = out / "iq" / profile.class_id
        class_dir.mkdir(parents=True, exist_ok=True)
        for split, count, manifest_name in split_plan[entry.role]:
            for si, snr in enumerate(s.snr_db):
                for idx in range(count):
                    seed = derive_seed(
                        config.root_seed, "signal", profile.class_id, split, si, idx
                    )
                    record = sig.generate_burst(
                        profile,
                        s.duration,
                        snr,
                        seed,
                        sample_rate=s.sample_rate,
                    )
                    rel = Path("iq") / profile.class_id / f"{split}_{si:02d}_{idx:04d}.iq"
                    sig.write_iq(record, out / rel)
                    produced.append(out / rel)
                    manifests[manifest_name].append(
                        {
                            "path": str(rel),
                            "sample_rate": s.sample_rate,
                            "carrier_freq": record.carrier_freq,
                            "label": profile.class_id,
                            "source_id": record.source_id,
                            "snr_db": snr,
                            "seed": seed,
                        }
                    )
    for name, entries in manifests.items():
        sig.write_manifest(entries, out / name)
        produced.append(out / name)
    _write_run_manifest(out, produced)
    log.info("generated %d records under %s", len(produced) - len(manifests), out)
    return out


def load_split(
    config: PipelineConfig, data_dir: str | Path, manifest_name: str
) -> list[tuple[sig.Spectrogram, str]]:
    """Read a manifest and return (spectrogram, truth label) pairs in order."""
    data_dir = Path(data_dir)
    manifest_path = data_dir / manifest_name
    if not manifest_path.exists():
        raise MissingArtifactError(f"manifest not found: {manifest_path}")
    s = config.signal
    pairs = []
    for entry in sig.read_manifest(manifest_path):
        record = sig.ingest_iq(data_dir / entry["path"], entry)
        spec = sig.stft_spectrogram(record, s.fft_size, s.frame_hop, s.window)
        pairs.append((spec, str(entry["label"])))
    return pairs


# ---------------------------------------------------------------------------
# train


def _encoder_config(config: PipelineConfig) -> emb.EncoderConfig:
    return emb.EncoderConfig(
        input_dims=config.signal.spectrogram_shape,
        hidden_widths=config.encoder.hidden_widths,
        embed_dim=config.encoder.embed_dim,
        activation=config.encoder.activation,
        seed=derive_seed(config.root_seed, "encoder"),
    )


def cmd_train(
    config: PipelineConfig, data_dir: str | Path, out_dir: str | Path
) -> Path:
    """Train the base encoder on the known-class split and fit the gates."""
    out = _prepare_out(out_dir)
    t0 = time.perf_counter()
    train_pairs = load_split(config, data_dir, TRAIN_MANIFEST)
    labels = sorted({label for _, label in train_pairs})
    label_to_id = {label: i for i, label in enumerate(labels)}
    data = [(spec, label_to_id[label]) for spec, label in train_pairs]

    state = emb.init_train_state(_encoder_config(config), list(range(len(labels))))
    state, history = emb.train(
        state,
        data,
        config.loss,
        lr=config.encoder.learning_rate,
        batch_size=config.encoder.batch_size,
        epochs=config.encoder.epochs,
        warmup_epochs=config.encoder.warmup_epochs,
    )
    embeddings_by_class: dict[int, np.ndarray] = {}
    for cid in sorted(label_to_id.values()):
        xs = np.stack(
            [
                emb.spectrogram_to_vec(state.config, spec)
                for spec, c in data
                if c == cid
            ]
        )
        embeddings_by_class[cid] = emb.encode_matrix(state, xs)
    stats = fit_class_stats(embeddings_by_class, config.openset.shrinkage)

    registry = {str(cid): label for label, cid in label_to_id.items()}
    checkpoint_path = out / CHECKPOINT_NAME
    save_checkpoint(checkpoint_path, state, stats, extra={"registry": registry})
    history_path = out / "training_history.json"
    history_path.write_text(json.dumps(history, sort_keys=True, indent=2) + "\n")
    _write_run_manifest(out, [checkpoint_path, history_path])
    log.info(
        "trained %d classes in %.1fs; checkpoint at %s",
        len(labels),
        time.perf_counter() - t0,
        checkpoint_path,
    )
    return checkpoint_path


# ---------------------------------------------------------------------------
# eval


def _registry_from_bundle(bundle) -> dict[int, str]:
    raw = bundle.extra.get("registry", {})
    return {int(k): str(v) for k, v in raw.items()}


def _score_pairs(
    state: emb.TrainState,
    stats,
    pairs: list[tuple[sig.Spectrogram, str]],
    known_label_by_id: dict[int, str],
    novel_label_by_id: dict[int, str] | None,
    out: Path,
    clustering: tuple[str, ...] = (),
) -> tuple[ev.EvalReport, list[Path]]:
    x = np.stack([emb.spectrogram_to_vec(state.config, spec) for spec, _ in pairs])
    truth = [label for _, label in pairs]
    t0 = time.perf_counter()
    decisions = decide_many(emb.encode_matrix(state, x), stats)
    report = ev.score_session(decisions, truth, known_label_by_id, novel_label_by_id)
    report = dataclasses.replace(
        report, clustering=clustering, wall_time=time.perf_counter() - t0
    )

    files = []
    ev.write_report_json(report, out / "report.json")
    files.append(out / "report.json")
    ev.write_confusion_csv(report, out / "confusion.csv")
    files.append(out / "confusion.csv")
    if len(pairs) >= 3:
        coords = ev.project_2d(emb.encode_matrix(state, x))
        predictions = [d.predicted for d in decisions]
        ev.write_projection_csv(coords, truth, predictions, out / "projection.csv")
        files.append(out / "projection.csv")
    return report, files


def cmd_eval(
    config: PipelineConfig,
    checkpoint_path: str | Path,
    data_dir: str | Path,
    out_dir: str | Path,
    split: str = "eval",
) -> ev.EvalReport:
    """Open-set evaluation of a checkpoint.

    ``split="eval"`` scores the known-eval and unknown-eval manifests
    together (unknowns should be rejected); ``split="train"`` scores the
    training split against itself.
    """
    out = _prepare_out(out_dir)
    bundle = load_checkpoint(checkpoint_path)
    if bundle.stats is None:
        raise MissingArtifactError("checkpoint carries no class statistics")
    registry = _registry_from_bundle(bundle)
    known_ids = {cid: registry.get(cid, str(cid)) for cid in bundle.state.class_ids}
    if split == "train":
        pairs = load_split(config, data_dir, TRAIN_MANIFEST)
    elif split == "eval":
        pairs = load_split(config, data_dir, KNOWN_EVAL_MANIFEST)
        unknown_eval = Path(data_dir) / UNKNOWN_EVAL_MANIFEST
        if unknown_eval.exists():
            pairs += load_split(config, data_dir, UNKNOWN_EVAL_MANIFEST)
    else:
        raise ConfigurationError(f"unknown split {split!r}; use 'eval' or 'train'")
    if not pairs:
        raise MissingArtifactError(f"no samples found for split {split!r}")
    report, files = _score_pairs(
        bundle.state, bundle.stats, pairs, known_ids, None, out
    )
    _write_run_manifest(out, files)
    log.info(
        "eval(%s): acc_old=%.1f%% rejection_unknown=%.1f%% (%.2fs)",
        split,
        report.acc_old,
        report.rejection_rate_unknown,
        report.wall_time,
    )
    return report


# ---------------------------------------------------------------------------
# stream


def _session_config(config: PipelineConfig, session_tag: str) -> SessionConfig:
    return SessionConfig(
        n_min=config.incremental.n_min,
        old_max=config.incremental.old_max,
        new_max=config.incremental.new_max,
        memory_capacity=config.incremental.memory_capacity,
        step_cap=config.incremental.step_cap,
        finetune_epochs=config.incremental.finetune_epochs,
        finetune_lr=config.incremental.finetune_lr,
        batch_size=config.encoder.batch_size,
        plateau_tol=config.incremental.plateau_tol,
        plateau_epochs=config.incremental.plateau_epochs,
        shrinkage=config.openset.shrinkage,
        min_refit_samples=config.incremental.min_refit_samples,
        loss=config.loss,
        discovery=dataclasses.replace(
            config.discovery, seed=derive_seed(config.root_seed, "discovery")
        ),
        session_tag=session_tag,
    )


def cmd_stream(
    config: PipelineConfig,
    checkpoint_path: str | Path,
    data_dir: str | Path,
    out_dir: str | Path,
) -> ev.EvalReport:
    """Run a streaming session over the unknown-stream split, then score the
    updated model on the held-out eval splits."""
    out = _prepare_out(out_dir)
    bundle = load_checkpoint(checkpoint_path)
    if bundle.stats is None:
        raise MissingArtifactError("checkpoint carries no class statistics")
    registry = _registry_from_bundle(bundle)
    known_ids = {cid: registry.get(cid, str(cid)) for cid in bundle.state.class_ids}

    train_pairs = load_split(config, data_dir, TRAIN_MANIFEST)
    label_to_id = {label: cid for cid, label in known_ids.items()}
    train_data = [(spec, label_to_id[label]) for spec, label in train_pairs]
    stream_pairs = load_split(config, data_dir, UNKNOWN_STREAM_MANIFEST)
    order = np.random.default_rng(
        derive_seed(config.root_seed, "stream-order")
    ).permutation(len(stream_pairs))
    stream_pairs = [stream_pairs[i] for i in order]

    session = init_session(
        bundle.state,
        bundle.stats,
        train_data,
        _session_config(config, session_tag="s0"),
        registry=known_ids,
    )
    stream_specs = [spec for spec, _ in stream_pairs]
    stream_truth = [label for _, label in stream_pairs]

    files: list[Path] = []

    def checkpoint_after_update(s) -> None:
        path = out / f"checkpoint_update_{len(s.discovery_records)}.owck"
        save_checkpoint(
            path,
            s.train_state,
            s.stats,
            extra={"registry": {str(k): v for k, v in s.registry.items()}},
        )
        files.append(path)

    decisions, session = process_stream(
        session, stream_specs, on_update=checkpoint_after_update
    )
    log_path = out / "session_log.jsonl"
    log_path.write_text(
        "\n".join(json.dumps(event, sort_keys=True) for event in session.log)
        + ("\n" if session.log else "")
    )
    files.append(log_path)

    novel_label_by_id: dict[int, str] = {}
    for n, record in enumerate(session.discovery_records):
        buffer_path = out / f"unknown_buffer_{n}.npy"
        np.save(buffer_path, record.embeddings)
        files.append(buffer_path)
        report_path = out / f"cluster_report_{n}.json"
        write_report_json(record.report, report_path)
        files.append(report_path)
        csv_path = out / f"cluster_report_{n}.csv"
        write_score_csv(record.report, csv_path)
        files.append(csv_path)
        for cid, cluster in zip(record.new_class_ids, record.report.accepted_clusters):
            member_truth = [
                stream_truth[record.arrivals[i]] for i in cluster.member_indices
            ]
            majority = ev.majority_label(member_truth)
            if majority is not None:
                novel_label_by_id[cid] = majority

    updated_path = out / UPDATED_CHECKPOINT_NAME
    save_checkpoint(
        updated_path,
        session.train_state,
        session.stats,
        extra={"registry": {str(k): v for k, v in session.registry.items()}},
    )
    files.append(updated_path)

    summary = {
        "processed": len(decisions),
        "rejected": sum(1 for d in decisions if not d.accepted),
        "discovery_triggers": len(session.discovery_records),
        "new_classes": sorted(
            cid for r in session.discovery_records for cid in r.new_class_ids
        ),
        "notes": [] if session.discovery_records else ["no discovery triggered"],
    }
    summary_path = out / "session_summary.json"
    summary_path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    files.append(summary_path)

    eval_pairs = load_split(config, data_dir, KNOWN_EVAL_MANIFEST)
    unknown_eval = Path(data_dir) / UNKNOWN_EVAL_MANIFEST
    if unknown_eval.exists():
        eval_pairs += load_split(config, data_dir, UNKNOWN_EVAL_MANIFEST)
    report, eval_files = _score_pairs(
        session.train_state,
        session.stats,
        eval_pairs,
        known_ids,
        novel_label_by_id,
        out,
        clustering=tuple(
            f"cluster_report_{n}.json"
            for n in range(len(session.discovery_records))
        ),
    )
    files.extend(eval_files)
    _write_run_manifest(out, files)
    log.info(
        "stream: %d samples, %d discovery pass(es), acc_old=%.1f%% acc_new=%.1f%%",
        len(decisions),
        len(session.discovery_records),
        report.acc_old,
        report.acc_new,
    )
    if not session.discovery_records:
        log.info("no discovery triggered")
    return report


# ---------------------------------------------------------------------------
# discover


def cmd_discover(
    config: PipelineConfig, embeddings_path: str | Path, out_dir: str | Path
):
    """Cluster a saved unknown buffer; reproduces the in-session report when
    run with the same config and root seed."""
    out = _prepare_out(out_dir)
    embeddings_path = Path(embeddings_path)
    if not embeddings_path.exists():
        raise MissingArtifactError(f"embeddings file not found: {embeddings_path}")
    z = np.load(embeddings_path)
    cfg = dataclasses.replace(
        config.discovery, seed=derive_seed(config.root_seed, "discovery")
    )
    report = discover(z, cfg)
    write_report_json(report, out / "cluster_report.json")
    write_score_csv(report, out / "cluster_report.csv")
    _write_run_manifest(out, [out / "cluster_report.json", out / "cluster_report.csv"])
    log.info("discover: k_star=%d (%s)", report.k_star, report.selection_rule)
    return report
