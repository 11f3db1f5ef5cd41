"""Streaming sessions: gate each sample, buffer rejections, discover novel
classes once enough unknowns accumulate, then assimilate them with a
replay-bounded fine-tune and refreshed class statistics.

A session is strictly sequential; independent sessions can run concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import embedding as emb
from .discovery import DiscoveryConfig, ClusterReport, discover
from .errors import ConfigurationError, OwrfError
from .openset import ClassStatistics, OpenSetDecision, _build_stats, decide, fit_class_stats
from .signal import Spectrogram


@dataclass(frozen=True)
class Exemplar:
    """A retained sample: raw spectrogram plus its embedding at storage time.

    Spectrograms are kept so statistics can be refit under a moved encoder.
    """

    spec: Spectrogram
    embedding: np.ndarray
    arrival: int


@dataclass
class ReplayMemory:
    """Capacity-bounded exemplar store with a per-class cap."""

    capacity: int                 # total across classes
    per_class_cap: int
    exemplars: dict[int, list[Exemplar]] = field(default_factory=dict)

    def total(self) -> int:
        return sum(len(v) for v in self.exemplars.values())

    def check_bounds(self) -> None:
        if self.total() > self.capacity:
            raise OwrfError(
                f"replay memory holds {self.total()} > capacity {self.capacity}"
            )
        for cid, items in self.exemplars.items():
            if len(items) > self.per_class_cap:
                raise OwrfError(
                    f"class {cid} holds {len(items)} > per-class cap "
                    f"{self.per_class_cap}"
                )


@dataclass
class BufferEntry:
    embedding: np.ndarray
    spec: Spectrogram
    arrival: int


@dataclass
class UnknownBuffer:
    trigger: float                # n_min; math.inf disables discovery
    entries: list[BufferEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class SessionConfig:
    n_min: float = 100.0
    old_max: int = 5
    new_max: int = 60
    memory_capacity: int = 1000
    step_cap: float = 10_000.0    # optimizer steps allowed per update
    finetune_epochs: int = 30
    finetune_lr: float = 1e-4
    batch_size: int = 64
    plateau_tol: float = 1e-4
    plateau_epochs: int = 5
    shrinkage: float = 0.1
    # Old-class pools of at least this size get a full covariance refit;
    # 0 (default) disables that: retained exemplars are herded (nearest the
    # mean), so their sample covariance is selection-biased and small-n,
    # and the drift-corrected carry-forward is sounder.
    min_refit_samples: int = 0
    loss: emb.LossConfig = field(default_factory=emb.LossConfig)
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
    session_tag: str = "s0"

    def __post_init__(self) -> None:
        if self.old_max < 0 or self.new_max < 1:
            raise ConfigurationError("need old_max >= 0 and new_max >= 1")
        if self.memory_capacity < 0:
            raise ConfigurationError("memory_capacity must be >= 0")
        if not (self.n_min >= 1):
            raise ConfigurationError("n_min must be >= 1 (math.inf disables)")


@dataclass(frozen=True)
class DiscoveryRecord:
    """Everything one discovery trigger saw and produced."""

    embeddings: np.ndarray            # buffered embeddings, in arrival order
    arrivals: tuple[int, ...]
    report: ClusterReport
    new_class_ids: tuple[int, ...]    # ids actually registered (may be empty)


@dataclass
class SessionState:
    train_state: emb.TrainState
    stats: dict[int, ClassStatistics]
    memory: ReplayMemory
    buffer: UnknownBuffer
    registry: dict[int, str]          # class id -> provenance
    config: SessionConfig
    log: list[dict] = field(default_factory=list)
    discovery_records: list[DiscoveryRecord] = field(default_factory=list)
    seq: int = 0
    next_class_id: int = 0
    stream_position: int = 0

    def emit(self, event: str, **payload: object) -> None:
        self.seq += 1
        self.log.append({"seq": self.seq, "event": event, **payload})


@dataclass(frozen=True)
class UpdateSet:
    """Mixed replay + novel training set, interleaved for balanced batches.

    ``new_members`` holds the capped training selection per new class;
    ``refit_pools`` holds every accepted-cluster member, used for the
    post-update statistics fit (more samples make a sounder gate and the
    bound applies to retained memory, not to in-hand buffer data).
    """

    items: tuple[tuple[Spectrogram, int], ...]
    new_class_ids: tuple[int, ...]
    new_members: dict[int, tuple[BufferEntry, ...]]
    refit_pools: dict[int, tuple[BufferEntry, ...]]
    counts: dict[int, int]


def select_exemplars(samples: Sequence[Exemplar], cap: int) -> list[Exemplar]:
    """The ``cap`` samples nearest their class mean; ties break on arrival."""
    if cap < 0:
        raise ConfigurationError("cap must be >= 0")
    if cap == 0 or not samples:
        return []
    mean = np.mean([s.embedding for s in samples], axis=0)
    ranked = sorted(
        samples,
        key=lambda s: (float(np.linalg.norm(s.embedding - mean)), s.arrival),
    )
    return ranked[:cap]


def _trim_to_capacity(memory: ReplayMemory) -> None:
    # Drop the worst-ranked exemplar from the largest class until under cap;
    # lists are kept in nearest-to-mean order so the tail is the worst.
    while memory.total() > memory.capacity:
        victim = min(
            (cid for cid, items in memory.exemplars.items() if items),
            key=lambda cid: (-len(memory.exemplars[cid]), cid),
        )
        memory.exemplars[victim].pop()


def init_session(
    train_state: emb.TrainState,
    stats: dict[int, ClassStatistics],
    train_data: Sequence[tuple[Spectrogram, int]],
    config: SessionConfig,
    registry: dict[int, str] | None = None,
) -> SessionState:
    """Start a session from a trained base model.

    ``train_data`` provides the pool from which old-class exemplars are
    selected (nearest to each class's embedding mean, capped per class and by
    total capacity).
    """
    if set(stats) != set(train_state.class_ids):
        raise ConfigurationError("statistics do not cover the model's class set")
    memory = ReplayMemory(
        capacity=config.memory_capacity, per_class_cap=config.old_max
    )
    by_class: dict[int, list[Exemplar]] = {cid: [] for cid in train_state.class_ids}
    if train_data:
        vectors = np.stack(
            [
                emb.spectrogram_to_vec(train_state.config, spec)
                for spec, _ in train_data
            ]
        )
        embeddings = emb.encode_matrix(train_state, vectors)
        for arrival, (spec, cid) in enumerate(train_data):
            if cid not in by_class:
                raise ConfigurationError(f"training sample for unknown class {cid}")
            by_class[cid].append(
                Exemplar(spec=spec, embedding=embeddings[arrival], arrival=arrival)
            )
    for cid in sorted(by_class):
        memory.exemplars[cid] = select_exemplars(by_class[cid], config.old_max)
    _trim_to_capacity(memory)
    memory.check_bounds()
    state = SessionState(
        train_state=train_state,
        stats=dict(stats),
        memory=memory,
        buffer=UnknownBuffer(trigger=config.n_min),
        registry=dict(registry or {cid: str(cid) for cid in train_state.class_ids}),
        config=config,
        next_class_id=max(train_state.class_ids) + 1,
    )
    state.emit(
        "session-start",
        classes=sorted(train_state.class_ids),
        memory_total=memory.total(),
    )
    return state


def assemble_update_set(
    new_clusters: Sequence[Sequence[BufferEntry]],
    memory: ReplayMemory,
    old_max: int,
    new_max: int,
    id_start: int,
) -> UpdateSet:
    """Mixed training set: fresh ids for the clusters, per-class caps applied.

    Each new cluster contributes at most ``new_max`` members (nearest its
    embedding mean), each old class at most ``old_max`` exemplars from
    memory. Items are interleaved round-robin across classes so mini-batches
    stay balanced; the order is deterministic.
    """
    if not new_clusters:
        raise ConfigurationError("no accepted clusters to assemble")
    per_class: dict[int, list[Spectrogram]] = {}
    new_members: dict[int, tuple[BufferEntry, ...]] = {}
    refit_pools: dict[int, tuple[BufferEntry, ...]] = {}
    new_ids = []
    for j, members in enumerate(new_clusters):
        cid = id_start + j
        new_ids.append(cid)
        refit_pools[cid] = tuple(members)
        as_exemplars = [
            Exemplar(spec=m.spec, embedding=m.embedding, arrival=m.arrival)
            for m in members
        ]
        kept = select_exemplars(as_exemplars, min(new_max, len(as_exemplars)))
        kept_arrivals = {e.arrival for e in kept}
        chosen = tuple(m for m in members if m.arrival in kept_arrivals)
        new_members[cid] = chosen
        per_class[cid] = [m.spec for m in chosen]
    for cid in sorted(memory.exemplars):
        kept = memory.exemplars[cid][:old_max]
        if kept:
            per_class[cid] = [e.spec for e in kept]

    items: list[tuple[Spectrogram, int]] = []
    queues = {cid: list(specs) for cid, specs in sorted(per_class.items())}
    while queues:
        for cid in sorted(queues):
            items.append((queues[cid].pop(0), cid))
            if not queues[cid]:
                del queues[cid]
    return UpdateSet(
        items=tuple(items),
        new_class_ids=tuple(new_ids),
        new_members=new_members,
        refit_pools=refit_pools,
        counts={cid: len(v) for cid, v in sorted(per_class.items())},
    )


def _refit_statistics(
    state: SessionState, update_set: UpdateSet
) -> dict[int, ClassStatistics]:
    """Recompute per-class gates under the updated encoder.

    New classes get a full fit from their accepted-cluster members. Old
    classes keep their previous covariance and threshold with the mean
    translated by the retained exemplars' embedding drift (the exemplars are
    herded toward the class mean, so a full covariance refit from them would
    be selection-biased; ``min_refit_samples > 0`` opts into one for pools at
    least that large). A class with nothing retained keeps its previous
    statistics verbatim, stale under the moved encoder.
    """
    cfg = state.config
    pools: dict[int, list[Exemplar]] = {}
    for cid, members in update_set.refit_pools.items():
        pools[cid] = [Exemplar(m.spec, m.embedding, m.arrival) for m in members]
    for cid, items in state.memory.exemplars.items():
        pools.setdefault(cid, list(items))

    new_stats: dict[int, ClassStatistics] = {}
    for cid in sorted(state.train_state.class_ids):
        pool = pools.get(cid, [])
        prev = state.stats.get(cid)
        if not pool:
            if prev is None:
                raise ConfigurationError(f"class {cid} has no samples and no stats")
            new_stats[cid] = prev  # nothing retained: stale gate, forgetting risk
            continue
        fresh = emb.encode_matrix(
            state.train_state,
            np.stack(
                [emb.spectrogram_to_vec(state.train_state.config, e.spec) for e in pool]
            ),
        )
        full_refit = prev is None or (
            cfg.min_refit_samples > 0 and len(pool) >= cfg.min_refit_samples
        )
        if full_refit:
            fitted = fit_class_stats({cid: fresh}, cfg.shrinkage)
            new_stats[cid] = fitted[cid]
        else:
            stored = np.stack([e.embedding for e in pool])
            drift = fresh.mean(axis=0) - stored.mean(axis=0)
            new_stats[cid] = _build_stats(
                cid, prev.mu + drift, prev.sigma, prev.tau, prev.n_samples
            )
    return new_stats


def _refresh_memory(state: SessionState, update_set: UpdateSet) -> None:
    cfg = state.config
    memory = state.memory
    for cid in sorted(state.train_state.class_ids):
        if cid in update_set.refit_pools:
            pool = [
                Exemplar(m.spec, m.embedding, m.arrival)
                for m in update_set.refit_pools[cid]
            ]
        elif cid in memory.exemplars:
            pool = memory.exemplars[cid]
        else:
            continue
        refreshed = [
            Exemplar(
                spec=e.spec,
                embedding=emb.encode(state.train_state, e.spec),
                arrival=e.arrival,
            )
            for e in pool
        ]
        memory.exemplars[cid] = select_exemplars(refreshed, cfg.old_max)
    _trim_to_capacity(memory)
    memory.check_bounds()


def incremental_update(state: SessionState, update_set: UpdateSet) -> SessionState:
    """Grow the model over the new classes, fine-tune on the mixed set under
    the step budget, refit statistics, and refresh replay memory."""
    cfg = state.config
    if not update_set.new_class_ids:
        state.emit("update-skipped", reason="no new classes")
        return state

    center_init = np.stack(
        [
            np.mean([m.embedding for m in update_set.new_members[cid]], axis=0)
            for cid in update_set.new_class_ids
        ]
    )
    grown = emb.grow_head(
        state.train_state, update_set.new_class_ids, initial_centers=center_init
    )
    budget = emb.StepBudget(cfg.step_cap)
    tuned, history = emb.train(
        grown,
        list(update_set.items),
        cfg.loss,
        lr=cfg.finetune_lr,
        batch_size=cfg.batch_size,
        epochs=cfg.finetune_epochs,
        warmup_epochs=0,
        plateau_tol=cfg.plateau_tol,
        plateau_epochs=cfg.plateau_epochs,
        step_budget=budget,
    )
    state.train_state = tuned
    state.stats = _refit_statistics(state, update_set)
    _refresh_memory(state, update_set)
    for cid in update_set.new_class_ids:
        state.registry.setdefault(cid, f"novel-{cfg.session_tag}-{cid}")
    state.next_class_id = max(state.train_state.class_ids) + 1
    state.emit(
        "update",
        new_class_ids=list(update_set.new_class_ids),
        train_counts={str(k): v for k, v in update_set.counts.items()},
        steps=budget.used,
        epochs=len(history),
        final_loss=history[-1]["loss"] if history else None,
        memory_total=state.memory.total(),
    )
    return state


def _run_discovery(state: SessionState, trigger: str, on_update=None) -> None:
    cfg = state.config
    entries = list(state.buffer.entries)
    z = np.stack([e.embedding for e in entries])
    report = discover(z, cfg.discovery)
    state.emit(
        "discovery",
        trigger=trigger,
        buffered=len(entries),
        k_elbow=report.k_elbow,
        k_score=report.k_score,
        k_star=report.k_star,
        rule=report.selection_rule,
        model=report.chosen_model,
        accepted=len(report.accepted_clusters),
        warnings=list(report.warnings),
    )
    new_ids: tuple[int, ...] = ()
    if report.accepted_clusters:
        clusters = [
            [entries[i] for i in cluster.member_indices]
            for cluster in report.accepted_clusters
        ]
        update_set = assemble_update_set(
            clusters, state.memory, cfg.old_max, cfg.new_max, state.next_class_id
        )
        incremental_update(state, update_set)
        new_ids = update_set.new_class_ids
        if on_update is not None:
            on_update(state)
    state.discovery_records.append(
        DiscoveryRecord(
            embeddings=z,
            arrivals=tuple(e.arrival for e in entries),
            report=report,
            new_class_ids=new_ids,
        )
    )
    state.buffer.entries.clear()


def process_stream(
    state: SessionState,
    stream: Sequence[Spectrogram],
    *,
    flush: bool = True,
    on_update=None,
) -> tuple[list[OpenSetDecision], SessionState]:
    """Gate every sample in order; trigger discovery whenever the unknown
    buffer reaches n_min.

    With ``flush`` (default), a final discovery pass runs at stream end if
    the leftover buffer holds at least two minimum-size clusters' worth of
    samples. An infinite n_min disables discovery entirely. ``on_update`` is
    called with the session state right after each completed model update
    (checkpointing hook). Errors are re-raised with the stream position
    attached.
    """
    decisions: list[OpenSetDecision] = []
    discovery_enabled = math.isfinite(state.buffer.trigger)
    for spec in stream:
        position = state.stream_position
        try:
            z = emb.encode(state.train_state, spec)
            decision = decide(z, state.stats)
        except OwrfError as exc:
            raise type(exc)(f"stream position {position}: {exc}") from exc
        decisions.append(decision)
        state.emit(
            "decision",
            index=position,
            predicted=decision.predicted,
            accepted=decision.accepted,
            min_distance=min(decision.distances.values()),
        )
        if not decision.accepted:
            state.buffer.entries.append(
                BufferEntry(embedding=z, spec=spec, arrival=position)
            )
        state.stream_position += 1
        if discovery_enabled and len(state.buffer) >= state.buffer.trigger:
            _run_discovery(state, trigger="n_min", on_update=on_update)
    if (
        flush
        and discovery_enabled
        and 2 * state.config.discovery.min_cluster_size
        <= len(state.buffer)
        < state.buffer.trigger
    ):
        _run_discovery(state, trigger="flush", on_update=on_update)
    state.emit("stream-end", processed=len(decisions), buffered=len(state.buffer))
    return decisions, state
