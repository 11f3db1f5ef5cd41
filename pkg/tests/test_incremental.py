from __future__ import annotations

import copy
import math

import numpy as np
import pytest

from owrf.discovery import DiscoveryConfig
from owrf.embedding import EncoderConfig, LossConfig, encode, init_train_state, train
from owrf.errors import BudgetExceededError, ConfigurationError
from owrf.incremental import (
    BufferEntry,
    Exemplar,
    ReplayMemory,
    SessionConfig,
    UpdateSet,
    assemble_update_set,
    incremental_update,
    init_session,
    process_stream,
    select_exemplars,
)
from owrf.openset import UNKNOWN, fit_class_stats
from owrf.signal import Spectrogram, generate_burst, stft_spectrogram

from conftest import (
    SMALL_DURATION,
    SMALL_FFT,
    SMALL_FS,
    SMALL_HOP,
    SMALL_SHAPE,
    make_small_dataset,
    small_profile,
)

KNOWN_PROFILES = [
    small_profile("k0", 2000.0),
    small_profile("k1", 5000.0),
    small_profile("k2", 7000.0, am_depth=0.6),
]
# plain signatures: chipped bandwidth adds per-record symbol variety that can
# fragment a novel class into sub-clusters, which is its own test elsewhere
NOVEL_PROFILES = [
    small_profile("n0", 4000.0),
    small_profile("n1", 0.0, am_depth=0.5),
]


def novel_stream(count, seed_base=50_000, classes=(0, 1)):
    """Interleaved stream of the novel classes; returns (spectrograms, truth)."""
    specs, truth = [], []
    for i in range(count):
        which = classes[i % len(classes)]
        record = generate_burst(
            NOVEL_PROFILES[which], SMALL_DURATION, 25.0, seed=seed_base + i,
            sample_rate=SMALL_FS,
        )
        specs.append(stft_spectrogram(record, SMALL_FFT, SMALL_HOP, "hann"))
        truth.append(f"n{which}")
    return specs, truth


def known_stream(count, seed_base=90_000):
    out = []
    for i in range(count):
        profile = KNOWN_PROFILES[i % len(KNOWN_PROFILES)]
        record = generate_burst(
            profile, SMALL_DURATION, 25.0, seed=seed_base + i, sample_rate=SMALL_FS
        )
        out.append(
            (stft_spectrogram(record, SMALL_FFT, SMALL_HOP, "hann"),
             i % len(KNOWN_PROFILES))
        )
    return out


@pytest.fixture(scope="module")
def base_model():
    # mixed-SNR training keeps the gates honest at the 25 dB test point
    data = make_small_dataset(KNOWN_PROFILES, per_class=60, snr_db=(15.0, 25.0))
    config = EncoderConfig(
        input_dims=SMALL_SHAPE, hidden_widths=(24, 16), embed_dim=8,
        activation="relu", seed=5,
    )
    state = init_train_state(config, [0, 1, 2])
    state, _ = train(
        state, data, LossConfig(), lr=2e-3, batch_size=32, epochs=60,
        warmup_epochs=3,
    )
    by_class = {}
    for spec, cid in data:
        by_class.setdefault(cid, []).append(spec.values.reshape(-1))
    from owrf.embedding import encode_matrix

    embeddings = {
        cid: encode_matrix(state, np.stack(vs)) for cid, vs in by_class.items()
    }
    stats = fit_class_stats(embeddings, shrinkage=0.1)
    return state, stats, data


def session_config(**kwargs) -> SessionConfig:
    defaults = dict(
        n_min=24,
        old_max=5,
        new_max=40,
        memory_capacity=60,
        step_cap=4000.0,
        finetune_epochs=15,
        finetune_lr=1e-3,
        batch_size=16,
        shrinkage=0.1,
        loss=LossConfig(),
        discovery=DiscoveryConfig(
            k_max=4, purity_threshold=0.8, min_cluster_size=8,
            max_cluster_size=500, seed=9, kmeans_restarts=4,
        ),
    )
    defaults.update(kwargs)
    return SessionConfig(**defaults)


def fresh_session(base_model, **kwargs):
    state, stats, data = base_model
    return init_session(
        copy.deepcopy(state), dict(stats), data, session_config(**kwargs)
    )


# ---------------------------------------------------------------------------
# select_exemplars


def exemplar(vec, arrival):
    spec = Spectrogram(np.zeros(SMALL_SHAPE), SMALL_HOP, SMALL_FFT, "hann")
    return Exemplar(spec=spec, embedding=np.asarray(vec, float), arrival=arrival)


def test_cap_larger_than_class_keeps_everything():
    samples = [exemplar([float(i), 0.0], i) for i in range(4)]
    assert len(select_exemplars(samples, 10)) == 4


def test_cap_one_matches_exhaustive_nearest_scan(rng):
    for trial in range(5):
        samples = [
            exemplar(rng.normal(size=3), arrival=i) for i in range(11)
        ]
        mean = np.mean([s.embedding for s in samples], axis=0)
        exhaustive = min(
            samples, key=lambda s: (float(np.linalg.norm(s.embedding - mean)), s.arrival)
        )
        chosen = select_exemplars(samples, 1)
        assert len(chosen) == 1
        assert chosen[0].arrival == exhaustive.arrival


def test_cap_zero_and_tie_break():
    assert select_exemplars([exemplar([1.0], 0)], 0) == []
    # two samples equidistant from the mean: earliest arrival wins
    samples = [exemplar([1.0, 0.0], 7), exemplar([-1.0, 0.0], 3)]
    chosen = select_exemplars(samples, 1)
    assert chosen[0].arrival == 3


# ---------------------------------------------------------------------------
# assemble_update_set


def buffer_cluster(n, offset=0.0, start=0):
    spec = Spectrogram(np.zeros(SMALL_SHAPE), SMALL_HOP, SMALL_FFT, "hann")
    return [
        BufferEntry(embedding=np.array([offset + 0.01 * i, 1.0]), spec=spec,
                    arrival=start + i)
        for i in range(n)
    ]


def memory_with(n_classes, per_class, cap=100):
    memory = ReplayMemory(capacity=cap * n_classes, per_class_cap=per_class)
    for cid in range(n_classes):
        memory.exemplars[cid] = [
            exemplar([float(cid), float(i)], arrival=i) for i in range(per_class)
        ]
    return memory


def test_old_max_zero_excludes_every_old_sample():
    memory = memory_with(3, per_class=5)
    update = assemble_update_set(
        [buffer_cluster(10)], memory, old_max=0, new_max=60, id_start=3
    )
    assert update.new_class_ids == (3,)
    assert all(cid == 3 for _, cid in update.items)
    assert len(update.items) == 10


def test_replay_counts_with_many_classes_and_caps():
    # 18 old classes with 5 exemplars each plus 6 clusters capped at 60
    memory = memory_with(18, per_class=5)
    clusters = [buffer_cluster(80, offset=j, start=100 * j) for j in range(6)]
    update = assemble_update_set(clusters, memory, old_max=5, new_max=60,
                                 id_start=18)
    assert len(update.items) == 18 * 5 + 6 * 60 == 450
    new_counts = [update.counts[cid] for cid in update.new_class_ids]
    assert new_counts == [60] * 6


def test_non_binding_new_cap_keeps_whole_cluster():
    memory = memory_with(2, per_class=3)
    update = assemble_update_set(
        [buffer_cluster(40)], memory, old_max=3, new_max=60, id_start=2
    )
    assert update.counts[2] == 40


def test_update_set_interleaves_classes():
    memory = memory_with(2, per_class=2)
    update = assemble_update_set(
        [buffer_cluster(2)], memory, old_max=2, new_max=2, id_start=2
    )
    first_three = [cid for _, cid in update.items[:3]]
    assert first_three == [0, 1, 2]  # round-robin across class ids


def test_assemble_requires_clusters():
    with pytest.raises(ConfigurationError):
        assemble_update_set([], memory_with(1, 1), 1, 1, id_start=5)


# ---------------------------------------------------------------------------
# replay memory bounds


def test_memory_bounds_are_enforced():
    memory = ReplayMemory(capacity=3, per_class_cap=2)
    memory.exemplars[0] = [exemplar([0.0], i) for i in range(2)]
    memory.exemplars[1] = [exemplar([1.0], i) for i in range(2)]
    with pytest.raises(Exception):
        memory.check_bounds()  # 4 > capacity 3


# ---------------------------------------------------------------------------
# sessions


def test_known_only_stream_never_triggers_discovery(base_model):
    # a three-sigma gate occasionally rejects a legitimate sample, so the
    # contract is: no discovery fires and classification stays >= 95%
    session = fresh_session(base_model)
    stream = known_stream(60)
    decisions, session = process_stream(session, [s for s, _ in stream])
    assert session.discovery_records == []
    assert len(session.buffer) < session.config.n_min
    correct = np.mean(
        [d.predicted == cid for d, (_, cid) in zip(decisions, stream)]
    )
    assert correct >= 0.95


def test_exact_trigger_count_fires_once_and_clears(base_model):
    session = fresh_session(base_model, n_min=24)
    stream, _ = novel_stream(24)
    decisions, session = process_stream(session, stream, flush=False)
    rejected = sum(1 for d in decisions if d.predicted == UNKNOWN)
    assert rejected == 24  # novel signatures are far outside every gate
    assert len(session.discovery_records) == 1
    assert len(session.buffer) == 0


def test_infinite_n_min_disables_discovery(base_model):
    session = fresh_session(base_model, n_min=math.inf)
    before_params = session.train_state.params.copy()
    before_stats = {k: v.tau for k, v in session.stats.items()}
    stream, _ = novel_stream(40)
    decisions, session = process_stream(session, stream)
    assert session.discovery_records == []
    assert np.array_equal(session.train_state.params, before_params)
    assert {k: v.tau for k, v in session.stats.items()} == before_stats
    assert len(session.log) > 0


def test_session_discovers_and_assimilates_novel_classes(base_model):
    session = fresh_session(base_model, n_min=40)
    stream, truth = novel_stream(56)
    decisions, session = process_stream(session, stream, flush=False)
    assert len(session.discovery_records) == 1
    record = session.discovery_records[0]
    assert len(record.new_class_ids) == 2  # both novel signatures found
    for new_id in record.new_class_ids:
        assert session.registry[new_id].startswith("novel-")
        assert new_id in session.stats
        assert new_id in session.train_state.class_ids

    # memory bounds hold after the update
    session.memory.check_bounds()
    assert all(
        len(items) <= session.config.old_max
        for items in session.memory.exemplars.values()
    )

    # post-update novel samples are claimed by the new gates, and each truth
    # class funnels into a single discovered id
    tail, tail_truth = novel_stream(40, seed_base=77_000)
    tail_decisions, session = process_stream(session, tail, flush=False)
    new_ids = set(record.new_class_ids)
    claimed = np.mean([d.predicted in new_ids for d in tail_decisions])
    assert claimed >= 0.8
    for label in ("n0", "n1"):
        preds = [
            d.predicted
            for d, t in zip(tail_decisions, tail_truth)
            if t == label and d.predicted in new_ids
        ]
        assert preds and len(set(preds)) == 1

    # old classes survive the update
    check = known_stream(30, seed_base=91_000)
    check_decisions, _ = process_stream(session, [s for s, _ in check], flush=False)
    still_correct = np.mean(
        [d.predicted == cid for d, (_, cid) in zip(check_decisions, check)]
    )
    assert still_correct >= 0.9


def test_no_accepted_clusters_is_noop_with_logs(base_model):
    # impossible purity threshold: discovery runs but accepts nothing
    session = fresh_session(
        base_model,
        n_min=24,
        discovery=DiscoveryConfig(
            k_max=3, purity_threshold=1.0, min_cluster_size=1000,
            max_cluster_size=2000, seed=9,
        ),
    )
    before = session.train_state.params.copy()
    stream, _ = novel_stream(24)
    _, session = process_stream(session, stream, flush=False)
    assert len(session.discovery_records) == 1
    assert session.discovery_records[0].new_class_ids == ()
    assert np.array_equal(session.train_state.params, before)
    assert len(session.buffer) == 0  # buffer cleared even without acceptance


def test_update_with_zero_new_classes_is_noop(base_model):
    session = fresh_session(base_model)
    before_taus = {k: v.tau for k, v in session.stats.items()}
    empty = UpdateSet(items=(), new_class_ids=(), new_members={}, refit_pools={}, counts={})
    session = incremental_update(session, empty)
    after_taus = {k: v.tau for k, v in session.stats.items()}
    for cid in before_taus:
        assert abs(before_taus[cid] - after_taus[cid]) <= 1e-6
    assert session.log[-1]["event"] == "update-skipped"


def test_step_budget_violation_aborts(base_model):
    session = fresh_session(base_model, n_min=24, step_cap=3.0)
    stream, _ = novel_stream(24)
    with pytest.raises(BudgetExceededError):
        process_stream(session, stream, flush=False)


def test_sessions_are_deterministic(base_model):
    logs = []
    for _ in range(2):
        session = fresh_session(base_model, n_min=40)
        stream, _ = novel_stream(56)
        _, session = process_stream(session, stream)
        logs.append(session.log)
    assert logs[0] == logs[1]


def test_flush_runs_discovery_on_leftovers(base_model):
    session = fresh_session(base_model, n_min=1000)
    # leftovers >= 2 * min_cluster_size (16) but < n_min -> flush fires
    stream, _ = novel_stream(30)
    _, session = process_stream(session, stream, flush=True)
    assert len(session.discovery_records) == 1
    assert session.log[-2]["event"] in ("discovery", "update")


def test_registry_only_grows_and_ids_never_reused(base_model):
    session = fresh_session(base_model, n_min=28)
    registry_before = dict(session.registry)
    stream, _ = novel_stream(60)
    _, session = process_stream(session, stream, flush=False)
    for cid, name in registry_before.items():
        assert session.registry[cid] == name
    assert len(session.registry) >= len(registry_before)
    assert session.next_class_id == max(session.train_state.class_ids) + 1


def test_stream_errors_carry_position(base_model):
    session = fresh_session(base_model)
    stream, _ = novel_stream(3)
    bad = Spectrogram(np.zeros((4, 5)), 8, 8, "hann")  # wrong input shape
    with pytest.raises(ConfigurationError, match="stream position 2"):
        process_stream(session, stream[:2] + [bad], flush=False)
