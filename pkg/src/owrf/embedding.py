"""Metric-embedding encoder: flatten + MLP trained with a composite loss.

The loss combines three terms: squared distance of each embedding to its
class center (compactness), a hinge on pairwise center distances below a
margin (separation), and cross-entropy from a linear classifier head.
Gradients are computed analytically by backpropagation; parameters, head and
class centers all live in one flat vector updated by Adam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BudgetExceededError,
    ConfigurationError,
    DimensionMismatchError,
    NumericalError,
    UnknownLabelError,
)
from .seeding import derive_seed
from .signal import Spectrogram

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class EncoderConfig:
    input_dims: tuple[int, int]               # (n_frames, n_bins)
    hidden_widths: tuple[int, ...] = (256, 128)
    embed_dim: int = 64
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.embed_dim < 2:
            raise ConfigurationError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if len(self.hidden_widths) == 0:
            raise ConfigurationError("hidden_widths must be non-empty")
        if any(w < 1 for w in self.hidden_widths):
            raise ConfigurationError(f"invalid hidden widths {self.hidden_widths}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(
                f"unknown activation {self.activation!r}; supported: {_ACTIVATIONS}"
            )

    @property
    def input_size(self) -> int:
        return self.input_dims[0] * self.input_dims[1]


@dataclass(frozen=True)
class LossConfig:
    eta_center: float = 0.5
    eta_separation: float = 0.3
    eta_cross_entropy: float = 0.2
    margin: float = 1.0

    def __post_init__(self) -> None:
        if min(self.eta_center, self.eta_separation, self.eta_cross_entropy) < 0:
            raise ConfigurationError("loss weights must be >= 0")


class _Layout:
    """Offsets of every parameter block inside the flat vector.

    Order: encoder layers (W, b) ending with the linear embed layer, then the
    classifier head (W, b), then class centers as one (C, D) block.
    """

    def __init__(self, config: EncoderConfig, n_classes: int):
        dims = [config.input_size, *config.hidden_widths, config.embed_dim]
        self.n_classes = n_classes
        self.blocks: list[tuple[str, tuple[int, ...]]] = []
        for i in range(len(dims) - 1):
            self.blocks.append((f"W{i}", (dims[i + 1], dims[i])))
            self.blocks.append((f"b{i}", (dims[i + 1],)))
        self.blocks.append(("W_head", (n_classes, config.embed_dim)))
        self.blocks.append(("b_head", (n_classes,)))
        self.blocks.append(("centers", (n_classes, config.embed_dim)))
        self.offsets: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        pos = 0
        for name, shape in self.blocks:
            size = int(np.prod(shape))
            self.offsets[name] = (pos, pos + size, shape)
            pos += size
        self.total = pos
        self.n_layers = len(dims) - 1

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {
            name: flat[a:b].reshape(shape)
            for name, (a, b, shape) in self.offsets.items()
        }


@dataclass
class TrainState:
    """Snapshot of encoder + head + centers plus Adam accumulators.

    Treated as immutable by convention: update functions return new states.
    """

    config: EncoderConfig
    class_ids: tuple[int, ...]
    params: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step_count: int = 0
    epoch_count: int = 0

    @property
    def layout(self) -> _Layout:
        return _Layout(self.config, len(self.class_ids))

    @property
    def class_centers(self) -> np.ndarray:
        return self.layout.views(self.params)["centers"]

    def class_index(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise UnknownLabelError(f"class id {class_id} not in model") from None

    def copy(self) -> "TrainState":
        return TrainState(
            config=self.config,
            class_ids=self.class_ids,
            params=self.params.copy(),
            adam_m=self.adam_m.copy(),
            adam_v=self.adam_v.copy(),
            step_count=self.step_count,
            epoch_count=self.epoch_count,
        )


def init_train_state(config: EncoderConfig, class_ids: Sequence[int]) -> TrainState:
    """Seeded init: weights uniform ±1/sqrt(fan_in), biases and centers zero."""
    class_ids = tuple(int(c) for c in class_ids)
    if len(set(class_ids)) != len(class_ids):
        raise ConfigurationError("duplicate class ids")
    layout = _Layout(config, len(class_ids))
    params = np.zeros(layout.total, dtype=np.float64)
    views = layout.views(params)
    rng = np.random.default_rng(derive_seed(config.seed, "init"))
    for name, (_, _, shape) in layout.offsets.items():
        if name.startswith("W"):
            bound = 1.0 / math.sqrt(shape[1])
            views[name][...] = rng.uniform(-bound, bound, size=shape)
    return TrainState(
        config=config,
        class_ids=class_ids,
        params=params,
        adam_m=np.zeros_like(params),
        adam_v=np.zeros_like(params),
    )


def _act(x: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(x, 0.0) if kind == "relu" else np.tanh(x)


def _act_grad(pre: np.ndarray, post: np.ndarray, kind: str) -> np.ndarray:
    return (pre > 0).astype(np.float64) if kind == "relu" else 1.0 - post**2


def _forward(
    views: dict[str, np.ndarray], config: EncoderConfig, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Returns (embeddings, logits, pre-activations, post-activations)."""
    n_hidden = len(config.hidden_widths)
    pres: list[np.ndarray] = []
    posts: list[np.ndarray] = [x]
    h = x
    for i in range(n_hidden):
        pre = h @ views[f"W{i}"].T + views[f"b{i}"]
        h = _act(pre, config.activation)
        pres.append(pre)
        posts.append(h)
    z = h @ views[f"W{n_hidden}"].T + views[f"b{n_hidden}"]
    logits = z @ views["W_head"].T + views["b_head"]
    return z, logits, pres, posts


def spectrogram_to_vec(config: EncoderConfig, spec: Spectrogram) -> np.ndarray:
    if spec.values.shape != config.input_dims:
        raise DimensionMismatchError(
            f"spectrogram shape {spec.values.shape} != configured {config.input_dims}"
        )
    return spec.values.reshape(-1)


def encode(state: TrainState, spec: Spectrogram) -> np.ndarray:
    """Embed one spectrogram; deterministic for a fixed state."""
    x = spectrogram_to_vec(state.config, spec)[None, :]
    z, _, _, _ = _forward(state.layout.views(state.params), state.config, x)
    return z[0]


def encode_matrix(state: TrainState, x: np.ndarray) -> np.ndarray:
    """Embed a batch of pre-flattened inputs, shape (n, input_size)."""
    if x.ndim != 2 or x.shape[1] != state.config.input_size:
        raise DimensionMismatchError(
            f"batch shape {x.shape} incompatible with input size "
            f"{state.config.input_size}"
        )
    z, _, _, _ = _forward(state.layout.views(state.params), state.config, x)
    return z


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def composite_loss(
    embeddings: np.ndarray,
    logits: np.ndarray,
    labels: np.ndarray,
    centers: np.ndarray,
    cfg: LossConfig,
) -> tuple[float, dict[str, float]]:
    """Weighted sum of compactness, center-separation hinge, and cross-entropy.

    Returns the total and the unweighted per-term breakdown
    ``{"cen": ..., "sep": ..., "ce": ...}``. The separation term averages
    max(0, margin - ||c_a - c_b||)^2 over distinct class pairs present in the
    batch (0 when only one class is present).
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ConfigurationError("empty batch")
    n_classes = centers.shape[0]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise UnknownLabelError(
            f"label outside [0, {n_classes}): {labels.min()}..{labels.max()}"
        )
    diffs = embeddings - centers[labels]
    l_cen = float(np.mean(np.sum(diffs**2, axis=1)))

    present = np.unique(labels)
    hinge_sq = [
        max(0.0, cfg.margin - float(np.linalg.norm(centers[a] - centers[b]))) ** 2
        for a, b in combinations(present.tolist(), 2)
    ]
    l_sep = float(np.mean(hinge_sq)) if hinge_sq else 0.0

    logp = _log_softmax(logits)
    l_ce = float(-np.mean(logp[np.arange(labels.size), labels]))

    total = (
        cfg.eta_center * l_cen
        + cfg.eta_separation * l_sep
        + cfg.eta_cross_entropy * l_ce
    )
    return total, {"cen": l_cen, "sep": l_sep, "ce": l_ce}


def loss_and_grad(
    state: TrainState,
    x: np.ndarray,
    labels: np.ndarray,
    cfg: LossConfig,
) -> tuple[float, dict[str, float], np.ndarray]:
    """Composite loss and its analytic gradient over the full flat vector."""
    config = state.config
    layout = state.layout
    views = layout.views(state.params)
    z, logits, pres, posts = _forward(views, config, x)
    centers = views["centers"]
    total, terms = composite_loss(z, logits, labels, centers, cfg)

    n = labels.size
    grad = np.zeros_like(state.params)
    gviews = layout.views(grad)

    # cross-entropy through the head
    probs = np.exp(_log_softmax(logits))
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= cfg.eta_cross_entropy / n
    gviews["W_head"][...] = dlogits.T @ z
    gviews["b_head"][...] = dlogits.sum(axis=0)
    dz = dlogits @ views["W_head"]

    # compactness: pulls embeddings toward centers and centers toward embeddings
    diffs = z - centers[labels]
    dz += cfg.eta_center * 2.0 / n * diffs
    np.add.at(gviews["centers"], labels, -cfg.eta_center * 2.0 / n * diffs)

    # separation hinge between centers of classes present in the batch
    present = np.unique(labels).tolist()
    pairs = list(combinations(present, 2))
    if pairs:
        for a, b in pairs:
            delta = centers[a] - centers[b]
            dist = float(np.linalg.norm(delta))
            if 0.0 < dist < cfg.margin:
                coeff = (
                    -2.0 * (cfg.margin - dist) / dist * cfg.eta_separation / len(pairs)
                )
                gviews["centers"][a] += coeff * delta
                gviews["centers"][b] -= coeff * delta

    # backprop through the linear embed layer and hidden stack
    n_hidden = len(config.hidden_widths)
    gviews[f"W{n_hidden}"][...] = dz.T @ posts[-1]
    gviews[f"b{n_hidden}"][...] = dz.sum(axis=0)
    dh = dz @ views[f"W{n_hidden}"]
    for i in range(n_hidden - 1, -1, -1):
        dpre = dh * _act_grad(pres[i], posts[i + 1], config.activation)
        gviews[f"W{i}"][...] = dpre.T @ posts[i]
        gviews[f"b{i}"][...] = dpre.sum(axis=0)
        dh = dpre @ views[f"W{i}"]
    return total, terms, grad


def _adam_step(state: TrainState, grad: np.ndarray, lr: float) -> None:
    state.step_count += 1
    state.adam_m *= ADAM_BETA1
    state.adam_m += (1 - ADAM_BETA1) * grad
    state.adam_v *= ADAM_BETA2
    state.adam_v += (1 - ADAM_BETA2) * grad**2
    if lr == 0.0:
        return  # keep parameter bits untouched
    m_hat = state.adam_m / (1 - ADAM_BETA1**state.step_count)
    v_hat = state.adam_v / (1 - ADAM_BETA2**state.step_count)
    state.params -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def _stack_dataset(
    state: TrainState, data: Iterable[tuple[Spectrogram, int]]
) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for spec, class_id in data:
        xs.append(spectrogram_to_vec(state.config, spec))
        ys.append(state.class_index(class_id))
    if not xs:
        raise ConfigurationError("no training data")
    return np.stack(xs), np.asarray(ys, dtype=np.intp)


def train_on_batches(
    state: TrainState,
    batches: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: LossConfig,
    lr: float,
    *,
    step_budget: "StepBudget | None" = None,
) -> tuple[TrainState, list[tuple[float, dict[str, float]]]]:
    """Apply one Adam step per (x, labels) batch, in order.

    The update for a batch depends only on its contents, not on sample order
    within it. Raises NumericalError naming the offending term and batch if a
    loss becomes non-finite.
    """
    new = state.copy()
    history = []
    for i, (x, labels) in enumerate(batches):
        if step_budget is not None:
            step_budget.charge()
        total, terms, grad = loss_and_grad(new, x, labels, cfg)
        if not math.isfinite(total):
            bad = [k for k, v in terms.items() if not math.isfinite(v)]
            raise NumericalError(
                f"non-finite loss term(s) {bad or ['total']} in batch {i}"
            )
        _adam_step(new, grad, lr)
        if not np.all(np.isfinite(new.params)):
            raise NumericalError(f"non-finite parameters after batch {i}")
        history.append((total, terms))
    return new, history


def train_epoch(
    state: TrainState,
    data: Sequence[tuple[Spectrogram, int]],
    cfg: LossConfig,
    lr: float,
    batch_size: int,
    *,
    step_budget: "StepBudget | None" = None,
) -> tuple[TrainState, dict[str, float]]:
    """One pass over the data in seeded-shuffle order; returns the new state
    and the epoch's mean loss terms."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    x, y = _stack_dataset(state, data)
    rng = np.random.default_rng(
        derive_seed(state.config.seed, "epoch", state.epoch_count)
    )
    order = rng.permutation(x.shape[0])
    batches = [
        (x[order[i : i + batch_size]], y[order[i : i + batch_size]])
        for i in range(0, x.shape[0], batch_size)
    ]
    new, history = train_on_batches(state, batches, cfg, lr, step_budget=step_budget)
    new.epoch_count += 1
    means = {
        "loss": float(np.mean([t for t, _ in history])),
        "cen": float(np.mean([terms["cen"] for _, terms in history])),
        "sep": float(np.mean([terms["sep"] for _, terms in history])),
        "ce": float(np.mean([terms["ce"] for _, terms in history])),
    }
    return new, means


class StepBudget:
    """Hard ceiling on optimizer steps; exceeding it aborts the update."""

    def __init__(self, cap: float):
        self.cap = cap
        self.used = 0

    def charge(self) -> None:
        if self.used + 1 > self.cap:
            raise BudgetExceededError(
                f"optimizer step budget of {self.cap} exhausted"
            )
        self.used += 1


def train(
    state: TrainState,
    data: Sequence[tuple[Spectrogram, int]],
    cfg: LossConfig,
    *,
    lr: float,
    batch_size: int,
    epochs: int,
    warmup_epochs: int = 0,
    plateau_tol: float | None = None,
    plateau_epochs: int = 5,
    step_budget: StepBudget | None = None,
) -> tuple[TrainState, list[dict[str, float]]]:
    """Full training driver.

    Warmup epochs run cross-entropy only; afterwards class centers are
    initialized to the per-class embedding means, then the composite loss
    takes over. With ``plateau_tol`` set, stops early once the epoch loss
    changes by less than the tolerance for ``plateau_epochs`` consecutive
    epochs.
    """
    ce_only = LossConfig(0.0, 0.0, cfg.eta_cross_entropy, cfg.margin)
    history: list[dict[str, float]] = []
    for _ in range(warmup_epochs):
        state, means = train_epoch(
            state, data, ce_only, lr, batch_size, step_budget=step_budget
        )
        history.append({**means, "phase": 0.0})
    if warmup_epochs > 0:
        state = reset_centers_to_means(state, data)

    flat_count = 0
    prev_loss = None
    for _ in range(epochs):
        state, means = train_epoch(
            state, data, cfg, lr, batch_size, step_budget=step_budget
        )
        history.append({**means, "phase": 1.0})
        if plateau_tol is not None:
            if prev_loss is not None and abs(means["loss"] - prev_loss) < plateau_tol:
                flat_count += 1
                if flat_count >= plateau_epochs:
                    break
            else:
                flat_count = 0
            prev_loss = means["loss"]
    return state, history


def reset_centers_to_means(
    state: TrainState, data: Sequence[tuple[Spectrogram, int]]
) -> TrainState:
    """Set each class center to the mean embedding of its samples."""
    x, y = _stack_dataset(state, data)
    z = encode_matrix(state, x)
    new = state.copy()
    centers = new.layout.views(new.params)["centers"]
    for idx in np.unique(y):
        centers[idx] = z[y == idx].mean(axis=0)
    return new


def grow_head(
    state: TrainState,
    new_class_ids: Sequence[int],
    *,
    initial_centers: np.ndarray | None = None,
) -> TrainState:
    """Append classifier rows and centers for new classes.

    New head rows get the seeded uniform fan-in init; new centers default to
    zero unless ``initial_centers`` is given. Adam accumulators are reset:
    growth starts a fresh optimization phase.
    """
    new_class_ids = tuple(int(c) for c in new_class_ids)
    if not new_class_ids:
        return state.copy()
    overlap = set(new_class_ids) & set(state.class_ids)
    if overlap or len(set(new_class_ids)) != len(new_class_ids):
        raise ConfigurationError(f"class ids already present or duplicated: {overlap}")
    old_views = state.layout.views(state.params)
    merged_ids = state.class_ids + new_class_ids
    layout = _Layout(state.config, len(merged_ids))
    params = np.zeros(layout.total, dtype=np.float64)
    views = layout.views(params)
    for i in range(layout.n_layers):
        views[f"W{i}"][...] = old_views[f"W{i}"]
        views[f"b{i}"][...] = old_views[f"b{i}"]
    n_old = len(state.class_ids)
    views["W_head"][:n_old] = old_views["W_head"]
    views["b_head"][:n_old] = old_views["b_head"]
    views["centers"][:n_old] = old_views["centers"]
    rng = np.random.default_rng(
        derive_seed(state.config.seed, "grow", n_old, *new_class_ids)
    )
    bound = 1.0 / math.sqrt(state.config.embed_dim)
    views["W_head"][n_old:] = rng.uniform(
        -bound, bound, size=(len(new_class_ids), state.config.embed_dim)
    )
    if initial_centers is not None:
        if initial_centers.shape != (len(new_class_ids), state.config.embed_dim):
            raise DimensionMismatchError(
                f"initial_centers shape {initial_centers.shape} incompatible"
            )
        views["centers"][n_old:] = initial_centers
    return TrainState(
        config=state.config,
        class_ids=merged_ids,
        params=params,
        adam_m=np.zeros_like(params),
        adam_v=np.zeros_like(params),
        step_count=state.step_count,
        epoch_count=state.epoch_count,
    )


def layer_operator_norms(state: TrainState) -> list[float]:
    """Spectral norm of each weight matrix, encoder layers then head."""
    views = state.layout.views(state.params)
    norms = []
    for i in range(state.layout.n_layers):
        norms.append(float(np.linalg.norm(views[f"W{i}"], ord=2)))
    norms.append(float(np.linalg.norm(views["W_head"], ord=2)))
    return norms


def classify_logits(state: TrainState, x: np.ndarray) -> np.ndarray:
    z, logits, _, _ = _forward(state.layout.views(state.params), state.config, x)
    return logits
