"""Session runner: base training, incremental sessions, optimiser and schedule."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import TEST, TRAIN, DataError, EmbeddingDataset
from .encoder import AdapterParams, AdapterBlock, encode_image, encode_text, init_params, set_phase, trainable_count
from .metrics import RunReport, classify, prototype_text_heatmap, session_accuracy, zero_shot_accuracy
from .objective import ClassBank, LossConfig, TrainingBatch, loss_and_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    ssp: bool = True
    hyp: bool = True
    c: float = 0.5
    tau: float = 0.05
    alpha: float = 10.0
    beta: float = 25.0
    gamma: float = 30.0
    rank: int = 4
    base_epochs: int = 30
    inc_epochs: int = 20
    base_lr: float = 0.0025
    inc_lr: float = 0.002
    base_batch: int = 4
    inc_batch: int = 4
    momentum: float = 0.9
    warmup_frac: float = 0.1
    min_warmup: int = 5

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        for name in ("base_epochs", "inc_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("base_batch", "inc_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("base_lr", "inc_lr"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        self.loss_config()  # validates tau, c and the trade-off weights

    def loss_config(self) -> LossConfig:
        return LossConfig(tau=self.tau, alpha=self.alpha, beta=self.beta, gamma=self.gamma, c=self.c, hyperbolic=self.hyp)


# --- optimiser ---


def cosine_warmup_lr(step: int, warmup: int, total: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` over ``warmup`` steps, then cosine decay to zero at ``total``."""
    if not (0 <= step < total) or not (0 <= warmup < total):
        raise ValueError(f"need 0 <= step < total and 0 <= warmup < total (step={step}, warmup={warmup}, total={total})")
    if step < warmup:
        return base_lr * (step + 1) / warmup
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / (total - warmup)))


def warmup_steps(total: int, frac: float = 0.1, minimum: int = 5) -> int:
    if total <= 1:
        return 0
    return min(max(minimum, int(round(frac * total))), total - 1)


@dataclass
class OptimizerState:
    velocity: dict[str, tuple[np.ndarray, np.ndarray]]
    base_lr: float
    total_steps: int
    warmup_steps: int
    momentum: float = 0.9
    step: int = 0
    last_lr: float = 0.0

    def lr(self) -> float:
        return cosine_warmup_lr(min(self.step, self.total_steps - 1), self.warmup_steps, self.total_steps, self.base_lr)


def make_optimizer(params: AdapterParams, base_lr: float, total_steps: int, momentum: float = 0.9,
                   warmup_frac: float = 0.1, min_warmup: int = 5) -> OptimizerState:
    velocity = {
        name: (np.zeros_like(b.A), np.zeros_like(b.B)) for name, b in params.blocks().items() if b.trainable
    }
    total = max(total_steps, 1)
    return OptimizerState(velocity, base_lr, total, warmup_steps(total, warmup_frac, min_warmup), momentum)


def sgd_momentum_step(params: AdapterParams, grads, state: OptimizerState, lr: float | None = None):
    """``v <- mu v + g``; ``theta <- theta - lr v`` for each trainable block.

    Returns ``(params, state)``. Updated blocks get fresh arrays, so earlier
    references to parameter arrays are never modified.
    """
    if set(grads) != set(state.velocity):
        raise ValueError(f"gradient blocks {sorted(grads)} do not match trainable blocks {sorted(state.velocity)}")
    lr = state.lr() if lr is None else lr
    blocks = params.blocks()
    new_blocks = dict(blocks)
    velocity = {}
    for name, (gA, gB) in grads.items():
        block = blocks[name]
        vA, vB = state.velocity[name]
        if gA.shape != block.A.shape or gB.shape != block.B.shape:
            raise ValueError(f"gradient shape mismatch for block {name!r}")
        vA = state.momentum * vA + gA
        vB = state.momentum * vB + gB
        velocity[name] = (vA, vB)
        new_blocks[name] = AdapterBlock(A=block.A - lr * vA, B=block.B - lr * vB, trainable=block.trainable)
    state.velocity = velocity
    state.step += 1
    state.last_lr = lr
    return AdapterParams(**new_blocks), state


# --- rehearsal memory ---


class MemoryBuffer:
    """One frozen text snapshot and one image prototype per seen class."""

    def __init__(self):
        self._ids: list[int] = []
        self._text: list[np.ndarray] = []
        self._protos: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, class_id) -> bool:
        return int(class_id) in self._ids

    @property
    def stored_vectors(self) -> int:
        return len(self._text) + len(self._protos)

    @property
    def ids(self) -> np.ndarray:
        return np.array(self._ids, dtype=np.int64)

    @staticmethod
    def _stack(rows):
        out = np.array(rows) if rows else np.zeros((0, 0))
        out.flags.writeable = False
        return out

    @property
    def ssp_text(self) -> np.ndarray:
        return self._stack(self._text)

    @property
    def prototypes(self) -> np.ndarray:
        return self._stack(self._protos)

    def store(self, class_ids, ssp_text, prototypes) -> None:
        class_ids = [int(c) for c in class_ids]
        ssp_text = np.atleast_2d(np.asarray(ssp_text, dtype=np.float64))
        prototypes = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
        if not (len(class_ids) == len(ssp_text) == len(prototypes)):
            raise ValueError("class ids, snapshots and prototypes differ in length")
        dup = [c for c in class_ids if c in self._ids]
        if dup or len(set(class_ids)) != len(class_ids):
            raise ValueError(f"classes already stored in buffer: {dup or class_ids}")
        for c, h, z in zip(class_ids, ssp_text, prototypes):
            h, z = h.copy(), z.copy()
            h.flags.writeable = False
            z.flags.writeable = False
            self._ids.append(c)
            self._text.append(h)
            self._protos.append(z)

    def entry_digests(self) -> dict[int, str]:
        return {
            c: hashlib.sha256(h.tobytes() + z.tobytes()).hexdigest()
            for c, h, z in zip(self._ids, self._text, self._protos)
        }


def compute_prototypes(images, labels, params: AdapterParams):
    """Class-mean of prompted image features; returns ``(class_ids, prototypes)`` sorted by id."""
    labels = np.asarray(labels, dtype=np.int64)
    ids = np.unique(labels)
    if len(ids) == 0:
        raise ValueError("no samples to build prototypes from")
    Z = encode_image(np.atleast_2d(images), params)
    protos = np.stack([Z[labels == c].mean(axis=0) for c in ids])
    return ids, protos


def snapshot_ssp(class_ids, templates, params: AdapterParams, buffer: MemoryBuffer | None = None) -> np.ndarray:
    """Detached copies of the current prompted text features for ``class_ids``."""
    if buffer is not None:
        dup = [int(c) for c in class_ids if c in buffer]
        if dup:
            raise ValueError(f"classes already have a stored snapshot: {dup}")
    return np.array(encode_text(templates, params), copy=True)


# --- sessions ---


@dataclass
class SessionResult:
    session: int
    accuracy: float
    correct: int
    total: int
    lr_final: float
    trainable_params: int
    n_train: int
    heatmap_ids: list[int] = field(default_factory=list)
    heatmap: np.ndarray | None = None
    singular: int = 0
    stored_vectors: int = 0


def _seen_classes(dataset: EmbeddingDataset, t: int) -> list[int]:
    return sorted(c for s in dataset.sessions[: t + 1] for c in s)


def eval_bank(dataset: EmbeddingDataset, t: int, params: AdapterParams, buffer: MemoryBuffer, ssp: bool) -> ClassBank:
    """Text features used to classify after session ``t``.

    With SSP, every learned class is represented by its frozen snapshot. Without
    it, all text features come from the live adapter.
    """
    seen = _seen_classes(dataset, t)
    if ssp:
        pos = {c: i for i, c in enumerate(buffer.ids.tolist())}
        rows = [pos[c] for c in seen]
        return ClassBank(current_ids=np.zeros(0, dtype=np.int64), current_text=np.zeros((0, dataset.d_txt)),
                         past_ids=seen, past_text=buffer.ssp_text[rows])
    return ClassBank(current_ids=seen, current_text=encode_text(dataset.templates(seen), params))


def _evaluate(dataset, t, params, buffer, cfg: TrainConfig, result: SessionResult) -> SessionResult:
    bank = eval_bank(dataset, t, params, buffer, cfg.ssp)
    lc = cfg.loss_config()
    idx = dataset.indices(_seen_classes(dataset, t), TEST)
    Z = encode_image(dataset.image_vecs[idx].astype(np.float64), params)
    pred = classify(Z, bank, lc)
    labels = dataset.image_labels[idx]
    result.correct = int(np.sum(pred == labels))
    result.total = len(labels)
    result.accuracy = session_accuracy(pred, labels)
    result.heatmap = prototype_text_heatmap(buffer, bank, lc)
    result.heatmap_ids = sorted(buffer.ids.tolist())
    result.stored_vectors = buffer.stored_vectors
    return result


def _train(params, dataset, idx, make_batch, epochs, batch_size, lr, cfg: TrainConfig, rng):
    steps_per_epoch = math.ceil(len(idx) / batch_size)
    total = epochs * steps_per_epoch
    opt = make_optimizer(params, lr, total, cfg.momentum, cfg.warmup_frac, cfg.min_warmup)
    lc = cfg.loss_config()
    singular = 0
    for _ in range(epochs):
        perm = rng.permutation(idx)
        for s in range(steps_per_epoch):
            sel = perm[s * batch_size : (s + 1) * batch_size]
            res = loss_and_grad(params, make_batch(sel), lc)
            singular += res.n_singular
            params, opt = sgd_momentum_step(params, res.grads, opt)
    return params, opt.last_lr, singular


def _session_classes(dataset: EmbeddingDataset, t: int) -> list[int]:
    if t >= len(dataset.sessions):
        raise DataError(f"dataset has no session {t}")
    return sorted(int(c) for c in dataset.sessions[t])


def run_base_session(dataset: EmbeddingDataset, cfg: TrainConfig, seed: int = 0):
    """Train both adapters on session 0, then store prototypes and text snapshots.

    Returns ``(params, buffer, SessionResult)``.
    """
    if not dataset.sessions:
        raise DataError("dataset has no session assignment")
    if dataset.d_img != dataset.d_txt:
        raise DataError(f"image and text dims must match for pairing ({dataset.d_img} vs {dataset.d_txt})")
    classes = _session_classes(dataset, 0)
    params = set_phase(init_params(dataset.d_img, dataset.d_txt, cfg.rank, seed), "base")
    idx = dataset.indices(classes, TRAIN)
    templates = dataset.templates(classes)

    def make_batch(sel):
        return TrainingBatch(
            images=dataset.image_vecs[sel].astype(np.float64),
            labels=dataset.image_labels[sel],
            text_ids=classes,
            text_templates=templates,
        )

    rng = np.random.default_rng([seed, 0])
    params, lr_final, singular = _train(params, dataset, idx, make_batch, cfg.base_epochs, cfg.base_batch, cfg.base_lr, cfg, rng)

    buffer = MemoryBuffer()
    _store_session(buffer, dataset, classes, idx, params)
    result = SessionResult(0, 0.0, 0, 0, lr_final, trainable_count(params), len(idx), singular=singular)
    return params, buffer, _evaluate(dataset, 0, params, buffer, cfg, result)


def _store_session(buffer, dataset, classes, idx, params):
    ids, protos = compute_prototypes(dataset.image_vecs[idx].astype(np.float64), dataset.image_labels[idx], params)
    if ids.tolist() != classes:
        raise DataError("every session class needs at least one training sample")
    text = snapshot_ssp(classes, dataset.templates(classes), params, buffer)
    buffer.store(classes, text, protos)


def run_incremental_session(t: int, dataset: EmbeddingDataset, cfg: TrainConfig, params: AdapterParams,
                            buffer: MemoryBuffer, seed: int = 0):
    """Train only the text adapter on session ``t`` and extend the buffer.

    Returns ``(params, buffer, SessionResult)``; the buffer is extended in place.
    """
    if t < 1:
        raise ValueError("incremental sessions start at t = 1")
    classes = _session_classes(dataset, t)
    past = _seen_classes(dataset, t - 1)
    if len(buffer) == 0:
        raise DataError("incremental session needs a completed base session")
    if sorted(buffer.ids.tolist()) != past:
        raise DataError("buffer does not cover exactly the classes of earlier sessions")
    overlap = [c for c in classes if c in buffer]
    if overlap:
        raise DataError(f"session {t} repeats classes already learned: {overlap}")

    params = set_phase(params, "incremental")
    idx = dataset.indices(classes, TRAIN)
    if dataset.k_shot and len(idx) != len(classes) * dataset.k_shot:
        raise DataError(f"session {t} has {len(idx)} training samples, expected {len(classes)}x{dataset.k_shot}")

    pos = {c: i for i, c in enumerate(buffer.ids.tolist())}
    rows = [pos[c] for c in past]
    prototypes = buffer.prototypes[rows]
    if cfg.ssp:
        live = classes
        past_ids, past_text = past, buffer.ssp_text[rows]
    else:
        # without snapshots every earlier class keeps a live, trainable text feature
        live = sorted(past + classes)
        past_ids, past_text = [], None
    templates = dataset.templates(live)

    def make_batch(sel):
        return TrainingBatch(
            images=dataset.image_vecs[sel].astype(np.float64),
            labels=dataset.image_labels[sel],
            text_ids=live,
            text_templates=templates,
            past_ids=past_ids,
            past_text=past_text,
            proto_ids=past,
            prototypes=prototypes,
        )

    rng = np.random.default_rng([seed, t])
    params, lr_final, singular = _train(params, dataset, idx, make_batch, cfg.inc_epochs, cfg.inc_batch, cfg.inc_lr, cfg, rng)
    _store_session(buffer, dataset, classes, idx, params)
    result = SessionResult(t, 0.0, 0, 0, lr_final, trainable_count(params), len(idx), singular=singular)
    return params, buffer, _evaluate(dataset, t, params, buffer, cfg, result)


def run_full_stream(dataset: EmbeddingDataset, cfg: TrainConfig, seed: int = 0, config_echo: dict | None = None) -> RunReport:
    dataset.check()
    params, buffer, first = run_base_session(dataset, cfg, seed)
    results = [first]
    base_count = trainable_count(params)
    for t in range(1, len(dataset.sessions)):
        params, buffer, res = run_incremental_session(t, dataset, cfg, params, buffer, seed)
        results.append(res)
        logger.info("session %d: accuracy %.2f", t, res.accuracy)
    inc_count = trainable_count(set_phase(params, "incremental"))
    lc = cfg.loss_config()
    return RunReport(
        accuracies=[r.accuracy for r in results],
        correct=[r.correct for r in results],
        total=[r.total for r in results],
        zero_shot=zero_shot_accuracy(dataset),
        trainable_params={"base": base_count, "incremental": inc_count},
        ablation={"ssp": cfg.ssp, "hyp": cfg.hyp},
        sim_mode=lc.sim_mode,
        c=cfg.c,
        lr_final=[r.lr_final for r in results],
        buffer_sizes=[r.stored_vectors for r in results],
        heatmaps=[{"session": r.session, "class_ids": r.heatmap_ids, "matrix": r.heatmap.tolist()} for r in results],
        config=config_echo if config_echo is not None else asdict(cfg),
        singular_gradients=sum(r.singular for r in results),
    )
