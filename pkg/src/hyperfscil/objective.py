"""Probabilities, losses and their exact gradients w.r.t. the adapter parameters.

Similarity is oriented so that larger means closer in both modes: negative
hyperbolic distance between exp-mapped features, or plain cosine similarity.

Two layers live here. The value-level functions (``class_probabilities``,
``ce_base_loss``, ...) take already-encoded features and a :class:`ClassBank`.
:func:`loss_and_grad` starts from frozen features and adapter parameters and
returns the total loss together with its gradient for every trainable block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hyperbolic as hyp
from .encoder import AdapterParams, adapt_backward, adapt_forward, mean_templates, normalize


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.05
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    c: float = 0.5
    hyperbolic: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        for name in ("alpha", "beta", "gamma", "c"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    @property
    def sim_mode(self) -> str:
        # c == 0 is the Euclidean end of the curvature sweep
        return "hyperbolic" if self.hyperbolic and self.c > 0 else "cosine"


def _ids(a) -> np.ndarray:
    return np.asarray(a, dtype=np.int64).reshape(-1)


def _vecs(a, d=None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return a.reshape(0, a.shape[-1] if a.ndim == 2 else (d or 0))
    return np.atleast_2d(a)


@dataclass
class ClassBank:
    """Text features competing in the softmax.

    ``current_*`` are live (trainable) features for the session's classes;
    ``past_*`` are frozen snapshots and prototypes for earlier classes.
    """

    current_ids: np.ndarray
    current_text: np.ndarray
    past_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    past_text: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    past_prototypes: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        self.current_ids = _ids(self.current_ids)
        self.current_text = _vecs(self.current_text)
        d = self.current_text.shape[1] or None
        self.past_ids = _ids(self.past_ids)
        self.past_text = _vecs(self.past_text, d)
        self.past_prototypes = _vecs(self.past_prototypes, d)
        if len(self.current_ids) != len(self.current_text):
            raise ValueError("current_ids and current_text differ in length")
        if len(self.past_ids) != len(self.past_text):
            raise ValueError("past_ids and past_text differ in length")
        clash = np.intersect1d(self.past_ids, self.current_ids)
        if clash.size:
            raise ValueError(f"class ids in both past and current sets: {clash.tolist()}")

    @property
    def ids(self) -> np.ndarray:
        """Candidate order used by every probability vector: past, then current."""
        return np.concatenate([self.past_ids, self.current_ids])

    @property
    def text(self) -> np.ndarray:
        if len(self.past_ids) == 0:
            return self.current_text
        if len(self.current_ids) == 0:
            return self.past_text
        return np.vstack([self.past_text, self.current_text])


@dataclass
class FrozenRefs:
    """Regularisation targets: normalised frozen image and text features."""

    image: np.ndarray
    text: np.ndarray


def similarity_matrix(Z, H, cfg: LossConfig) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    if Z.shape[1] != H.shape[1]:
        raise hyp.GeometryError(f"dimension mismatch: {Z.shape[1]} vs {H.shape[1]}")
    if cfg.sim_mode == "hyperbolic":
        return -hyp.pairwise_distance(hyp.exp_map_zero(Z, cfg.c), hyp.exp_map_zero(H, cfg.c), cfg.c)
    return normalize(Z) @ normalize(H).T


def similarity(z, h, cfg: LossConfig) -> float:
    return float(similarity_matrix(z, h, cfg)[0, 0])


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(np.asarray(logits, dtype=np.float64)))


def _probs(z, H, cfg):
    z = np.asarray(z, dtype=np.float64)
    if len(H) == 0:
        raise ValueError("empty class set")
    p = softmax(similarity_matrix(z, H, cfg) / cfg.tau)
    return p[0] if z.ndim == 1 else p


def class_probabilities(z, bank: ClassBank, cfg: LossConfig) -> np.ndarray:
    """Softmax over the live classes only (the base-session form)."""
    return _probs(z, bank.current_text, cfg)


def class_probabilities_ssp(z, bank: ClassBank, cfg: LossConfig) -> np.ndarray:
    """Softmax over frozen past snapshots and live current features, ordered as ``bank.ids``."""
    return _probs(z, bank.text, cfg)


def _label_index(labels, ids: np.ndarray, allowed: np.ndarray | None = None) -> np.ndarray:
    labels = _ids(labels)
    if allowed is not None and not np.all(np.isin(labels, allowed)):
        bad = sorted(set(labels.tolist()) - set(allowed.tolist()))
        raise ValueError(f"labels outside the allowed class set: {bad}")
    lookup = {int(c): i for i, c in enumerate(ids)}
    try:
        return np.array([lookup[int(y)] for y in labels], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"label {e.args[0]} not in class bank") from None


def _ce(S: np.ndarray, idx: np.ndarray, tau: float) -> float:
    logp = _log_softmax(S / tau)
    return float(-np.mean(logp[np.arange(len(idx)), idx]))


def ce_base_loss(Z, labels, bank: ClassBank, cfg: LossConfig) -> float:
    idx = _label_index(labels, bank.current_ids, bank.current_ids)
    return _ce(similarity_matrix(Z, bank.current_text, cfg), idx, cfg.tau)


def reg_loss(prompted, frozen) -> float:
    """L1 distance over feature dims, averaged over rows when given a batch."""
    prompted = np.asarray(prompted, dtype=np.float64)
    frozen = np.asarray(frozen, dtype=np.float64)
    if prompted.shape != frozen.shape:
        raise ValueError(f"shape mismatch: {prompted.shape} vs {frozen.shape}")
    if prompted.size == 0:
        return 0.0
    return float(np.mean(np.sum(np.abs(np.atleast_2d(prompted - frozen)), axis=-1)))


def total_base_loss(Z, labels, bank: ClassBank, refs: FrozenRefs, cfg: LossConfig) -> float:
    return (
        ce_base_loss(Z, labels, bank, cfg)
        + cfg.alpha * reg_loss(Z, refs.image)
        + cfg.beta * reg_loss(bank.current_text, refs.text)
    )


def ce_past_loss(prototypes, proto_labels, bank: ClassBank, cfg: LossConfig) -> float:
    """Cross-entropy of stored prototypes against the full (past + current) softmax."""
    prototypes = _vecs(prototypes)
    if len(prototypes) == 0:
        return 0.0
    idx = _label_index(proto_labels, bank.ids)
    return _ce(similarity_matrix(prototypes, bank.text, cfg), idx, cfg.tau)


def ce_current_loss(Z, labels, bank: ClassBank, cfg: LossConfig) -> float:
    idx = _label_index(labels, bank.ids, bank.current_ids)
    return _ce(similarity_matrix(Z, bank.text, cfg), idx, cfg.tau)


def total_incremental_loss(
    Z, labels, prototypes, proto_labels, bank: ClassBank, refs: FrozenRefs, cfg: LossConfig
) -> float:
    return (
        ce_current_loss(Z, labels, bank, cfg)
        + cfg.gamma * ce_past_loss(prototypes, proto_labels, bank, cfg)
        + cfg.alpha * reg_loss(Z, refs.image)
        + cfg.beta * reg_loss(bank.current_text, refs.text)
    )


# --- parameter-level loss with analytic gradients ---


@dataclass
class TrainingBatch:
    """Everything one optimisation step needs, in frozen-feature form.

    ``text_templates`` (K, M, d) are the classes whose text features are live.
    ``past_text`` holds frozen snapshots that only enter the softmax
    denominator; ``prototypes`` feed the rehearsal term weighted by gamma.
    """

    images: np.ndarray
    labels: np.ndarray
    text_ids: np.ndarray
    text_templates: np.ndarray
    past_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    past_text: np.ndarray | None = None
    proto_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    prototypes: np.ndarray | None = None


@dataclass
class LossResult:
    total: float
    parts: dict[str, float]
    grads: dict[str, tuple[np.ndarray, np.ndarray]]
    n_singular: int = 0


def _sim_forward(X, cfg):
    if cfg.sim_mode == "hyperbolic":
        E = hyp.exp_map_zero(X, cfg.c, project=False)
        return hyp.ball_project(E, cfg.c), (X, E)
    n = np.linalg.norm(X, axis=1, keepdims=True)
    return X / n, (X, n)


def _sim_backward(cache, dY, cfg):
    if cfg.sim_mode == "hyperbolic":
        X, E = cache
        return hyp.exp_map_zero_vjp(X, cfg.c, hyp.ball_project_vjp(E, cfg.c, dY))
    X, n = cache
    U = X / n
    return (dY - U * np.sum(U * dY, axis=1, keepdims=True)) / n


def _scores(P, Q, cfg):
    """Similarity between mapped rows P (n, d) and Q (k, d)."""
    if cfg.sim_mode == "hyperbolic":
        return -hyp.pairwise_distance(P, Q, cfg.c)
    return P @ Q.T


def _scores_vjp(P, Q, dS, cfg):
    if cfg.sim_mode == "hyperbolic":
        dP, dQ, n_sing = hyp.pairwise_distance_vjp(P, Q, cfg.c, -dS)
        return dP, dQ, n_sing
    return dS @ Q, dS.T @ P, 0


def _ce_with_grad(S, idx, tau):
    logp = _log_softmax(S / tau)
    n = len(idx)
    loss = float(-np.mean(logp[np.arange(n), idx]))
    dS = np.exp(logp)
    dS[np.arange(n), idx] -= 1.0
    return loss, dS / (n * tau)


def loss_and_grad(params: AdapterParams, batch: TrainingBatch, cfg: LossConfig, need_grad: bool = True) -> LossResult:
    """Total loss and gradients for every trainable adapter block.

    The loss is ``CE(batch) + gamma * CE(prototypes) + alpha * image_reg +
    beta * text_reg``; the prototype term is absent when the batch carries no
    prototypes, which makes it the base-session objective.
    """
    images = np.atleast_2d(np.asarray(batch.images, dtype=np.float64))
    text_ids = _ids(batch.text_ids)
    past_ids = _ids(batch.past_ids)
    past_text = _vecs(batch.past_text if batch.past_text is not None else np.zeros((0, images.shape[1])), images.shape[1])
    if len(past_ids) != len(past_text):
        raise ValueError("past_ids and past_text differ in length")
    cand_ids = np.concatenate([past_ids, text_ids])
    if len(np.unique(cand_ids)) != len(cand_ids):
        raise ValueError("duplicate class ids among past and live classes")
    n_past = len(past_ids)

    # forward
    Z, vcache = adapt_forward(images, params.vision)
    gbar = mean_templates(batch.text_templates)
    H, tcache = adapt_forward(gbar, params.text)
    Zm, zc = _sim_forward(Z, cfg)
    Hm, hc = _sim_forward(H, cfg)
    Pm = _sim_forward(past_text, cfg)[0] if n_past else np.zeros((0, Hm.shape[1]))
    Cand = np.vstack([Pm, Hm])

    idx = _label_index(batch.labels, cand_ids, text_ids)
    S = _scores(Zm, Cand, cfg)
    ce_cur, dS = _ce_with_grad(S, idx, cfg.tau)

    ce_past = 0.0
    protos = batch.prototypes
    has_protos = protos is not None and len(protos) > 0
    if has_protos:
        protos = np.atleast_2d(np.asarray(protos, dtype=np.float64))
        Qm = _sim_forward(protos, cfg)[0]
        pidx = _label_index(batch.proto_ids, cand_ids)
        Sp = _scores(Qm, Cand, cfg)
        ce_past, dSp = _ce_with_grad(Sp, pidx, cfg.tau)

    Zf = normalize(images)
    Gf = normalize(gbar)
    reg_img = float(np.mean(np.sum(np.abs(Z - Zf), axis=1)))
    reg_txt = float(np.mean(np.sum(np.abs(H - Gf), axis=1)))
    total = ce_cur + cfg.gamma * ce_past + cfg.alpha * reg_img + cfg.beta * reg_txt
    parts = {"ce": ce_cur, "ce_past": ce_past, "reg_image": reg_img, "reg_text": reg_txt}
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite loss: {parts}")
    if not need_grad:
        return LossResult(total, parts, {})

    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    dZm, dCand, n_sing = _scores_vjp(Zm, Cand, dS, cfg)
    dHm = dCand[n_past:]
    if has_protos and cfg.gamma:
        _, dCand_p, n2 = _scores_vjp(Qm, Cand, cfg.gamma * dSp, cfg)
        dHm = dHm + dCand_p[n_past:]
        n_sing += n2

    if params.vision.trainable:
        dZ = _sim_backward(zc, dZm, cfg) + cfg.alpha * np.sign(Z - Zf) / len(Z)
        grads["vision"] = adapt_backward(vcache, dZ, params.vision)
    if params.text.trainable:
        dH = _sim_backward(hc, dHm, cfg) + cfg.beta * np.sign(H - Gf) / len(H)
        grads["text"] = adapt_backward(tcache, dH, params.text)
    return LossResult(total, parts, grads, n_sing)


def loss_gradients(params: AdapterParams, batch: TrainingBatch, cfg: LossConfig):
    """Gradient structure keyed by trainable block name, ``{name: (dA, dB)}``."""
    return loss_and_grad(params, batch, cfg).grads
