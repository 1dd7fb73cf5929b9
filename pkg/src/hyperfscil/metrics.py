"""Classification, per-session accuracy, Avg/PD and prototype-text heatmaps."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import hyperbolic as hyp
from .data import TEST, EmbeddingDataset
from .encoder import mean_templates, normalize
from .objective import ClassBank, LossConfig, similarity_matrix

if TYPE_CHECKING:
    from .protocol import MemoryBuffer


def classify(Z, bank: ClassBank, cfg: LossConfig) -> np.ndarray | int:
    """Argmax similarity over every class in ``bank``; ties go to the lowest id."""
    ids = bank.ids
    if len(ids) == 0:
        raise ValueError("cannot classify against an empty class bank")
    order = np.argsort(ids, kind="stable")
    Z = np.asarray(Z, dtype=np.float64)
    S = similarity_matrix(Z, bank.text[order], cfg)
    pred = ids[order][np.argmax(S, axis=1)]
    return int(pred[0]) if Z.ndim == 1 else pred


def session_accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(labels) == 0 or predictions.shape != labels.shape:
        raise ValueError("need equal-length, non-empty predictions and labels")
    return 100.0 * int(np.sum(predictions == labels)) / len(labels)


def aggregate(accuracies) -> tuple[float, float]:
    """``(avg, pd)``: mean over all sessions including the base, and first minus last."""
    acc = [float(a) for a in accuracies]
    if not acc:
        raise ValueError("empty accuracy sequence")
    return math.fsum(acc) / len(acc), acc[0] - acc[-1]


def zero_shot_accuracy(dataset: EmbeddingDataset, upto: int | None = None) -> list[float]:
    """Cosine classification of frozen image features against frozen averaged text.

    Returns one accuracy per session ``0..upto`` over all test samples of the
    classes seen by then.
    """
    sessions = dataset.sessions if upto is None else dataset.sessions[: upto + 1]
    out = []
    seen: list[int] = []
    for classes in sessions:
        seen = seen + list(classes)
        ids = np.array(sorted(seen), dtype=np.int64)
        text = normalize(mean_templates(dataset.templates(ids)))
        idx = dataset.indices(ids, TEST)
        S = normalize(dataset.image_vecs[idx].astype(np.float64)) @ text.T
        out.append(session_accuracy(ids[np.argmax(S, axis=1)], dataset.image_labels[idx]))
    return out


def distance_matrix(P, Q, cfg: LossConfig) -> np.ndarray:
    if cfg.sim_mode == "hyperbolic":
        return hyp.pairwise_distance(hyp.exp_map_zero(P, cfg.c), hyp.exp_map_zero(Q, cfg.c), cfg.c)
    return 2.0 - 2.0 * np.clip(normalize(P) @ normalize(Q).T, -1.0, 1.0)


def prototype_text_heatmap(buffer: "MemoryBuffer", bank: ClassBank, cfg: LossConfig) -> np.ndarray:
    """Distance from each stored prototype (rows) to each text feature (columns), id-ordered."""
    if len(buffer) == 0:
        raise ValueError("empty buffer")
    pids = buffer.ids
    prow = np.argsort(pids, kind="stable")
    tids = bank.ids
    tcol = np.argsort(tids, kind="stable")
    return distance_matrix(buffer.prototypes[prow], bank.text[tcol], cfg)


def diagonal_gap(matrix: np.ndarray) -> tuple[float, float]:
    """(mean diagonal, mean off-diagonal) of a square matrix."""
    m = np.asarray(matrix)
    diag = np.diag(m)
    off = m[~np.eye(len(m), dtype=bool)]
    return float(diag.mean()), float(off.mean()) if off.size else float("nan")


def fmt(x: float, places: int = 1) -> str:
    return f"{x:.{places}f}"


@dataclass
class RunReport:
    accuracies: list[float]
    correct: list[int]
    total: list[int]
    zero_shot: list[float]
    trainable_params: dict[str, int]
    ablation: dict[str, bool]
    sim_mode: str
    c: float
    lr_final: list[float]
    buffer_sizes: list[int]
    heatmaps: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    singular_gradients: int = 0

    @property
    def avg(self) -> float:
        return aggregate(self.accuracies)[0]

    @property
    def pd(self) -> float:
        return aggregate(self.accuracies)[1]

    @property
    def final_accuracy(self) -> float:
        return self.accuracies[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["avg"] = self.avg
        d["pd"] = self.pd
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        keys = {f for f in cls.__dataclass_fields__}
        missing = {"accuracies"} - set(d)
        if missing:
            raise ValueError(f"report is missing {sorted(missing)}")
        defaults = dict(
            correct=[], total=[], zero_shot=[], trainable_params={}, ablation={}, sim_mode="", c=0.0,
            lr_final=[], buffer_sizes=[],
        )
        defaults.update({k: v for k, v in d.items() if k in keys})
        return cls(**defaults)
