"""Prompted features: frozen backbone vectors plus small learnable adapters.

Each modality gets a rank-``r`` residual adapter

    prompted(x) = normalize(x + B @ tanh(A @ x))

with ``B`` initialised to zero, so a fresh adapter reproduces the normalised
frozen feature exactly. The vision adapter plays the role of the visual
prompts and is frozen after the base session; the text adapter keeps training.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

INIT_STD = 0.02

Phase = Literal["base", "incremental"]


@dataclass
class AdapterBlock:
    A: np.ndarray  # (rank, dim)
    B: np.ndarray  # (dim, rank)
    trainable: bool = True

    @property
    def size(self) -> int:
        return self.A.size + self.B.size

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.A).tobytes())
        h.update(np.ascontiguousarray(self.B).tobytes())
        return h.hexdigest()


@dataclass
class AdapterParams:
    vision: AdapterBlock
    text: AdapterBlock

    @property
    def rank(self) -> int:
        return self.vision.A.shape[0]

    def blocks(self) -> dict[str, AdapterBlock]:
        return {"vision": self.vision, "text": self.text}


def init_params(d_img: int, d_txt: int, rank: int = 4, seed: int = 0) -> AdapterParams:
    if min(d_img, d_txt, rank) < 1:
        raise ValueError("dimensions and rank must be >= 1")
    rng = np.random.default_rng(seed)
    vision = AdapterBlock(
        A=rng.normal(0.0, INIT_STD, size=(rank, d_img)),
        B=np.zeros((d_img, rank)),
    )
    text = AdapterBlock(
        A=rng.normal(0.0, INIT_STD, size=(rank, d_txt)),
        B=np.zeros((d_txt, rank)),
    )
    return AdapterParams(vision=vision, text=text)


def set_phase(p: AdapterParams, phase: Phase) -> AdapterParams:
    """Return params with the freeze flags for ``phase``; arrays are shared."""
    if phase == "base":
        vision_on = True
    elif phase == "incremental":
        vision_on = False
    else:
        raise ValueError(f"unknown phase {phase!r}")
    return AdapterParams(
        vision=replace(p.vision, trainable=vision_on),
        text=replace(p.text, trainable=True),
    )


def trainable_count(p: AdapterParams) -> int:
    return sum(b.size for b in p.blocks().values() if b.trainable)


def normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalise a zero vector")
    return x / n


def adapt_forward(X: np.ndarray, block: AdapterBlock):
    """Apply the residual adapter row-wise to X (n, d); returns (features, cache)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != block.A.shape[1]:
        raise ValueError(f"dimension mismatch: feature {X.shape[-1]} vs adapter {block.A.shape[1]}")
    T = np.tanh(X @ block.A.T)
    E = X + T @ block.B.T
    norm = np.linalg.norm(E, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("adapter output collapsed to zero")
    N = E / norm
    return N, (X, T, N, norm)


def adapt_backward(cache, dN: np.ndarray, block: AdapterBlock):
    """Gradients of a scalar w.r.t. (A, B) given its gradient ``dN`` on the output."""
    X, T, N, norm = cache
    dE = (dN - N * np.sum(N * dN, axis=-1, keepdims=True)) / norm
    dB = dE.T @ T
    dU = (dE @ block.B) * (1.0 - T * T)
    dA = dU.T @ X
    return dA, dB


def encode_image(f, p: AdapterParams) -> np.ndarray:
    """Prompted image feature(s) for frozen feature(s) ``f`` of shape (d,) or (n, d)."""
    f = np.asarray(f, dtype=np.float64)
    N, _ = adapt_forward(np.atleast_2d(f), p.vision)
    return N[0] if f.ndim == 1 else N


def mean_templates(templates) -> np.ndarray:
    """Average the M template vectors; accepts (M, d) or (C, M, d)."""
    t = np.asarray(templates, dtype=np.float64)
    if t.ndim < 2 or t.shape[-2] == 0:
        raise ValueError("need at least one text template")
    return t.mean(axis=-2)


def encode_text(templates, p: AdapterParams) -> np.ndarray:
    """Prompted text feature: adapter applied to the template average."""
    g = mean_templates(templates)
    N, _ = adapt_forward(np.atleast_2d(g), p.text)
    return N[0] if g.ndim == 1 else N
