"""Embedding datasets: synthetic generation, session splits and the FSEB bundle format.

A bundle is a directory holding ``manifest.json``, ``images.bin`` and
``text.bin``. Binary files are little-endian and end in a CRC32 of everything
before it::

    images.bin  "FSEB" u32 version  u32 d_img  u64 n_records
                n_records x (u32 class_id, u8 split, d_img x f32)   u32 crc
    text.bin    "FSEB" u32 version  u32 d_txt  u32 M  u64 n_classes
                n_classes x (u32 class_id, M*d_txt x f32)            u32 crc

``split`` is 0 for train and 1 for test.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = b"FSEB"
VERSION = 1
TRAIN, TEST = 0, 1


class DataError(Exception):
    """Dataset content or bundle files are unusable."""


class BundleFormatError(DataError):
    """Bad magic, version, length or checksum in a bundle file."""


@dataclass
class EmbeddingDataset:
    d_img: int
    d_txt: int
    M: int
    image_labels: np.ndarray  # (N,) int64
    image_split: np.ndarray  # (N,) uint8
    image_vecs: np.ndarray  # (N, d_img) float32
    text_class_ids: np.ndarray  # (C,) int64
    text_vecs: np.ndarray  # (C, M, d_txt) float32
    class_names: list[str]
    sessions: list[list[int]] = field(default_factory=list)
    k_shot: int = 0
    seed: int = 0

    @property
    def class_ids(self) -> np.ndarray:
        return self.text_class_ids

    def indices(self, classes, split: int) -> np.ndarray:
        mask = np.isin(self.image_labels, np.asarray(list(classes), dtype=np.int64)) & (self.image_split == split)
        return np.flatnonzero(mask)

    def templates(self, classes) -> np.ndarray:
        """Text templates (K, M, d_txt) for ``classes`` in the given order."""
        pos = {int(c): i for i, c in enumerate(self.text_class_ids)}
        try:
            rows = [pos[int(c)] for c in classes]
        except KeyError as e:
            raise DataError(f"no text templates for class {e.args[0]}") from None
        return self.text_vecs[rows]

    def equals(self, other: "EmbeddingDataset") -> bool:
        """Bitwise equality of every field."""
        arrays = ("image_labels", "image_split", "image_vecs", "text_class_ids", "text_vecs")
        scalars = ("d_img", "d_txt", "M", "class_names", "sessions", "k_shot", "seed")
        return all(getattr(self, s) == getattr(other, s) for s in scalars) and all(
            getattr(self, a).dtype == getattr(other, a).dtype
            and getattr(self, a).shape == getattr(other, a).shape
            and getattr(self, a).tobytes() == getattr(other, a).tobytes()
            for a in arrays
        )

    def check(self) -> None:
        """Raise :class:`DataError` if a structural invariant is broken."""
        if self.text_vecs.shape != (len(self.text_class_ids), self.M, self.d_txt):
            raise DataError(f"text array shape {self.text_vecs.shape} inconsistent with header")
        if self.M < 1:
            raise DataError("need at least one text template per class")
        if self.image_vecs.shape != (len(self.image_labels), self.d_img):
            raise DataError("image array shape inconsistent with header")
        if len(np.unique(self.text_class_ids)) != len(self.text_class_ids):
            raise DataError("duplicate class ids in text records")
        known = set(self.text_class_ids.tolist())
        for c in known:
            for split in (TRAIN, TEST):
                if not np.any((self.image_labels == c) & (self.image_split == split)):
                    raise DataError(f"class {c} has no {'train' if split == TRAIN else 'test'} images")
        if not set(self.image_labels.tolist()) <= known:
            raise DataError("image records reference classes without text templates")
        violations = validate_disjoint(self)
        if violations:
            raise DataError(f"sessions overlap: {violations[:5]}")
        for s in self.sessions:
            if not set(s) <= known:
                raise DataError(f"session references unknown classes: {sorted(set(s) - known)}")


@dataclass(frozen=True)
class SplitSpec:
    n_base: int
    n_way: int
    k_shot: int
    T: int

    def __post_init__(self):
        if self.n_base < 1 or self.n_way < 1 or self.k_shot < 1 or self.T < 0:
            raise ValueError(f"invalid split spec {self}")

    @property
    def num_classes(self) -> int:
        return self.n_base + self.n_way * self.T


@dataclass(frozen=True)
class SyntheticConfig:
    """Gaussian class clusters standing in for frozen backbone features.

    Class means sit around ``cluster_count`` centres. In fine-grained mode the
    classes sharing a centre differ only by a small offset inside a
    low-dimensional subspace, so they are hard to tell apart; text templates
    are the class mean plus a per-class misalignment and per-template noise.
    """

    num_classes: int = 30
    dim: int = 32
    samples_per_class_train: int = 20
    samples_per_class_test: int = 15
    M: int = 4
    cluster_count: int = 30
    within_std: float = 0.5
    between_scale: float = 1.0
    fine_grained: bool = False
    seed: int = 0
    class_spread: float = 1.0
    fine_shrink: float = 0.35
    subspace_dim: int = 4
    text_noise: float = 0.3
    template_noise: float = 0.1

    def __post_init__(self):
        for name in ("num_classes", "dim", "samples_per_class_train", "samples_per_class_test", "M", "cluster_count", "subspace_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("within_std", "between_scale", "class_spread", "fine_shrink", "text_noise", "template_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.subspace_dim > self.dim:
            raise ValueError("subspace_dim cannot exceed dim")


def gen_synthetic(cfg: SyntheticConfig) -> EmbeddingDataset:
    rng = np.random.default_rng(cfg.seed)
    d, C = cfg.dim, cfg.num_classes
    centers = rng.normal(size=(cfg.cluster_count, d)) * cfg.between_scale / np.sqrt(d)
    assign = np.arange(C) % cfg.cluster_count
    basis, _ = np.linalg.qr(rng.normal(size=(d, cfg.subspace_dim)))
    spread = cfg.class_spread * cfg.between_scale * (cfg.fine_shrink if cfg.fine_grained else 1.0)
    offsets = rng.normal(size=(C, cfg.subspace_dim)) @ basis.T * spread / np.sqrt(cfg.subspace_dim)
    means = centers[assign] + offsets

    n_tr, n_te = cfg.samples_per_class_train, cfg.samples_per_class_test
    per = n_tr + n_te
    labels = np.repeat(np.arange(C, dtype=np.int64), per)
    split = np.tile(np.r_[np.full(n_tr, TRAIN), np.full(n_te, TEST)].astype(np.uint8), C)
    noise = rng.normal(size=(C * per, d)) * cfg.within_std / np.sqrt(d)
    images = means[labels] + noise

    text_center = means + rng.normal(size=(C, d)) * cfg.text_noise / np.sqrt(d)
    templates = text_center[:, None, :] + rng.normal(size=(C, cfg.M, d)) * cfg.template_noise / np.sqrt(d)

    return EmbeddingDataset(
        d_img=d,
        d_txt=d,
        M=cfg.M,
        image_labels=labels,
        image_split=split,
        image_vecs=images.astype(np.float32),
        text_class_ids=np.arange(C, dtype=np.int64),
        text_vecs=templates.astype(np.float32),
        class_names=[f"class_{i:03d}" for i in range(C)],
        seed=cfg.seed,
    )


def make_splits(dataset: EmbeddingDataset, spec: SplitSpec, seed: int = 0) -> EmbeddingDataset:
    """Assign classes to sessions in id order and cut incremental train sets to k shots."""
    ids = np.sort(dataset.text_class_ids)
    if spec.num_classes > len(ids):
        raise DataError(f"split needs {spec.num_classes} classes, dataset has {len(ids)}")
    sessions = [ids[: spec.n_base].tolist()]
    for t in range(spec.T):
        lo = spec.n_base + t * spec.n_way
        sessions.append(ids[lo : lo + spec.n_way].tolist())

    rng = np.random.default_rng(seed)
    keep = np.ones(len(dataset.image_labels), dtype=bool)
    for session in sessions[1:]:
        for c in session:
            idx = dataset.indices([c], TRAIN)
            if len(idx) < spec.k_shot:
                raise DataError(f"class {c} has {len(idx)} train samples, need {spec.k_shot}")
            chosen = rng.choice(idx, size=spec.k_shot, replace=False)
            keep[np.setdiff1d(idx, chosen)] = False
    return replace(
        dataset,
        image_labels=dataset.image_labels[keep],
        image_split=dataset.image_split[keep],
        image_vecs=dataset.image_vecs[keep],
        sessions=sessions,
        k_shot=spec.k_shot,
        seed=seed,
    )


def validate_disjoint(dataset: EmbeddingDataset) -> list[tuple[int, int, int]]:
    """Every ``(class_id, session_a, session_b)`` where a class appears twice; empty if ok."""
    seen: dict[int, list[int]] = {}
    for s, classes in enumerate(dataset.sessions):
        for c in classes:
            seen.setdefault(int(c), []).append(s)
    out = []
    for c in sorted(seen):
        sess = seen[c]
        for i in range(len(sess)):
            for j in range(i + 1, len(sess)):
                out.append((c, sess[i], sess[j]))
    return out


# --- bundle IO ---


def _image_dtype(d: int) -> np.dtype:
    return np.dtype([("class_id", "<u4"), ("split", "u1"), ("vec", "<f4", (d,))])


def _text_dtype(M: int, d: int) -> np.dtype:
    return np.dtype([("class_id", "<u4"), ("vecs", "<f4", (M * d,))])


def _with_crc(payload: bytes) -> bytes:
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def image_bytes(ds: EmbeddingDataset) -> bytes:
    rec = np.empty(len(ds.image_labels), dtype=_image_dtype(ds.d_img))
    rec["class_id"] = ds.image_labels
    rec["split"] = ds.image_split
    rec["vec"] = ds.image_vecs
    head = MAGIC + struct.pack("<IIQ", VERSION, ds.d_img, len(rec))
    return _with_crc(head + rec.tobytes())


def text_bytes(ds: EmbeddingDataset) -> bytes:
    rec = np.empty(len(ds.text_class_ids), dtype=_text_dtype(ds.M, ds.d_txt))
    rec["class_id"] = ds.text_class_ids
    rec["vecs"] = ds.text_vecs.reshape(len(ds.text_class_ids), -1)
    head = MAGIC + struct.pack("<IIIQ", VERSION, ds.d_txt, ds.M, len(rec))
    return _with_crc(head + rec.tobytes())


def manifest(ds: EmbeddingDataset) -> dict:
    return {
        "version": VERSION,
        "d_img": ds.d_img,
        "d_txt": ds.d_txt,
        "M": ds.M,
        "class_names": list(ds.class_names),
        "sessions": [list(map(int, s)) for s in ds.sessions],
        "k_shot": ds.k_shot,
        "seed": ds.seed,
    }


def write_bundle(ds: EmbeddingDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "manifest.json").write_text(json.dumps(manifest(ds), indent=2, sort_keys=True) + "\n")
    (path / "images.bin").write_bytes(image_bytes(ds))
    (path / "text.bin").write_bytes(text_bytes(ds))
    return path


def _read_checked(file: Path) -> bytes:
    try:
        raw = file.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {file}: {e}") from e
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise BundleFormatError(f"{file.name}: bad magic")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise BundleFormatError(f"{file.name}: CRC32 mismatch")
    return body


def load_bundle(path) -> EmbeddingDataset:
    path = Path(path)
    try:
        meta = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read manifest in {path}: {e}") from e
    if meta.get("version") != VERSION:
        raise BundleFormatError(f"unsupported manifest version {meta.get('version')!r}")

    body = _read_checked(path / "images.bin")
    hsize = 4 + struct.calcsize("<IIQ")
    if len(body) < hsize:
        raise BundleFormatError("images.bin: truncated header")
    version, d_img, n = struct.unpack("<IIQ", body[4:hsize])
    if version != VERSION:
        raise BundleFormatError(f"images.bin: unsupported version {version}")
    dt = _image_dtype(d_img)
    if len(body) - hsize != n * dt.itemsize:
        raise BundleFormatError("images.bin: record count does not match file length")
    img = np.frombuffer(body, dtype=dt, count=n, offset=hsize)

    body = _read_checked(path / "text.bin")
    hsize = 4 + struct.calcsize("<IIIQ")
    if len(body) < hsize:
        raise BundleFormatError("text.bin: truncated header")
    version, d_txt, M, nc = struct.unpack("<IIIQ", body[4:hsize])
    if version != VERSION:
        raise BundleFormatError(f"text.bin: unsupported version {version}")
    dt = _text_dtype(M, d_txt)
    if len(body) - hsize != nc * dt.itemsize:
        raise BundleFormatError("text.bin: class count does not match file length")
    txt = np.frombuffer(body, dtype=dt, count=nc, offset=hsize)

    if (meta.get("d_img"), meta.get("d_txt"), meta.get("M")) != (d_img, d_txt, M):
        raise BundleFormatError("manifest dimensions disagree with binary headers")

    ds = EmbeddingDataset(
        d_img=int(d_img),
        d_txt=int(d_txt),
        M=int(M),
        image_labels=img["class_id"].astype(np.int64),
        image_split=img["split"].copy(),
        image_vecs=np.ascontiguousarray(img["vec"], dtype=np.float32),
        text_class_ids=txt["class_id"].astype(np.int64),
        text_vecs=np.ascontiguousarray(txt["vecs"], dtype=np.float32).reshape(nc, M, d_txt),
        class_names=list(meta.get("class_names", [])),
        sessions=[list(map(int, s)) for s in meta.get("sessions", [])],
        k_shot=int(meta.get("k_shot", 0)),
        seed=int(meta.get("seed", 0)),
    )
    if len(ds.class_names) != nc:
        raise BundleFormatError("manifest class_names length does not match text.bin")
    return ds
