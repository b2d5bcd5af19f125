"""Datasets, synthetic generators, CSV loading, checkpoints, metrics sinks."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, TextIO

import numpy as np

from .errors import ContractError, DataError, IntegrityError
from .networks import BlockNetwork, BlockSpec, NetworkParams, TeacherModel, _probs_of
from .tensor import Tensor

CKPT_MAGIC = "MEAL-CKPT 1"


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    soft_labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"features must be N x d, got shape {self.features.shape}")
        n = self.features.shape[0]
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain NaN or infinite values")
        if n < 1:
            raise DataError("a dataset needs at least one row")
        if self.labels.shape != (n,):
            raise DataError(f"expected {n} labels, got shape {self.labels.shape}")
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= self.num_classes))
        if bad.size:
            raise DataError(f"label {self.labels[bad[0]]} at row {bad[0]} outside [0, {self.num_classes})")
        if self.soft_labels is not None:
            s = np.asarray(self.soft_labels, dtype=np.float64)
            if s.shape != (n, self.num_classes):
                raise DataError(f"soft labels must be {n} x {self.num_classes}, got {s.shape}")
            if np.any(np.abs(s.sum(axis=1) - 1.0) > 1e-9) or np.any(s < 0):
                raise DataError("soft label rows must be probability vectors")
            self.soft_labels = s

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        soft = None if self.soft_labels is None else self.soft_labels[idx]
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, soft)

    def with_labels(self, labels: np.ndarray) -> "Dataset":
        return Dataset(self.features, labels, self.num_classes, self.soft_labels)

    def split(self, fractions: tuple[float, ...], seed: int) -> list["Dataset"]:
        """Seeded shuffle then cut into consecutive parts; the last part takes the rest."""
        order = np.random.default_rng(seed).permutation(len(self))
        parts, start = [], 0
        for f in fractions:
            stop = start + int(round(f * len(self)))
            parts.append(self.subset(order[start:stop]))
            start = stop
        parts.append(self.subset(order[start:]))
        return parts


# ---------------------------------------------------------------- synthetic data


def _blobs(n, c, d, rng, separation, sigma=1.0):
    centers = blob_centers(c, d, separation * sigma)
    labels = np.arange(n) % c
    x = centers[labels] + sigma * rng.standard_normal((n, d))
    return x, labels


def blob_centers(c: int, d: int, spacing: float) -> np.ndarray:
    """Class centers with nearest-neighbour distance ``spacing``.

    With d >= c the centers sit on scaled basis vectors (all pairs equidistant);
    otherwise on a circle in the first two coordinates.
    """
    centers = np.zeros((c, d))
    if c == 1:
        return centers
    if d >= c:
        centers[np.arange(c), np.arange(c)] = spacing / np.sqrt(2.0)
        return centers - centers.mean(axis=0)
    if d == 1:
        centers[:, 0] = spacing * (np.arange(c) - (c - 1) / 2)
        return centers
    radius = spacing / (2.0 * np.sin(np.pi / c))
    angle = 2 * np.pi * np.arange(c) / c
    centers[:, 0] = radius * np.cos(angle)
    centers[:, 1] = radius * np.sin(angle)
    return centers


def _spirals(n, c, d, rng, noise=0.2, turns=1.25):
    labels = np.arange(n) % c
    t = np.sqrt(rng.uniform(0.05, 1.0, n))
    angle = 2 * np.pi * (labels / c + turns * t)
    radius = 4.0 * t
    x = np.zeros((n, d))
    x[:, 0] = radius * np.cos(angle)
    x[:, 1] = radius * np.sin(angle)
    x[:, :2] += noise * rng.standard_normal((n, 2))
    if d > 2:
        x[:, 2:] = rng.standard_normal((n, d - 2))
    return x, labels


def gen_synthetic(kind: str, n: int, num_classes: int, dim: int, seed: int,
                  separation: float = 6.0, noise: float = 0.2) -> Dataset:
    """Seeded toy classification data.

    ``blobs``: Gaussian clusters whose nearest centers are ``separation`` sigmas apart.
    ``spirals``: interleaved arms in the first two coordinates (needs dim >= 2).
    ``mixed``: half the points from each generator, sharing labels, so every class
    has a spiral arm and an overlapping cluster.
    """
    if n < num_classes or num_classes < 1 or dim < 1:
        raise ContractError(f"need n >= C >= 1 and dim >= 1, got n={n}, C={num_classes}, dim={dim}")
    rng = np.random.default_rng(seed)
    if kind == "blobs":
        x, y = _blobs(n, num_classes, dim, rng, separation)
    elif kind in ("spirals", "mixed"):
        if dim < 2:
            raise ContractError(f"{kind} needs dim >= 2")
        if kind == "spirals":
            x, y = _spirals(n, num_classes, dim, rng, noise)
        else:
            half = n // 2
            xs, ys = _spirals(n - half, num_classes, dim, rng, noise)
            xb, yb = _blobs(half, num_classes, dim, rng, separation, sigma=0.6)
            x, y = np.concatenate([xs, xb]), np.concatenate([ys, yb])
    else:
        raise ContractError(f"unknown synthetic kind {kind!r}")
    order = rng.permutation(n)
    return Dataset(x[order], y[order], num_classes)


# ---------------------------------------------------------------- CSV


def load_csv(path: str | os.PathLike, num_classes: int) -> Dataset:
    """Comma-separated rows of features followed by an integer label; no header, no quoting."""
    rows, labels = [], []
    width = None
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 2:
                raise DataError(f"{path}:{lineno}: expected features and a label")
            try:
                feats = [float(p) for p in parts[:-1]]
                label = int(parts[-1])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if width is None:
                width = len(feats)
            elif len(feats) != width:
                raise DataError(f"{path}:{lineno}: expected {width} features, got {len(feats)}")
            if not 0 <= label < num_classes:
                raise DataError(f"{path}:{lineno}: label {label} outside [0, {num_classes})")
            if not np.all(np.isfinite(feats)):
                raise DataError(f"{path}:{lineno}: non-finite feature")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(rows), np.array(labels), num_classes)


def save_csv(dataset: Dataset, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        for x, y in zip(dataset.features, dataset.labels):
            fh.write(",".join(repr(float(v)) for v in x) + f",{int(y)}\n")


# ---------------------------------------------------------------- checkpoints
#
# Layout: "MEAL-CKPT 1\n", "<header byte length>\n", a JSON header, then the
# payload of little-endian float64 arrays in declared order. Array offsets in
# the header are absolute file offsets.


def save_checkpoint(model: BlockNetwork | TeacherModel, path: str | os.PathLike,
                    meta: dict | None = None) -> None:
    teacher = model if isinstance(model, TeacherModel) else None
    net = model.network if teacher else model
    arrays = [(name, np.ascontiguousarray(t.values, dtype="<f8")) for name, t in net.params.named()]
    header: dict[str, Any] = {
        "format": CKPT_MAGIC,
        "spec": net.spec.to_dict(),
        "meta": meta or {},
        "teacher": None if teacher is None else {
            "val_accuracy": teacher.val_accuracy,
            "frozen": teacher.frozen,
            "provenance": teacher.provenance,
        },
        "arrays": [],
    }
    entries = []
    offset = 0
    for name, arr in arrays:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    payload = b"".join(arr.tobytes() for _, arr in arrays)
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()

    # absolute offsets depend on the header length, which depends on the offsets
    base = 0
    while True:
        header["arrays"] = [dict(e, offset=e["offset"] + base) for e in entries]
        header["payload_offset"] = base
        text = json.dumps(header, sort_keys=True).encode()
        prefix = f"{CKPT_MAGIC}\n{len(text)}\n".encode()
        new_base = len(prefix) + len(text)
        if new_base == base:
            break
        base = new_base
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(prefix + text + payload)


def read_checkpoint_header(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        magic = fh.readline().decode(errors="replace").strip()
        if magic != CKPT_MAGIC:
            raise IntegrityError(f"{path}: not a checkpoint (magic {magic!r})")
        try:
            size = int(fh.readline())
            header = json.loads(fh.read(size))
        except (ValueError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"{path}: corrupt header: {exc}") from None
    return header


def load_checkpoint(path: str | os.PathLike) -> BlockNetwork | TeacherModel:
    try:
        header = read_checkpoint_header(path)
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    spec = BlockSpec.from_dict(header["spec"])
    start = header["payload_offset"]
    total = sum(e["nbytes"] for e in header["arrays"])
    if len(blob) < start + total:
        raise IntegrityError(f"{path}: payload truncated ({len(blob) - start} of {total} bytes)")
    if hashlib.sha256(blob[start:start + total]).hexdigest() != header["payload_sha256"]:
        raise IntegrityError(f"{path}: payload checksum mismatch")
    tensors = {}
    for e in header["arrays"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)

    teacher_info = header.get("teacher")
    frozen = teacher_info is not None and teacher_info.get("frozen", True)

    def t(name):
        if name not in tensors:
            raise IntegrityError(f"{path}: missing array {name}")
        return Tensor(tensors[name], requires_grad=not frozen)

    blocks = [[(t(f"block{j}.layer{i}.weight"), t(f"block{j}.layer{i}.bias")) for i in range(len(b))]
              for j, b in enumerate(spec.blocks)]
    net = BlockNetwork(spec, NetworkParams(blocks, (t("head.weight"), t("head.bias"))))
    if teacher_info is None:
        return net
    return TeacherModel(net, float(teacher_info["val_accuracy"]), bool(teacher_info["frozen"]),
                        teacher_info.get("provenance") or {})


# ---------------------------------------------------------------- metrics


@dataclass
class StepMetrics:
    iteration: int
    teacher_id: int
    sim: list[float]
    adv: list[float]
    gan: list[float]
    total: float
    val_top1_error: float | None = None
    val_topk_error: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class MetricsWriter:
    """Append-only JSON-lines sink. The first record echoes the resolved config."""

    def __init__(self, path: str | os.PathLike, config: dict | None = None):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh: TextIO = open(self.path, "w")
        except OSError as exc:
            raise DataError(f"{path}: {exc.strerror}") from None
        if config is not None:
            self.write({"type": "config", **config})

    def write(self, record) -> None:
        if isinstance(record, StepMetrics):
            record = {"type": "step", **record.to_dict()}
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __call__(self, record) -> None:
        self.write(record)

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_metrics(sink, record) -> None:
    sink.write(record)


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- diversity export


def diversity_points(model_a, model_b, dataset: Dataset, reduce: str = "max") -> np.ndarray:
    """C x 2 array: per class, the largest (or mean) probability each model assigns to it."""
    pa = _probs_of(model_a, dataset.features)
    pb = _probs_of(model_b, dataset.features)
    if pa.shape != pb.shape:
        raise ContractError(f"models disagree on output shape: {pa.shape} vs {pb.shape}")
    if reduce == "mean":
        return np.stack([pa.mean(axis=0), pb.mean(axis=0)], axis=1)
    if reduce == "max":
        return np.stack([pa.max(axis=0), pb.max(axis=0)], axis=1)
    raise ContractError(f"unknown reduction {reduce!r}")


def export_diversity(model_a, model_b, dataset: Dataset, path: str | os.PathLike,
                     reduce: str = "max") -> np.ndarray:
    """Write ``class,p_a,p_b`` rows for a bubble/scatter plot of two models' outputs."""
    pts = diversity_points(model_a, model_b, dataset, reduce)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "p_a", "p_b"])
            for k, (a, b) in enumerate(pts):
                w.writerow([k, repr(float(a)), repr(float(b))])
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    return pts
