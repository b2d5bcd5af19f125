"""Teacher model zoo, random teacher selection, and ensemble distillation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .distill import DistillConfig
from .errors import ContractError
from .networks import BlockSpec, TeacherModel, TrainHyper, pretrain_teacher
from .trainer import TrainResult, train


@dataclass
class ModelZoo:
    teachers: list[TeacherModel]
    provenance: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.teachers:
            raise ContractError("a model zoo needs at least one teacher")
        c = {t.spec.num_classes for t in self.teachers}
        b = {t.spec.num_blocks for t in self.teachers}
        if len(c) != 1:
            raise ContractError(f"teachers disagree on class count: {sorted(c)}")
        if len(b) != 1:
            raise ContractError(f"teachers disagree on block count: {sorted(b)}")
        if not all(t.frozen for t in self.teachers):
            raise ContractError("zoo teachers must be frozen")
        if not self.provenance:
            self.provenance = [dict(t.provenance) for t in self.teachers]

    def __len__(self) -> int:
        return len(self.teachers)

    def __getitem__(self, i) -> TeacherModel:
        return self.teachers[i]

    @property
    def num_blocks(self) -> int:
        return self.teachers[0].spec.num_blocks

    @property
    def num_classes(self) -> int:
        return self.teachers[0].spec.num_classes

    def hashes(self) -> list[str]:
        return [t.hash() for t in self.teachers]

    def head(self, n: int) -> "ModelZoo":
        return ModelZoo(self.teachers[:n], self.provenance[:n])


def build_zoo(specs: Sequence[BlockSpec], train_set: Dataset, val_set: Dataset,
              hypers: Sequence[TrainHyper] | TrainHyper) -> ModelZoo:
    """Pretrain one teacher per spec, in order."""
    if not specs:
        raise ContractError("build_zoo needs at least one spec")
    if isinstance(hypers, TrainHyper):
        hypers = [hypers] * len(specs)
    if len(hypers) != len(specs):
        raise ContractError(f"{len(hypers)} hyperparameter sets for {len(specs)} specs")
    if len({s.num_classes for s in specs}) != 1:
        raise ContractError("all zoo specs must share the class count")
    if len({s.num_blocks for s in specs}) != 1:
        raise ContractError("all zoo specs must share the block count")
    teachers = [pretrain_teacher(s, train_set, val_set, h) for s, h in zip(specs, hypers)]
    prov = [{"spec": s.to_dict(), "seed": h.seed, "epochs": h.epochs} for s, h in zip(specs, hypers)]
    return ModelZoo(teachers, prov)


def select_index(zoo: ModelZoo | Sequence, rng: np.random.Generator) -> int:
    n = len(zoo)
    if n == 0:
        raise ContractError("cannot select from an empty zoo")
    return int(rng.integers(n))


def select_teacher(zoo: ModelZoo, rng: np.random.Generator) -> TeacherModel:
    """Uniform random draw; advances ``rng``."""
    return zoo[select_index(zoo, rng)]


def zoo_provider(zoo: ModelZoo):
    def provide(rng):
        i = select_index(zoo, rng)
        return i, zoo[i]
    return provide


def distill_ensemble(zoo: ModelZoo, student_spec: BlockSpec, train_set: Dataset, val_set: Dataset,
                     cfg: DistillConfig, hyper: TrainHyper, sink=None) -> TrainResult:
    """Distil the zoo into one student, drawing a random teacher each iteration."""
    if student_spec.num_blocks != zoo.num_blocks:
        raise ContractError(f"student has {student_spec.num_blocks} blocks, zoo has {zoo.num_blocks}")
    if student_spec.num_classes != zoo.num_classes:
        raise ContractError(f"student has {student_spec.num_classes} classes, zoo has {zoo.num_classes}")
    return train(student_spec, zoo_provider(zoo), train_set, val_set, cfg, hyper, sink=sink)


def traditional_ensemble_predict(zoo: ModelZoo, batch: np.ndarray) -> np.ndarray:
    """Average of the teachers' probability outputs."""
    if len(zoo) == 0:
        raise ContractError("empty zoo")
    probs = [t.network.predict_proba(batch) for t in zoo.teachers]
    return np.mean(probs, axis=0)


def ensemble_size_sweep(zoo: ModelZoo, student_spec: BlockSpec, train_set: Dataset, val_set: Dataset,
                        cfg: DistillConfig, hyper: TrainHyper, sizes: Sequence[int]) -> dict[int, TrainResult]:
    """One distillation run per zoo prefix size."""
    out = {}
    for n in sizes:
        if not 1 <= n <= len(zoo):
            raise ContractError(f"ensemble size {n} outside [1, {len(zoo)}]")
        out[n] = distill_ensemble(zoo.head(n), student_spec, train_set, val_set, cfg, hyper)
    return out
