"""Synthetic label noise and iterative teacher refinement."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .distill import DistillConfig
from .ensemble import ModelZoo, distill_ensemble
from .errors import ContractError
from .networks import BlockNetwork, BlockSpec, TeacherModel, TrainHyper
from .trainer import TrainResult


@dataclass(frozen=True)
class NoiseSpec:
    rate: float
    seed: int = 0
    kind: str = "uniform"

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ContractError(f"noise rate must lie in [0, 1], got {self.rate}")
        if self.kind != "uniform":
            raise ContractError(f"unsupported noise kind {self.kind!r}")


def inject_noise(dataset: Dataset, spec: NoiseSpec) -> tuple[Dataset, np.ndarray]:
    """Flip exactly floor(rate * N) labels, each to a different class drawn uniformly.

    Returns the corrupted dataset and the boolean mask of flipped rows.
    """
    n, c = len(dataset), dataset.num_classes
    count = int(np.floor(spec.rate * n))
    mask = np.zeros(n, dtype=bool)
    if count == 0:
        return dataset.with_labels(dataset.labels.copy()), mask
    if c < 2:
        raise ContractError("label noise needs at least two classes")
    rng = np.random.default_rng(spec.seed)
    idx = rng.choice(n, size=count, replace=False)
    labels = dataset.labels.copy()
    # offset in [1, C-1] keeps the new label different from the old one
    labels[idx] = (labels[idx] + rng.integers(1, c, size=count)) % c
    mask[idx] = True
    return dataset.with_labels(labels), mask


@dataclass
class RoundResult:
    round: int
    zoo_size: int
    results: list[TrainResult]

    @property
    def best(self) -> TrainResult:
        # ties go to the earlier run
        return max(self.results, key=lambda r: (r.best_val_accuracy, -self.results.index(r)))


@dataclass
class RefineResult:
    student: BlockNetwork
    rounds: list[RoundResult] = field(default_factory=list)


def as_teacher(result: TrainResult, round_index: int, seed: int) -> TeacherModel:
    net = BlockNetwork(result.student.spec, result.student.params.frozen())
    return TeacherModel(net, result.best_val_accuracy, frozen=True,
                        provenance={"spec": net.spec.to_dict(), "seed": seed, "round": round_index})


def iterative_refine(zoo: ModelZoo, student_spec: BlockSpec, noisy_train: Dataset, clean_val: Dataset,
                     rounds: int, cfg: DistillConfig, hyper: TrainHyper,
                     students_per_round: int = 1) -> RefineResult:
    """Round 0 distils the given zoo; each later round distils fresh students from
    the previous round's output, which replaces the zoo entirely.

    With ``students_per_round=1`` the next zoo is the single best-validation
    student. Larger values train that many students per round (seeds offset by
    1000 * i) and carry all of them forward.
    """
    if rounds < 0:
        raise ContractError(f"rounds must be >= 0, got {rounds}")
    if students_per_round < 1:
        raise ContractError("students_per_round must be >= 1")
    history = []
    current = zoo
    for r in range(rounds + 1):
        results = []
        for i in range(students_per_round):
            h = replace(hyper, seed=hyper.seed + r + 1000 * i)
            results.append(distill_ensemble(current, student_spec, noisy_train, clean_val, cfg, h))
        rr = RoundResult(r, len(current), results)
        history.append(rr)
        if students_per_round == 1:
            teachers = [as_teacher(results[0], r, hyper.seed + r)]
        else:
            teachers = [as_teacher(res, r, hyper.seed + r + 1000 * i) for i, res in enumerate(results)]
        current = ModelZoo(teachers)
    return RefineResult(history[-1].best.student, history)
