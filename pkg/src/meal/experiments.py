"""Desk-scale experiment protocols: ensemble benefit, loss ablation, noisy-label refinement.

Every protocol uses the same task: a 4-class, 2-D mix of spiral arms and
overlapping blobs, with separate seeded draws for train, validation and test.
Baselines are one-hot students with the same architecture, init seed, batch
order and epoch budget as the distilled student they are compared with.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, gen_synthetic
from .distill import DistillConfig
from .ensemble import ModelZoo, build_zoo, distill_ensemble, traditional_ensemble_predict
from .errors import ContractError
from .networks import BlockSpec, TrainHyper, accuracy, evaluate, pretrain_teacher
from .noisy import NoiseSpec, inject_noise, iterative_refine
from .trainer import train

DESK_CLASSES = 4
DESK_DIM = 2

# diverse widths and depths-within-block, all with three blocks
ZOO_BLOCKS = (
    ((64, 64), (64,), (64,)),
    ((48,), (48, 48), (32,)),
    ((96,), (64,), (48,)),
    ((64,), (64,), (64, 64)),
)
STUDENT_BLOCKS = ((32,), (32,), (32,))
ABLATION_BLOCKS = ((64,), (64,), (32,))

TEACHER_EPOCHS = 100
STUDENT_EPOCHS = 20


@dataclass
class DeskTask:
    train: Dataset
    val: Dataset
    test: Dataset
    seed: int


def desk_task(seed: int, n: int = 2000, n_val: int = 500, n_test: int = 4000,
              kind: str = "mixed") -> DeskTask:
    return DeskTask(
        gen_synthetic(kind, n, DESK_CLASSES, DESK_DIM, seed),
        gen_synthetic(kind, n_val, DESK_CLASSES, DESK_DIM, seed + 1000),
        gen_synthetic(kind, n_test, DESK_CLASSES, DESK_DIM, seed + 2000),
        seed,
    )


def desk_spec(blocks) -> BlockSpec:
    return BlockSpec(DESK_DIM, blocks, DESK_CLASSES)


def desk_zoo(task: DeskTask, train_set: Dataset | None = None, size: int = 4,
             epochs: int = TEACHER_EPOCHS) -> ModelZoo:
    if not 1 <= size <= len(ZOO_BLOCKS):
        raise ContractError(f"zoo size must lie in [1, {len(ZOO_BLOCKS)}], got {size}")
    specs = [desk_spec(b) for b in ZOO_BLOCKS[:size]]
    hypers = [TrainHyper(epochs=epochs, seed=100 * task.seed + i) for i in range(size)]
    return build_zoo(specs, train_set or task.train, task.val, hypers)


# ---------------------------------------------------------------- ensemble benefit


@dataclass
class EnsembleRecord:
    seed: int
    teachers: list[float]
    traditional: float
    baseline: float
    student: float

    @property
    def win(self) -> bool:
        return self.student >= self.baseline


def run_ensemble_benefit(seeds: Sequence[int], zoo_size: int = 4, student_epochs: int = STUDENT_EPOCHS,
                         teacher_epochs: int = TEACHER_EPOCHS, cfg: DistillConfig | None = None,
                         report: Callable[[str], None] | None = None) -> list[EnsembleRecord]:
    """Joint CE + intermediate + adversarial student from a diverse zoo vs. a one-hot student."""
    cfg = cfg or DistillConfig(strategy="joint")
    student = desk_spec(STUDENT_BLOCKS)
    out = []
    for seed in seeds:
        task = desk_task(seed)
        zoo = desk_zoo(task, size=zoo_size, epochs=teacher_epochs)
        hyper = TrainHyper(epochs=student_epochs, seed=seed)
        base = pretrain_teacher(student, task.train, task.val, hyper)
        res = distill_ensemble(zoo, student, task.train, task.val, cfg, hyper)
        trad = 1.0 - evaluate(lambda x: traditional_ensemble_predict(zoo, x), task.test)
        rec = EnsembleRecord(seed, [accuracy(t, task.test) for t in zoo.teachers], trad,
                             accuracy(base, task.test), accuracy(res.student, task.test))
        out.append(rec)
        if report:
            report(f"seed {seed}: baseline {rec.baseline:.4f} student {rec.student:.4f} "
                   f"traditional {rec.traditional:.4f}")
    return out


# ---------------------------------------------------------------- ablation


@dataclass(frozen=True)
class AblationRow:
    name: str
    metric: str | None  # None marks the one-hot baseline
    intermediate: bool = False
    adversarial: bool = False

    def config(self, base: DistillConfig | None = None) -> DistillConfig:
        if self.metric is None:
            raise ContractError("the baseline row has no distillation config")
        return (base or DistillConfig()).replace(metric=self.metric, use_intermediate=self.intermediate,
                                                 use_adversarial=self.adversarial)

    def to_dict(self) -> dict:
        return {"name": self.name, "metric": self.metric, "intermediate": self.intermediate,
                "adversarial": self.adversarial}

    @classmethod
    def from_dict(cls, d: dict) -> "AblationRow":
        unknown = set(d) - {"name", "metric", "intermediate", "adversarial"}
        if unknown:
            raise ContractError(f"unknown ablation row keys: {sorted(unknown)}")
        return cls(str(d["name"]), d.get("metric"), bool(d.get("intermediate", False)),
                   bool(d.get("adversarial", False)))


ABLATION_ROWS = (
    AblationRow("base", None),
    AblationRow("l1", "l1"),
    AblationRow("l2", "l2"),
    AblationRow("ce", "ce"),
    AblationRow("ce+int", "ce", intermediate=True),
    AblationRow("l2+int", "l2", intermediate=True),
    AblationRow("ce+int+adv", "ce", intermediate=True, adversarial=True),
    AblationRow("l1+int+adv", "l1", intermediate=True, adversarial=True),
)


@dataclass
class AblationReport:
    rows: list[AblationRow]
    seeds: list[int]
    accuracy: dict[str, list[float]] = field(default_factory=dict)

    def mean(self, name: str) -> float:
        return float(np.mean(self.accuracy[name]))

    def lines(self) -> list[str]:
        return [f"{r.name:<12s} {self.mean(r.name):.4f}  " + " ".join(f"{a:.4f}" for a in self.accuracy[r.name])
                for r in self.rows]


def run_ablation(seeds: Sequence[int], rows: Sequence[AblationRow] = ABLATION_ROWS,
                 blocks=ABLATION_BLOCKS, teacher_epochs: int = TEACHER_EPOCHS,
                 student_epochs: int = STUDENT_EPOCHS, base_cfg: DistillConfig | None = None,
                 on_result: Callable[[AblationRow, int, float], None] | None = None) -> AblationReport:
    """One converged teacher per seed; every row distils a student of the same architecture."""
    spec = desk_spec(blocks)
    rep = AblationReport(list(rows), list(seeds), {r.name: [] for r in rows})
    for seed in seeds:
        task = desk_task(seed)
        teacher = pretrain_teacher(spec, task.train, task.val, TrainHyper(epochs=teacher_epochs, seed=1000 + seed))
        hyper = TrainHyper(epochs=student_epochs, seed=seed)
        for row in rows:
            if row.metric is None:
                model = pretrain_teacher(spec, task.train, task.val, hyper)
            else:
                model = train(spec, teacher, task.train, task.val, row.config(base_cfg), hyper).student
            acc = accuracy(model, task.test)
            rep.accuracy[row.name].append(acc)
            if on_result:
                on_result(row, seed, acc)
    return rep


# ---------------------------------------------------------------- noisy labels


@dataclass
class NoisyRecord:
    seed: int
    sequence: list[float]  # base model, then each round's student

    @property
    def baseline(self) -> float:
        return self.sequence[0]

    @property
    def refined(self) -> float:
        return self.sequence[-1]

    @property
    def gains(self) -> list[float]:
        return [b - a for a, b in zip(self.sequence, self.sequence[1:])]

    @property
    def gains_non_increasing(self) -> bool:
        g = self.gains
        return all(a >= b for a, b in zip(g, g[1:]))


def run_noisy_refinement(seeds: Sequence[int], rate: float = 0.3, rounds: int = 1, zoo_size: int = 4,
                         base_index: int = 0, epochs: int = TEACHER_EPOCHS, cfg: DistillConfig | None = None,
                         report: Callable[[str], None] | None = None) -> list[NoisyRecord]:
    """Refine a student that re-trains zoo member ``base_index`` as itself.

    The zoo is pretrained one-hot on noisy labels; validation and test stay clean.
    The base model (that member) is the one-hot baseline, and every student has
    its architecture and its epoch budget.
    """
    cfg = cfg or DistillConfig(strategy="joint")
    if not 0 <= base_index < zoo_size:
        raise ContractError(f"base_index {base_index} outside the zoo of {zoo_size}")
    student = desk_spec(ZOO_BLOCKS[base_index])
    out = []
    for seed in seeds:
        task = desk_task(seed)
        noisy, _ = inject_noise(task.train, NoiseSpec(rate, seed=seed + 3000))
        zoo = desk_zoo(task, noisy, size=zoo_size, epochs=epochs)
        res = iterative_refine(zoo, student, noisy, task.val, rounds, cfg, TrainHyper(epochs=epochs, seed=seed))
        seq = [accuracy(zoo[base_index], task.test)] + [accuracy(r.best.student, task.test) for r in res.rounds]
        rec = NoisyRecord(seed, seq)
        out.append(rec)
        if report:
            report(f"seed {seed}: " + " ".join(f"{a:.4f}" for a in seq))
    return out
