"""Student training against frozen teachers and stacked discriminators.

Two update strategies:

* alternate: k discriminator ascent steps with the student detached, then one
  student descent step with the discriminators detached.
* joint: a single backward pass through ``alpha*sim + beta*sum_j w_j*(-L_GAN^j)``
  where the student branch into each discriminator passes a gradient-reversal
  node, so the discriminators descend their cross-entropy while the student
  descends ``log(1 - D(student))``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from . import tensor as T
from .data import Dataset, StepMetrics
from .distill import (
    DiscriminatorSet,
    DistillConfig,
    discriminator_forward,
    intermediate_sim_loss,
    pool_stage,
    stage_input_widths,
    stage_outputs,
    student_adv_term,
)
from .errors import ContractError, DataError
from .networks import SGD, BlockNetwork, BlockSpec, TeacherModel, TrainHyper, evaluate, minibatches
from .tensor import Tape

log = logging.getLogger(__name__)

TeacherProvider = Callable[[np.random.Generator], "tuple[int, TeacherModel]"]


@dataclass
class TrainState:
    student: BlockNetwork
    discs: DiscriminatorSet
    opt_student: SGD
    opt_disc: SGD
    cfg: DistillConfig
    batch_rng: np.random.Generator
    teacher_rng: np.random.Generator
    iteration: int = 0

    @classmethod
    def create(cls, spec: BlockSpec, cfg: DistillConfig, hyper: TrainHyper) -> "TrainState":
        # same init and batch order as a one-hot run with the same seed
        student = BlockNetwork.init(spec, hyper.seed)
        cfg.weights(spec.num_blocks)
        widths = stage_input_widths(spec.num_blocks, spec.num_classes, cfg)
        for w in spec.block_widths[: len(widths) - 1]:
            if w < cfg.pool_length:
                raise ContractError(f"block width {w} is below the pooled length {cfg.pool_length}")
        discs = DiscriminatorSet.init(widths, cfg.disc_hidden, [hyper.seed, 3])
        return cls(
            student=student,
            discs=discs,
            opt_student=SGD(student.params.flat(), hyper.lr, hyper.momentum),
            opt_disc=SGD(discs.params(), hyper.lr, hyper.momentum),
            cfg=cfg,
            batch_rng=np.random.default_rng([hyper.seed, 1]),
            teacher_rng=np.random.default_rng([hyper.seed, 2]),
        )


def _teacher_stages(teacher: TeacherModel, x: np.ndarray, cfg: DistillConfig):
    out = teacher.network.forward(x)
    stages = [s.detach() for s in stage_outputs(out, cfg)]
    n = len(stages)
    pooled = [pool_stage(s, cfg, j == n - 1) for j, s in enumerate(stages)]
    return stages, pooled


def _check_batch(batch: np.ndarray) -> None:
    if not np.all(np.isfinite(batch)):
        raise DataError("batch contains NaN or infinite features")


def _check_pairing(state: TrainState, teacher: TeacherModel) -> None:
    if not teacher.frozen:
        raise ContractError("teacher must be frozen during distillation")
    s, t = state.student.spec, teacher.spec
    if s.num_blocks != t.num_blocks or s.num_classes != t.num_classes:
        raise ContractError(
            f"teacher ({t.num_blocks} blocks, {t.num_classes} classes) does not pair with "
            f"student ({s.num_blocks} blocks, {s.num_classes} classes)")


def _disc_pass(state, t_pooled, s_stages, active, link=None, detach_params=False):
    """Per-stage (adv, gan) tensors; inactive stages give None."""
    cfg = state.cfg
    n = len(s_stages)
    advs, gans = [], []
    for j, disc in enumerate(state.discs):
        if not active[j]:
            advs.append(None)
            gans.append(None)
            continue
        fs = pool_stage(s_stages[j], cfg, j == n - 1)
        d_real, d_fake = discriminator_forward(disc, t_pooled[j], fs, cfg.disc_input, link, detach_params)
        adv = student_adv_term(d_fake)
        advs.append(adv)
        gans.append(T.add(T.mean(T.log(d_real)), adv))
    return advs, gans


def _vals(ts) -> list[float]:
    return [0.0 if t is None else t.item() for t in ts]


def alternate_step(state: TrainState, teacher: TeacherModel, batch: np.ndarray, teacher_id: int = 0) -> StepMetrics:
    """k discriminator updates, then one student update. Mutates ``state``."""
    cfg = state.cfg
    _check_pairing(state, teacher)
    _check_batch(batch)
    spec = state.student.spec
    weights = cfg.weights(spec.num_blocks)
    active = cfg.active_stages(spec.num_blocks)
    t_stages, t_pooled = _teacher_stages(teacher, batch, cfg)

    if cfg.use_adversarial:
        # no tape is active here, so this forward records nothing
        s_fixed = [s.detach() for s in stage_outputs(state.student.forward(batch), cfg)]
        for _ in range(cfg.k):
            with Tape() as tape:
                _, gans = _disc_pass(state, t_pooled, s_fixed, active)
                obj = None
                for g in gans:
                    if g is not None:
                        obj = T.scale(g, -1.0) if obj is None else T.sub(obj, g)
                T.backward(tape, obj)
            state.opt_disc.step()

    with Tape() as tape:
        s_out = state.student.forward(batch)
        sim = intermediate_sim_loss(t_stages, stage_outputs(s_out, cfg), cfg)
        loss = T.scale(sim.total, cfg.alpha)
        advs = gans = [None] * len(weights)
        if cfg.use_adversarial:
            advs, gans = _disc_pass(state, t_pooled, stage_outputs(s_out, cfg), active, detach_params=True)
            for w, a in zip(weights, advs):
                if a is not None:
                    loss = T.add(loss, T.scale(a, cfg.beta * w))
        T.backward(tape, loss)
    state.opt_student.step()
    state.iteration += 1
    return StepMetrics(state.iteration, teacher_id, _vals(sim.per_stage), _vals(advs), _vals(gans),
                       _student_total(cfg, sim.total, advs, weights))


def joint_step(state: TrainState, teacher: TeacherModel, batch: np.ndarray, teacher_id: int = 0) -> StepMetrics:
    """One backward pass updating student and discriminators together. Mutates ``state``."""
    cfg = state.cfg
    _check_pairing(state, teacher)
    _check_batch(batch)
    spec = state.student.spec
    weights = cfg.weights(spec.num_blocks)
    active = cfg.active_stages(spec.num_blocks)
    t_stages, t_pooled = _teacher_stages(teacher, batch, cfg)

    def link(s):
        return T.grad_reverse(s, cfg.reversal_multiplier)

    with Tape() as tape:
        s_out = state.student.forward(batch)
        s_stages = stage_outputs(s_out, cfg)
        sim = intermediate_sim_loss(t_stages, s_stages, cfg)
        loss = T.scale(sim.total, cfg.alpha)
        advs = gans = [None] * len(weights)
        if cfg.use_adversarial:
            advs, gans = _disc_pass(state, t_pooled, s_stages, active, link=link)
            for w, g in zip(weights, gans):
                if g is not None:
                    loss = T.add(loss, T.scale(g, -cfg.beta * w))
        T.backward(tape, loss)
    state.opt_student.step()
    if cfg.use_adversarial:
        state.opt_disc.step()
    state.iteration += 1
    return StepMetrics(state.iteration, teacher_id, _vals(sim.per_stage), _vals(advs), _vals(gans),
                       _student_total(cfg, sim.total, advs, weights))


def _student_total(cfg, sim, advs, weights) -> float:
    out = cfg.alpha * sim.item()
    for w, a in zip(weights, advs):
        if a is not None:
            out += cfg.beta * w * a.item()
    return out


def single_teacher(teacher: TeacherModel) -> TeacherProvider:
    return lambda rng: (0, teacher)


@dataclass
class TrainResult:
    student: BlockNetwork
    history: list[StepMetrics] = field(default_factory=list)
    best_val_accuracy: float = 0.0
    best_iteration: int = 0
    val_curve: list[tuple[int, float]] = field(default_factory=list)


def train(student_spec: BlockSpec, teacher_provider: Union[TeacherProvider, TeacherModel],
          train_set: Dataset, val_set: Dataset, cfg: DistillConfig, hyper: TrainHyper,
          sink=None, topk: int = 3) -> TrainResult:
    """Run ``hyper.epochs`` epochs of distillation; return the best-validation student.

    A teacher is drawn from ``teacher_provider`` for every minibatch. Validation
    top-1 accuracy is measured at initialization and after each epoch; ties keep
    the earlier snapshot. ``sink`` receives one StepMetrics per iteration.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("training and validation sets must be non-empty")
    if isinstance(teacher_provider, TeacherModel):
        teacher_provider = single_teacher(teacher_provider)
    state = TrainState.create(student_spec, cfg, hyper)
    step = joint_step if cfg.strategy == "joint" else alternate_step
    k = min(topk, student_spec.num_classes)

    best_acc = 1.0 - evaluate(state.student, val_set, 1)
    best = state.student.copy()
    result = TrainResult(best, best_val_accuracy=best_acc, val_curve=[(0, best_acc)])
    n_batches = -(-len(train_set) // hyper.batch_size)
    for epoch in range(hyper.epochs):
        for b, idx in enumerate(minibatches(len(train_set), hyper.batch_size, state.batch_rng)):
            tid, teacher = teacher_provider(state.teacher_rng)
            metrics = step(state, teacher, train_set.features[idx], tid)
            if b == n_batches - 1:
                top1 = evaluate(state.student, val_set, 1)
                metrics.val_top1_error = top1
                metrics.val_topk_error = evaluate(state.student, val_set, k)
                acc = 1.0 - top1
                result.val_curve.append((state.iteration, acc))
                if acc > best_acc:
                    best_acc = acc
                    result.best_iteration = state.iteration
                    result.student = state.student.copy()
            result.history.append(metrics)
            if sink is not None:
                sink.write(metrics) if hasattr(sink, "write") else sink(metrics)
        log.debug("epoch %d: val acc %.4f", epoch, result.val_curve[-1][1])
    result.best_val_accuracy = best_acc
    return result
