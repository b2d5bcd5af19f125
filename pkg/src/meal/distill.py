"""Distillation losses: similarity metrics, pooled alignment, stacked discriminators.

A network with B blocks exposes B alignment stages by default: the last
activation of blocks 1..B-1, plus the final probability vector. Setting
``align_last_hidden`` also aligns block B's activation (B + 1 stages).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .networks import ForwardOutput, dense_init
from .tensor import Tensor

METRICS = ("l1", "l2", "kl", "ce")

# Per-stage weights by stage count; later stages weigh more.
DEFAULT_BLOCK_WEIGHTS = {
    1: (1.0,),
    2: (0.05, 1.0),
    3: (0.01, 0.05, 1.0),
    4: (0.01, 0.05, 0.1, 1.0),
    5: (0.001, 0.01, 0.05, 0.1, 1.0),
}


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1.0
    beta: float = 1.0
    metric: str = "ce"
    intermediate_metric: str = "l2"
    pool_length: int = 32
    pooling: str = "average"
    block_weights: tuple[float, ...] | None = None
    strategy: str = "joint"
    k: int = 1
    use_intermediate: bool = True
    use_adversarial: bool = True
    disc_hidden: int = 64
    align_last_hidden: bool = False
    # "shared": both discriminator calls see [teacher, student]; "swapped": the
    # student-labelled call sees [student, teacher] instead.
    disc_input: str = "shared"
    reversal_multiplier: float = -1.0

    def __post_init__(self):
        metric = self.metric.lower()
        inter = self.intermediate_metric.lower()
        object.__setattr__(self, "metric", metric)
        object.__setattr__(self, "intermediate_metric", inter)
        pooling = {"avg": "average", "mean": "average"}.get(self.pooling, self.pooling)
        object.__setattr__(self, "pooling", pooling)
        if self.block_weights is not None:
            object.__setattr__(self, "block_weights", tuple(float(w) for w in self.block_weights))
        self.validate()

    def validate(self) -> None:
        if self.metric not in METRICS:
            raise ContractError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.intermediate_metric not in ("l1", "l2"):
            raise ContractError(f"intermediate_metric must be l1 or l2, got {self.intermediate_metric!r}")
        if self.pooling not in ("average", "max"):
            raise ContractError(f"pooling must be average or max, got {self.pooling!r}")
        if self.strategy not in ("joint", "alternate"):
            raise ContractError(f"strategy must be joint or alternate, got {self.strategy!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be non-negative")
        if self.pool_length < 1 or self.k < 1 or self.disc_hidden < 1:
            raise ContractError("pool_length, k and disc_hidden must be positive")
        if self.block_weights is not None and any(w <= 0 for w in self.block_weights):
            raise ContractError(f"block weights must be positive, got {self.block_weights}")
        if self.disc_input not in ("shared", "swapped"):
            raise ContractError(f"disc_input must be shared or swapped, got {self.disc_input!r}")

    def num_stages(self, num_blocks: int) -> int:
        return num_blocks + (1 if self.align_last_hidden else 0)

    def weights(self, num_blocks: int) -> tuple[float, ...]:
        n = self.num_stages(num_blocks)
        w = self.block_weights
        if w is None:
            if n not in DEFAULT_BLOCK_WEIGHTS:
                raise ContractError(f"no default block weights for {n} stages; set block_weights")
            w = DEFAULT_BLOCK_WEIGHTS[n]
        if len(w) != n:
            raise ContractError(f"{len(w)} block weights given for {n} alignment stages")
        return w

    def active_stages(self, num_blocks: int) -> list[bool]:
        n = self.num_stages(num_blocks)
        return [self.use_intermediate or j == n - 1 for j in range(n)]

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["block_weights"] = None if self.block_weights is None else list(self.block_weights)
        return d

    def replace(self, **kw) -> "DistillConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------- alignment


def adaptive_pool(x, length: int, mode: str = "average") -> Tensor:
    """Pool a length-n vector (or each row of a matrix) to ``length`` bins.

    Bin j covers [floor(j n / L), floor((j + 1) n / L)).
    """
    x = T.as_tensor(x)
    mode = {"avg": "average", "mean": "average"}.get(mode, mode)
    if x.values.ndim == 1:
        out = T.adaptive_pool(_reshape(x, (1, -1)), length, mode)
        return _reshape(out, (length,))
    return T.adaptive_pool(x, length, mode)


def _reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return T._emit("reshape", x.values.reshape(shape), (x,), lambda g: (g.reshape(src),))


def stage_outputs(out: ForwardOutput, cfg: DistillConfig) -> list[Tensor]:
    hidden = out.block_outputs if cfg.align_last_hidden else out.block_outputs[:-1]
    return list(hidden) + [out.probs]


def pool_stage(x: Tensor, cfg: DistillConfig, final: bool) -> Tensor:
    """Discriminator-side features: hidden stages pooled to L; final probs pooled only if C > L."""
    if final and x.shape[1] <= cfg.pool_length:
        return x
    return T.adaptive_pool(x, cfg.pool_length, cfg.pooling)


def stage_input_widths(num_blocks: int, num_classes: int, cfg: DistillConfig) -> list[int]:
    n = cfg.num_stages(num_blocks)
    final = num_classes if num_classes <= cfg.pool_length else cfg.pool_length
    return [cfg.pool_length] * (n - 1) + [final]


# ---------------------------------------------------------------- similarity


def _check_stochastic(p: np.ndarray, who: str) -> None:
    if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
        raise ContractError(f"{who} rows must be probability vectors for KL/CE")


def sim_loss(p_teacher, p_student, metric: str = "ce", check: bool = True) -> Tensor:
    """(1/n) sum_i sum_c of the per-entry distance between teacher and student rows.

    The teacher side is treated as a constant.
    """
    pt = T.as_tensor(p_teacher).values
    ps = T.as_tensor(p_student)
    if pt.shape != ps.shape or pt.ndim != 2:
        raise ShapeError(f"sim_loss: teacher {pt.shape} vs student {ps.shape}")
    n = pt.shape[0]
    const = Tensor(pt)
    if metric == "l1":
        terms = T.absolute(T.sub(const, ps))
    elif metric == "l2":
        diff = T.sub(const, ps)
        terms = T.mul(diff, diff)
    elif metric in ("kl", "ce"):
        if check:
            _check_stochastic(pt, "teacher")
            _check_stochastic(ps.values, "student")
        cross = T.mul(const, T.log(ps))
        if metric == "ce":
            terms = T.scale(cross, -1.0)
        else:
            self_term = pt * np.log(np.maximum(pt, T.LOG_FLOOR))
            terms = T.sub(Tensor(self_term), cross)
    else:
        raise ContractError(f"unknown metric {metric!r}")
    return T.scale(T.total(terms), 1.0 / n)


@dataclass
class StageLosses:
    total: Tensor
    per_stage: list[Tensor]


def intermediate_sim_loss(teacher_out: ForwardOutput | Sequence[Tensor],
                          student_out: ForwardOutput | Sequence[Tensor],
                          cfg: DistillConfig) -> StageLosses:
    """Weighted sum over alignment stages of pooled-feature distances.

    Hidden stages use ``cfg.intermediate_metric`` on features pooled to L; the
    final stage uses ``cfg.metric`` on the probability vectors. Stages switched
    off by ``use_intermediate=False`` are still measured but carry no weight.
    """
    ts = stage_outputs(teacher_out, cfg) if isinstance(teacher_out, ForwardOutput) else list(teacher_out)
    ss = stage_outputs(student_out, cfg) if isinstance(student_out, ForwardOutput) else list(student_out)
    if len(ts) != len(ss):
        raise ContractError(f"teacher has {len(ts)} alignment stages, student has {len(ss)}")
    n = len(ss)
    num_blocks = n - (1 if cfg.align_last_hidden else 0)
    weights = cfg.weights(num_blocks)
    active = cfg.active_stages(num_blocks)
    per_stage = []
    loss = None
    for j, (t, s) in enumerate(zip(ts, ss)):
        if j == n - 1:
            d = sim_loss(t.detach(), s, cfg.metric)
        else:
            tp = T.adaptive_pool(t.detach(), cfg.pool_length, cfg.pooling)
            sp = T.adaptive_pool(s, cfg.pool_length, cfg.pooling)
            d = sim_loss(tp, sp, cfg.intermediate_metric)
        per_stage.append(d)
        if active[j]:
            term = T.scale(d, weights[j])
            loss = term if loss is None else T.add(loss, term)
    return StageLosses(loss, per_stage)


# ---------------------------------------------------------------- discriminators


@dataclass
class Discriminator:
    """Three dense layers 2w -> H -> H -> 1, relu between, sigmoid output."""

    layers: list[tuple[Tensor, Tensor]]

    @classmethod
    def init(cls, feature_width: int, hidden: int, rng: np.random.Generator,
             zero_final: bool = False) -> "Discriminator":
        layers = [dense_init(2 * feature_width, hidden, rng), dense_init(hidden, hidden, rng),
                  dense_init(hidden, 1, rng)]
        if zero_final:
            layers[-1][0].values[:] = 0.0
        return cls(layers)

    @property
    def input_width(self) -> int:
        return self.layers[0][0].shape[0]

    def params(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]

    def forward(self, x, detach_params: bool = False) -> Tensor:
        h = T.as_tensor(x)
        if h.values.ndim != 2 or h.shape[1] != self.input_width:
            raise ShapeError(f"discriminator expects width {self.input_width}, got {h.shape}")
        for i, (w, b) in enumerate(self.layers):
            if detach_params:
                w, b = w.detach(), b.detach()
            h = T.add_bias(T.matmul(h, w), b)
            h = T.relu(h) if i < 2 else T.sigmoid(h)
        return h


@dataclass
class DiscriminatorSet:
    discs: list[Discriminator] = field(default_factory=list)

    @classmethod
    def init(cls, widths: Sequence[int], hidden: int, seed, zero_final: bool = False) -> "DiscriminatorSet":
        rng = np.random.default_rng(seed)
        return cls([Discriminator.init(w, hidden, rng, zero_final) for w in widths])

    def params(self) -> list[Tensor]:
        return [p for d in self.discs for p in d.params()]

    def __len__(self) -> int:
        return len(self.discs)

    def __getitem__(self, j) -> Discriminator:
        return self.discs[j]

    def __iter__(self):
        return iter(self.discs)


def discriminator_forward(disc: Discriminator, feat_teacher, feat_student, mode: str = "shared",
                          student_link=None, detach_params: bool = False) -> tuple[Tensor, Tensor]:
    """Return (d_real, d_fake), each n x 1 in (0, 1).

    d_real reads the teacher-labelled input with the student detached; d_fake
    reads the student-labelled input with the teacher detached. ``student_link``
    optionally wraps the attached student branch (e.g. gradient reversal).
    """
    ft, fs = T.as_tensor(feat_teacher), T.as_tensor(feat_student)
    if ft.values.ndim == 1:
        ft, fs = _reshape(ft, (1, -1)), _reshape(fs, (1, -1))
    if ft.shape != fs.shape:
        raise ShapeError(f"teacher features {ft.shape} vs student features {fs.shape}")
    t_det, s_det = ft.detach(), fs.detach()
    s_live = student_link(fs) if student_link is not None else fs
    if mode == "shared":
        real_in, fake_in = T.concat(ft, s_det), T.concat(t_det, s_live)
    elif mode == "swapped":
        real_in, fake_in = T.concat(ft, s_det), T.concat(s_live, t_det)
    else:
        raise ContractError(f"unknown discriminator input mode {mode!r}")
    return disc.forward(real_in, detach_params), disc.forward(fake_in, detach_params)


def gan_stage_loss(d_real, d_fake):
    """mean log D(real) + mean log(1 - D(fake)); floats in, float out."""
    if not isinstance(d_real, Tensor) and not isinstance(d_fake, Tensor):
        r = np.clip(np.asarray(d_real, dtype=np.float64), T.LOG_FLOOR, 1 - T.LOG_FLOOR)
        f = np.clip(np.asarray(d_fake, dtype=np.float64), T.LOG_FLOOR, 1 - T.LOG_FLOOR)
        return float(np.mean(np.log(r)) + np.mean(np.log1p(-f)))
    return T.add(T.mean(T.log(d_real)), student_adv_term(d_fake))


def student_adv_term(d_fake):
    """mean log(1 - D(fake)), the quantity the student descends."""
    if not isinstance(d_fake, Tensor):
        f = np.clip(np.asarray(d_fake, dtype=np.float64), T.LOG_FLOOR, 1 - T.LOG_FLOOR)
        return float(np.mean(np.log1p(-f)))
    return T.mean(T.log(T.sub(1.0, d_fake)))


def total_loss(sim, adv_terms: Sequence, cfg: DistillConfig, weights: Sequence[float] | None = None):
    """alpha * sim + beta * sum_j w_j * adv_j."""
    if weights is None:
        weights = cfg.weights(len(adv_terms) - (1 if cfg.align_last_hidden else 0))
    if len(weights) != len(adv_terms):
        raise ContractError(f"{len(weights)} block weights for {len(adv_terms)} adversarial terms")
    if not isinstance(sim, Tensor) and not any(isinstance(a, Tensor) for a in adv_terms):
        return cfg.alpha * float(sim) + cfg.beta * sum(w * float(a) for w, a in zip(weights, adv_terms))
    loss = T.scale(sim, cfg.alpha)
    for w, a in zip(weights, adv_terms):
        loss = T.add(loss, T.scale(T.as_tensor(a), cfg.beta * w))
    return loss
