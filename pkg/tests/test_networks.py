import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meal.data import gen_synthetic
from meal.errors import ContractError, DataError
from meal.networks import (
    SGD,
    BlockNetwork,
    BlockSpec,
    TrainHyper,
    evaluate,
    params_hash,
    pretrain_teacher,
    top_k_error,
)
from meal.tensor import Tensor


class TestBlockSpec:
    def test_parse(self):
        spec = BlockSpec.parse("64,64/64/32", 2, 4)
        assert spec.blocks == ((64, 64), (64,), (32,))
        assert spec.block_widths == [64, 64, 32]
        assert spec.layer_shapes() == [(2, 64), (64, 64), (64, 64), (64, 32), (32, 4)]

    def test_round_trip(self):
        spec = BlockSpec(3, ((5, 6), (7,)), 2)
        assert BlockSpec.from_dict(spec.to_dict()) == spec

    @pytest.mark.parametrize("text", ["", "64,,3", "a/b", "0/4", "-2"])
    def test_bad_text(self, text):
        with pytest.raises(ContractError):
            BlockSpec.parse(text, 2, 3)

    def test_empty_blocks(self):
        with pytest.raises(ContractError):
            BlockSpec(2, (), 3)


class TestNetwork:
    def test_forward_shapes(self):
        net = BlockNetwork.init(BlockSpec(3, ((8, 6), (5,)), 4), seed=0)
        out = net.forward(np.zeros((7, 3)))
        assert [h.shape for h in out.block_outputs] == [(7, 6), (7, 5)]
        assert out.logits.shape == (7, 4)
        np.testing.assert_allclose(out.probs.values.sum(axis=1), 1.0, atol=1e-12)

    def test_block_outputs_are_post_relu(self):
        net = BlockNetwork.init(BlockSpec(2, ((16,), (16,)), 3), seed=1)
        out = net.forward(np.random.default_rng(0).normal(size=(20, 2)))
        assert all(np.all(h.values >= 0) for h in out.block_outputs)

    def test_seeded_init(self):
        spec = BlockSpec(2, ((4,), (4,)), 2)
        assert BlockNetwork.init(spec, 3).hash() == BlockNetwork.init(spec, 3).hash()
        assert BlockNetwork.init(spec, 3).hash() != BlockNetwork.init(spec, 4).hash()

    def test_init_scale(self):
        net = BlockNetwork.init(BlockSpec(400, ((300,),), 2), 0)
        w, b = net.params.blocks[0][0]
        assert np.all(b.values == 0)
        assert abs(w.values.std() * np.sqrt(400) - 1.0) < 0.02

    def test_frozen_copy(self):
        net = BlockNetwork.init(BlockSpec(2, ((4,),), 2), 0)
        frozen = net.params.frozen()
        assert all(not t.requires_grad for t in frozen.flat())
        assert params_hash(frozen) == net.hash()


class TestSGD:
    def test_momentum_update(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD([p], lr=0.1, momentum=0.9)
        p.grad = np.array([1.0])
        opt.step()
        assert p.values[0] == pytest.approx(0.9)
        opt.step()  # v = 0.9 * 1 + 1
        assert p.values[0] == pytest.approx(0.9 - 0.19)

    def test_skips_missing_gradient(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        SGD([p], lr=0.1).step()
        assert p.values[0] == 1.0


class TestTopK:
    def test_uniform_predictor(self):
        probs = np.full((4, 4), 0.25)
        assert top_k_error(probs, np.array([0, 1, 2, 3]), 1) == 0.75

    def test_k_equals_c(self):
        probs = np.random.default_rng(0).dirichlet(np.ones(3), size=10)
        assert top_k_error(probs, np.random.default_rng(1).integers(0, 3, 10), 3) == 0.0

    def test_invalid_k(self):
        with pytest.raises(ContractError):
            top_k_error(np.full((1, 2), 0.5), np.array([0]), 3)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31))
    def test_monotone_in_k(self, seed):
        rng = np.random.default_rng(seed)
        probs = rng.dirichlet(np.ones(5), size=12)
        labels = rng.integers(0, 5, 12)
        errs = [top_k_error(probs, labels, k) for k in range(1, 6)]
        assert all(a >= b for a, b in zip(errs, errs[1:]))


class TestPretrain:
    def test_learns_blobs(self):
        data = gen_synthetic("blobs", 400, 3, 2, seed=0)
        train, val = data.split((0.8,), seed=0)
        hist = []
        teacher = pretrain_teacher(BlockSpec(2, ((16,), (16,)), 3), train, val,
                                   TrainHyper(epochs=10, seed=0), history=hist)
        assert teacher.frozen
        assert evaluate(teacher, val) < 0.05
        assert teacher.val_accuracy == pytest.approx(1 - evaluate(teacher, val))
        assert hist[-1] < hist[0]

    def test_zero_epochs_returns_init(self):
        data = gen_synthetic("blobs", 40, 2, 2, seed=0)
        spec = BlockSpec(2, ((4,),), 2)
        teacher = pretrain_teacher(spec, data, data, TrainHyper(epochs=0, seed=5))
        assert teacher.hash() == BlockNetwork.init(spec, 5).hash()

    def test_label_out_of_range(self):
        data = gen_synthetic("blobs", 40, 3, 2, seed=0)
        with pytest.raises(DataError):
            pretrain_teacher(BlockSpec(2, ((4,),), 2), data, data, TrainHyper(epochs=1))

    @pytest.mark.parametrize("kw", [dict(batch_size=0), dict(lr=0), dict(epochs=-1)])
    def test_bad_hyper(self, kw):
        with pytest.raises(ContractError):
            TrainHyper(**kw)
