import numpy as np
import pytest

from iqvic import autodiff as ad
from iqvic.autodiff import ContractError, Tensor
from iqvic.training import OptimizerState, adamw_step
from iqvic.transformer import (CapacityError, ConfigError, TransformerConfig, TransformerModel,
                               apply_lora)

from oracles import central_difference, rel_error


def small(seed=0, **kw):
    base = dict(d_model=16, n_heads=2, n_layers=2, d_ff=32, vocab_size=12, max_positions=24,
                lora_rank=2, lora_dropout=0.0)
    base.update(kw)
    return TransformerModel(TransformerConfig(**base), seed=seed)


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            TransformerConfig(d_model=10, n_heads=4)

    def test_published_lora_settings_accepted(self):
        cfg = TransformerConfig(lora_rank=64, lora_alpha=16, lora_dropout=0.05)
        assert (cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout) == (64, 16, 0.05)

    def test_dropout_range(self):
        with pytest.raises(ConfigError):
            TransformerConfig(lora_dropout=1.0)


class TestEmbedTokens:
    def test_zero_row(self):
        m = small()
        m.params["tok_emb"].data[0] = 0.0
        np.testing.assert_array_equal(m.embed_tokens([0]).data, np.zeros((1, 16)))

    def test_repeated_lookup(self):
        e = small().embed_tokens([3, 3]).data
        np.testing.assert_array_equal(e[0], e[1])

    def test_shape(self):
        assert small().embed_tokens(list(range(8))).shape == (8, 16)

    def test_out_of_vocab(self):
        with pytest.raises(IndexError):
            small().embed_tokens([12])

    def test_empty(self):
        with pytest.raises(ContractError):
            small().embed_tokens([])


class TestForward:
    def test_single_position(self):
        assert small().forward_embeddings(Tensor(np.ones((1, 16)))).shape == (1, 16)

    def test_zero_model_is_finite(self):
        m = small()
        for t in m.params.values():
            t.data = np.zeros(t.shape)
        out = m.forward_embeddings(Tensor(np.random.default_rng(0).normal(size=(5, 16)))).data
        assert np.all(np.isfinite(out)) and np.linalg.norm(out) < 1e3

    def test_capacity(self):
        with pytest.raises(CapacityError):
            small().forward_embeddings(Tensor(np.zeros((25, 16))))

    def test_causal_probe(self):
        m = small()
        rng = np.random.default_rng(1)
        x = rng.normal(size=(10, 16))
        base = m.forward_embeddings(Tensor(x)).data
        for j in range(10):
            y = x.copy()
            y[j] += rng.normal(size=16)
            out = m.forward_embeddings(Tensor(y)).data
            np.testing.assert_array_equal(out[:j], base[:j])
            if j < 9:
                assert not np.array_equal(out[j:], base[j:])

    def test_batched_rows_match_unbatched(self):
        m = small()
        x = np.random.default_rng(2).normal(size=(3, 7, 16))
        batched = m.forward_embeddings(Tensor(x)).data
        for b in range(3):
            np.testing.assert_allclose(batched[b], m.forward_embeddings(Tensor(x[b])).data, atol=1e-12)


class TestLora:
    def test_zero_B_is_identity(self):
        rng = np.random.default_rng(0)
        W, A, x = (Tensor(rng.normal(size=s)) for s in ((4, 3), (4, 2), (5, 4)))
        out = apply_lora(W, A, Tensor(np.zeros((2, 3))), 16.0, 2, x)
        np.testing.assert_array_equal(out.data, (x.data @ W.data))

    def test_rank_one_construction(self):
        W = Tensor(np.zeros((3, 3)))
        A = Tensor(np.array([[0.0], [1.0], [0.0]]))  # e_1 column
        B = Tensor(np.array([[0.0, 0.0, 1.0]]))  # e_2 row
        x = Tensor(np.array([[5.0, 7.0, 11.0]]))
        assert apply_lora(W, A, B, 1.0, 1, x).data.tolist() == [[0.0, 0.0, 7.0]]

    def test_model_identity_at_init(self):
        adapted = small(lora_rank=4, seed=3)
        base = small(lora_rank=0, seed=3)
        base.load_arrays({k: v.data for k, v in adapted.base_params().items()})
        x = Tensor(np.random.default_rng(4).normal(size=(6, 16)))
        np.testing.assert_array_equal(adapted.forward_embeddings(x).data, base.forward_embeddings(x).data)

    def test_frozen_base_gets_no_gradient_and_no_update(self):
        m = small()
        m.freeze_base()
        before = {k: v.data.copy() for k, v in m.base_params().items()}
        x = Tensor(np.random.default_rng(5).normal(size=(4, 16)))
        loss = ad.cross_entropy(m.logits(m.forward_embeddings(x)), [1, 2, 3, 4])
        ad.backward(loss, m.params.values())
        assert all(v.grad is None for v in m.base_params().values())
        train = m.trainable()
        assert set(train) == set(m.lora_params())
        adamw_step(train, {k: np.ones(v.shape) for k, v in train.items()}, OptimizerState(lr=0.1))
        for k, v in m.base_params().items():
            assert v.data.tobytes() == before[k].tobytes()


class TestGreedyDecode:
    def test_budget_zero(self):
        m = small()
        assert m.greedy_decode(Tensor(np.ones((2, 16))), 0, stop_id=1) == []

    def test_immediate_stop(self):
        m = small()
        m.params["lm_head"].data[:] = 0.0
        m.params["ln_f.g"].data[:] = 0.0
        m.params["ln_f.b"].data[:] = 1.0
        m.params["lm_head"].data[:, 1] = 1.0  # id 1 wins at every position
        assert m.greedy_decode(Tensor(np.ones((2, 16))), 5, stop_id=1) == []

    def test_capacity(self):
        with pytest.raises(CapacityError):
            small().greedy_decode(Tensor(np.ones((20, 16))), 5, stop_id=1)

    def test_deterministic(self):
        m = small()
        x = Tensor(np.random.default_rng(6).normal(size=(3, 16)))
        assert m.greedy_decode(x, 6, stop_id=99) == m.greedy_decode(x, 6, stop_id=99)


def test_full_stack_gradient_matches_finite_differences():
    m = small(d_model=16, lora_rank=2)
    rng = np.random.default_rng(7)
    for t in m.lora_params().values():
        t.data = rng.normal(0, 0.3, t.shape)
    x = rng.uniform(-1, 1, (5, 16))
    tg = rng.integers(0, 12, 5)

    def f():
        return ad.cross_entropy(m.logits(m.forward_embeddings(Tensor(x))), tg)

    ad.backward(f(), m.params.values())
    analytic = {k: v.grad.copy() for k, v in m.params.items()}
    numeric = central_difference(lambda: f().item(), {k: v.data for k, v in m.params.items()},
                                 max_per_array=4, rng=rng)
    worst = max(rel_error(analytic[k].reshape(-1)[i], g).max() for k, (i, g) in numeric.items())
    assert worst <= 1e-4


def test_checkpoint_round_trip(tmp_path):
    m = small()
    m.params["layers.0.wq.lora_B"].data[:] = 0.5
    m.save(tmp_path / "m.ckpt")
    back = TransformerModel.load(tmp_path / "m.ckpt")
    assert back.config == m.config
    for k, v in m.params.items():
        assert back.params[k].data.tobytes() == v.data.tobytes()
    head = (tmp_path / "m.ckpt").read_bytes().split(b"\n", 1)[0]
    assert b'"version": "iqvic-ckpt-v1"' in head
