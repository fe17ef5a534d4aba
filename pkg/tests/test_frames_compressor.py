import numpy as np
import pytest

from iqvic import autodiff as ad
from iqvic.autodiff import ContractError, DimensionError, Tensor
from iqvic.compressor import (ContextTokenLookup, assemble_input, compress, compress_tensor,
                              compression_ratio, format_ratio, question_digest)
from iqvic.frames import FrameEncoder, Projector, SymbolicFrame, encode_frame
from iqvic.transformer import CapacityError, TransformerConfig, TransformerModel

from oracles import central_difference, rel_error


class TestEncoder:
    def test_single_cell_shape(self):
        enc = FrameEncoder(5, 1, feature_dim=8)
        assert enc.encode(SymbolicFrame(np.array([[3]]))).tokens.shape == (1, 8)

    def test_identical_frames_identical_features(self):
        enc = FrameEncoder(6, 4, feature_dim=8, seed=2)
        a = enc.encode(SymbolicFrame(np.array([[1, 2], [3, 4]]), 0)).tokens
        b = enc.encode(SymbolicFrame(np.array([[1, 2], [3, 4]]), 7)).tokens
        np.testing.assert_array_equal(a, b)

    def test_published_patch_count(self):
        enc = FrameEncoder(10, 576, feature_dim=4)
        cells = np.random.default_rng(0).integers(0, 10, (24, 24))
        assert enc.encode(SymbolicFrame(cells)).tokens.shape == (576, 4)

    def test_row_major_layout(self):
        enc = FrameEncoder(4, 4, feature_dim=3, seed=1)
        cells = np.array([[0, 1], [2, 3]])
        feat = encode_frame(cells, enc.enc_table, enc.pos_table)
        np.testing.assert_array_equal(feat[2], enc.enc_table[2] + enc.pos_table[2])

    def test_unknown_symbol(self):
        with pytest.raises(IndexError):
            FrameEncoder(3, 4, 4).encode(SymbolicFrame(np.array([[0, 1], [2, 3]])))

    def test_tables_are_frozen(self):
        enc = FrameEncoder(3, 4, 4)
        with pytest.raises(ValueError):
            enc.enc_table[0, 0] = 1.0


class TestProjector:
    def test_zero_feature_zero_bias(self):
        proj = Projector(8, 16)
        out = proj(np.zeros((4, 8))).data
        np.testing.assert_array_equal(out, np.zeros((4, 16)))

    def test_shape(self):
        assert Projector(8, 64)(np.ones((4, 8))).shape == (4, 64)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            Projector(8, 16)(np.ones((4, 7)))

    def test_gradient(self):
        proj = Projector(4, 6, hidden=5, seed=3)
        rng = np.random.default_rng(3)
        for t in proj.params.values():
            t.data = rng.uniform(-1, 1, t.shape)
        x = rng.uniform(-1, 1, (3, 4))
        w = rng.uniform(-1, 1, (3, 6))

        def f():
            return ad.sum_all(ad.mul(proj(x), Tensor(w)))

        ad.backward(f(), proj.params.values())
        numeric = central_difference(lambda: f().item(), {k: t.data for k, t in proj.params.items()})
        for k, (idx, g) in numeric.items():
            assert rel_error(proj.params[k].grad.reshape(-1)[idx], g).max() <= 1e-4


def tiny_model(max_positions=96):
    return TransformerModel(TransformerConfig(d_model=16, n_heads=2, n_layers=2, d_ff=32, vocab_size=20,
                                              max_positions=max_positions, lora_rank=2, lora_dropout=0.0), seed=5)


class TestAssemble:
    def test_layout(self):
        rng = np.random.default_rng(0)
        q, v, c = (Tensor(rng.normal(size=(n, 16))) for n in (8, 16, 4))
        x = assemble_input(q, v, c).data
        assert x.shape == (28, 16)
        np.testing.assert_array_equal(x[24:], c.data)
        np.testing.assert_array_equal(x[:8], q.data)

    def test_empty_question(self):
        with pytest.raises(ContractError):
            assemble_input(Tensor(np.zeros((0, 4))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((1, 4))))

    def test_published_grid_sizes(self):
        x = assemble_input(Tensor(np.zeros((8, 2))), Tensor(np.zeros((576, 2))), Tensor(np.zeros((64, 2))))
        assert x.shape[0] == 648

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            assemble_input(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 5))), Tensor(np.zeros((1, 4))))


class TestCompress:
    @pytest.mark.parametrize("C", [64, 1])
    def test_shape(self, C):
        m = tiny_model()
        lookup = ContextTokenLookup(C, 16, n_patches=16) if C <= 16 else ContextTokenLookup(C, 16)
        e_v = np.random.default_rng(1).normal(size=(16, 16))
        out = compress(m, [1, 2, 3, 4, 5, 6, 7, 8], e_v, lookup)
        assert out.tokens.shape == (C, 16)
        assert out.question_hash == question_digest([1, 2, 3, 4, 5, 6, 7, 8])

    def test_warns_when_C_exceeds_P(self):
        with pytest.warns(UserWarning):
            ContextTokenLookup(8, 16, n_patches=4)

    def test_capacity(self):
        m = tiny_model(max_positions=20)
        with pytest.raises(CapacityError):
            compress(m, [1, 2, 3], np.zeros((16, 16)), ContextTokenLookup(4, 16))

    def test_slice_equals_full_forward(self):
        m = tiny_model()
        lookup = ContextTokenLookup(4, 16, seed=2)
        q = [3, 4, 5]
        e_v = np.random.default_rng(2).normal(size=(16, 16))
        out = compress(m, q, e_v, lookup).tokens
        x = assemble_input(m.embed_tokens(q), Tensor(e_v), lookup.table)
        full = m.forward_embeddings(x).data
        np.testing.assert_array_equal(out, full[19:23])

    def test_every_question_and_frame_row_reaches_context(self):
        m = tiny_model()
        lookup = ContextTokenLookup(3, 16, seed=3)
        rng = np.random.default_rng(3)
        e_q = rng.normal(size=(4, 16))
        e_v = rng.normal(size=(6, 16))
        base = compress_tensor(m, Tensor(e_q), Tensor(e_v), lookup).data
        for which, arr in (("q", e_q), ("v", e_v)):
            for j in range(arr.shape[0]):
                pq, pv = e_q.copy(), e_v.copy()
                (pq if which == "q" else pv)[j] += 0.5
                out = compress_tensor(m, Tensor(pq), Tensor(pv), lookup).data
                assert not np.array_equal(out, base), (which, j)

    def test_budget_independent_of_P(self):
        m = tiny_model()
        lookup = ContextTokenLookup(2, 16)
        for P in (4, 9, 16):
            assert compress(m, [1], np.ones((P, 16)), lookup).tokens.shape[0] == 2


class TestRatio:
    @pytest.mark.parametrize("C,text", [(64, "11%"), (32, "5.6%"), (1, "0.2%")])
    def test_published_ratios(self, C, text):
        assert format_ratio(compression_ratio(C, 576)) == text

    def test_values(self):
        assert compression_ratio(64, 576) == pytest.approx(11.111, abs=1e-3)
        assert compression_ratio(7, 7) == 100.0

    def test_zero_patches(self):
        with pytest.raises(ContractError):
            compression_ratio(1, 0)
