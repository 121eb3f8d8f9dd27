import numpy as np
import pytest

from mcnet.autodiff import Tape, Tensor, backward, ops
from mcnet.memory import (DynamicConv, MemoryCompensation, MetaMemory, attend, compensate, condition_memory,
                          modulate_demodulate, positional_encoding, split_channels)
from mcnet.nn import init


def loop_attention(q, k, v, scale):
    B, C, Nq = q.shape
    Nk = k.shape[2]
    out = np.zeros((B, C, Nq))
    for b in range(B):
        for i in range(Nq):
            logits = np.array([sum(q[b, c, i] * k[b, c, j] for c in range(C)) for j in range(Nk)])
            if scale:
                logits = logits / np.sqrt(C)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            for c in range(C):
                out[b, c, i] = sum(w[j] * v[b, c, j] for j in range(Nk))
    return out


@pytest.mark.parametrize("c", [2, 5, 16])
def test_split_sizes(rng, c):
    keep, mod = split_channels(Tensor(rng.standard_normal((1, c, 3, 3))))
    assert keep.shape[1] == (c + 1) // 2 and mod.shape[1] == c // 2


def test_split_needs_two_channels(rng):
    with pytest.raises(ValueError):
        split_channels(Tensor(rng.standard_normal((1, 1, 3, 3))))


def test_positional_encoding_layout():
    coords = Tensor(np.array([[0.25, -0.5]]))
    pe = positional_encoding(coords, 2).data
    assert pe.shape == (1, 10)
    c = 0.25
    np.testing.assert_allclose(pe[0, :5], [c, np.sin(np.pi * c), np.cos(np.pi * c),
                                           np.sin(2 * np.pi * c), np.cos(2 * np.pi * c)])
    np.testing.assert_array_equal(positional_encoding(coords, 0).data, coords.data)


def test_demodulated_filters_have_unit_norm_limit(rng):
    w = Tensor(rng.standard_normal((4, 3, 3, 3)))
    s = Tensor(rng.uniform(0.5, 2.0, (2, 3)))
    for eps, tol in ((1e-2, None), (1e-8, 1e-6)):
        out = modulate_demodulate(w, s, eps).data
        sq = (out ** 2).sum(axis=(2, 3, 4))
        assert (sq > 0).all() and (sq <= 1).all()
        if tol:
            np.testing.assert_allclose(sq, 1.0, atol=tol)


def test_demodulation_ignores_style_scale(rng):
    w = Tensor(rng.standard_normal((4, 3, 3, 3)))
    s = rng.uniform(0.5, 2.0, (2, 3))
    a = modulate_demodulate(w, Tensor(s), 1e-8).data
    b = modulate_demodulate(w, Tensor(7.3 * s), 1e-8).data
    assert np.abs(a - b).max() / np.abs(a).max() < 1e-6


def test_condition_memory_matches_per_sample_conv(rng):
    bank = rng.standard_normal((3, 5, 5))
    weights = rng.standard_normal((2, 3, 3, 3, 3))
    out = condition_memory(Tensor(bank), Tensor(weights)).data
    for b in range(2):
        ref = ops.conv2d(Tensor(bank[None]), Tensor(weights[b]), padding=1).data[0]
        np.testing.assert_allclose(out[b], ref, atol=1e-12)


def test_dynamic_conv_mixes_candidates(rng):
    dc = DynamicConv(3, n_kernels=4, dtype=np.float64)
    init(dc, 0)
    x = Tensor(rng.standard_normal((2, 3, 5, 5)))
    cond = Tensor(rng.standard_normal((2, 3, 4, 4)))
    att = dc.attention(cond).data
    np.testing.assert_allclose(att.sum(-1), 1.0)
    out = dc(x, cond).data
    for b in range(2):
        ref = sum(att[b, n] * ops.conv2d(Tensor(x.data[b:b + 1]), Tensor(dc.bank.data[n]), padding=1).data[0]
                  for n in range(4))
        np.testing.assert_allclose(out[b], ref, atol=1e-10)


@pytest.mark.parametrize("scale", [True, False])
def test_attention_matches_loops(rng, scale):
    q, k, v = (rng.standard_normal(s) for s in ((2, 3, 4), (2, 3, 5), (2, 3, 5)))
    out, attn = attend(Tensor(q), Tensor(k), Tensor(v), scale=scale)
    np.testing.assert_allclose(attn.data.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(out.data, loop_attention(q, k, v, scale), atol=1e-9)


def test_compensate_shape_check(rng):
    with pytest.raises(ValueError):
        compensate(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))


def make_block(channels=6, cm=4, k=2, dtype=np.float64):
    block = MemoryCompensation(channels, cm, k, pe_freqs=1, dtype=dtype)
    mem = MetaMemory(cm, 3, 3, dtype=dtype)
    init(block, 0)
    init(mem, 1)
    return block, mem


def test_block_output_layout(rng):
    block, mem = make_block(channels=7)
    warped = Tensor(rng.standard_normal((2, 7, 6, 6)))
    out = block(warped, Tensor(rng.uniform(-1, 1, (2, 2, 2))), mem)
    assert out.compensated.shape == (2, 7, 6, 6)
    # the kept half sits after the attended channels, untouched
    np.testing.assert_array_equal(out.compensated.data[:, 3:], warped.data[:, :4])
    assert out.conditioned.shape == (2, 4, 3, 3) and out.identity.shape == (2, 4)


def test_ablation_zeroes_memory_read(rng):
    block, mem = make_block()
    warped = Tensor(rng.standard_normal((1, 6, 4, 4)))
    out = block(warped, Tensor(rng.uniform(-1, 1, (1, 2, 2))), mem, ablate=True)
    assert not out.compensated.data[:, :3].any()


def test_memory_gets_gradient_through_attention(rng):
    block, mem = make_block()
    warped = Tensor(rng.standard_normal((1, 6, 4, 4)))
    with Tape() as tape:
        out = block(warped, Tensor(rng.uniform(-1, 1, (1, 2, 2))), mem)
        loss = ops.sum(ops.square(out.compensated))
    assert np.abs(backward(loss, tape, wrt=[mem.bank])[mem.bank]).sum() > 0


def test_meta_memory_init_scale():
    mem = MetaMemory(32, 8, 8)
    init(mem, 0)
    assert 0.015 < mem.bank.data.std() < 0.025
