import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moe_sc import tensor as T
from moe_sc.tensor import Tensor
from moe_sc.transformer import (
    EOS_ID, PAD_ID, EmptyChannelError, EncoderLayer, ModelConfig, MoETransformer, SequenceTooLongError,
    count_flops_per_token, count_params, expert_params, flops_breakdown,
)

TINY = dict(n_layers=1, d_model=8, n_heads=2, vocab_size=10, max_len=6, d_ff=16)


def small(**kw):
    base = dict(n_layers=1, d_model=16, n_heads=2, n_experts=3, top_k=1, vocab_size=12, max_len=10, d_ff=24)
    base.update(kw)
    return ModelConfig(**base)


def ln(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + eps)


# -- config ------------------------------------------------------------------


@pytest.mark.parametrize("m,k", [(4, 4), (4, 0), (1, 2)])
def test_config_rejects_bad_routing(m, k):
    with pytest.raises(ValueError):
        ModelConfig(n_experts=m, top_k=k)


def test_config_roundtrip():
    cfg = small(seed=3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# -- encoder -----------------------------------------------------------------


def test_encoder_layer_single_row():
    layer = EncoderLayer(small(), np.random.default_rng(0))
    out = layer(Tensor(np.random.default_rng(1).standard_normal((1, 1, 16))))
    assert out.shape == (1, 1, 16)
    assert np.all(np.isfinite(out.data))


@pytest.mark.parametrize("n", [1, 2, 7, 16])
def test_encoder_layer_shapes(n):
    layer = EncoderLayer(small(), np.random.default_rng(0))
    assert layer(Tensor(np.zeros((2, n, 16)))).shape == (2, n, 16)


def test_encoder_layer_reduces_to_dense_block():
    # zero output projection: attention adds nothing; cloned experts: MoE is one FFN
    rng = np.random.default_rng(0)
    layer = EncoderLayer(small(n_experts=4, top_k=2), rng)
    layer.attn.o.weight.data[:] = 0
    layer.attn.o.bias.data[:] = 0
    src = layer.moe.experts[0]
    for e in layer.moe.experts[1:]:
        for (_, a), (_, b) in zip(e.named_parameters(), src.named_parameters()):
            a.data = b.data.copy()
    x = rng.standard_normal((3, 5, 16)).astype(np.float32)
    xt = ln(x)
    h = T.gelu(Tensor(xt @ src.w_in.weight.data + src.w_in.bias.data)).data
    ref = ln(xt + h @ src.w_out.weight.data + src.w_out.bias.data)
    np.testing.assert_allclose(layer(Tensor(x)).data, ref, rtol=1e-4, atol=1e-5)


def test_encode_shape_and_determinism():
    model = MoETransformer(small())
    z1, z2 = model.encode([4, 5, 6, 7, 8]), model.encode([4, 5, 6, 7, 8])
    assert z1.shape == (5, 16)
    np.testing.assert_array_equal(z1.data, z2.data)


def test_encode_is_order_sensitive():
    model = MoETransformer(small())
    assert not np.allclose(model.encode([4, 5, 6]).data, model.encode([6, 5, 4]).data[::-1])


def test_encode_too_long():
    with pytest.raises(SequenceTooLongError):
        MoETransformer(small()).encode(list(range(4, 4 + 11)) * 1)


def test_padding_does_not_leak():
    model = MoETransformer(small())
    ids = np.array([[4, 5, 6, PAD_ID, PAD_ID]])
    valid = np.array([[True, True, True, False, False]])
    z_pad = model.encode_batch(ids, valid).data[0, :3]
    np.testing.assert_allclose(z_pad, model.encode([4, 5, 6]).data, rtol=1e-5, atol=1e-6)


# -- decoder -----------------------------------------------------------------


def test_decode_step_is_distribution():
    model = MoETransformer(small())
    p = model.decode_step(model.encode([4, 5, 6]), [PAD_ID, 7])
    assert p.shape == (12,)
    assert abs(p.sum() - 1.0) < 1e-5
    assert np.all(p >= 0)


def test_equal_logits_give_uniform():
    model = MoETransformer(small(vocab_size=4))
    model.token_emb.data[:] = 0
    p = model.decode_step(model.encode([3]), [PAD_ID])
    np.testing.assert_allclose(p, 0.25, atol=1e-7)


def test_greedy_matches_argmax_scan():
    model = MoETransformer(small())
    mem = model.encode([4, 5, 6])
    ids, _ = model.generate(mem, 5)
    prefix = [PAD_ID]
    for tok in ids:
        p = model.decode_step(mem, prefix)
        best = max(range(len(p)), key=lambda i: (p[i], -i))
        assert tok == best + 1
        prefix.append(tok)


def test_forced_eos_gives_empty_sentence():
    model = MoETransformer(small(tie_embeddings=False))
    last = model.decoder[-1].norm3
    last.gain.data[:] = 0
    last.bias.data[:] = 1
    model.head.weight.data[:] = 0
    model.head.weight.data[:, EOS_ID - 1] = 100.0
    ids, truncated = model.generate(model.encode([4, 5]), 8)
    assert ids == [EOS_ID] and not truncated


def test_generate_truncates_without_eos():
    model = MoETransformer(small(tie_embeddings=False))
    model.head.weight.data[:, EOS_ID - 1] = -1e3
    ids, truncated = model.generate(model.encode([4, 5]), 3)
    assert len(ids) == 3 and truncated


def test_generate_batch_matches_single():
    model = MoETransformer(small())
    mem = model.encode_batch(np.array([[4, 5, 6], [7, 8, 9]]))
    batch = model.generate_batch(mem, 4)
    for i in range(2):
        assert batch[i] == model.generate(Tensor(mem.data[i]), 4)[0]


def test_empty_channel_rejected():
    model = MoETransformer(small())
    with pytest.raises(EmptyChannelError):
        model.decode_step(Tensor(np.zeros((0, 16), np.float32)), [PAD_ID])


def test_memorises_a_toy_pair():
    from moe_sc.training import AdamW
    model = MoETransformer(small(n_layers=1))
    prompt = np.array([[4, 5, 6, 7]])
    target = np.array([[8, 9, EOS_ID]])
    dec_in = np.array([[PAD_ID, 8, 9]])
    opt = AdamW(model.parameters(), lr=1e-2)
    for _ in range(60):
        logits = model.decode_logits(model.encode_batch(prompt), dec_in)
        logp = T.log_softmax(logits)
        loss = -T.take_along(logp, (target - 1)[..., None], axis=-1).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert model.generate(model.encode(prompt[0]), 5)[0] == [8, 9, EOS_ID]


# -- counts ------------------------------------------------------------------


def test_param_count_hand_tally():
    # expert 280, attention 288, norms 16 each, embeddings 80 + 2*48
    assert count_params(ModelConfig(**TINY, n_experts=1)) == 1680
    # three experts plus an 8x3 router in each stack
    assert count_params(ModelConfig(**TINY, n_experts=3)) == 2848


@pytest.mark.parametrize("cfg", [small(), small(n_experts=1), small(tie_embeddings=False, n_layers=2)])
def test_param_count_matches_module(cfg):
    assert count_params(cfg) == MoETransformer(cfg).n_params()


def test_param_count_linear_in_experts():
    base = count_params(small(n_experts=2))
    per_expert = 2 * 1 * (expert_params(small()) + 16)   # both stacks; FFN plus one router column
    for m in range(3, 9):
        assert count_params(small(n_experts=m)) - base == (m - 2) * per_expert


def test_flops_hand_tally():
    # proj 2*4*2*64, scores 2*2*2*6*8, one expert 2*2*8*16, head 2*8*10
    assert count_flops_per_token(ModelConfig(**TINY, n_experts=1)) == 1024 + 384 + 512 + 160


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 16))
def test_flops_invariant_in_experts(m):
    cfg = ModelConfig(**TINY, n_experts=m, top_k=1)
    assert count_flops_per_token(cfg) == count_flops_per_token(ModelConfig(**TINY, n_experts=1))


def test_flops_expert_term_scales_with_d_ff():
    a = flops_breakdown(ModelConfig(**{**TINY, "d_ff": 16}))
    b = flops_breakdown(ModelConfig(**{**TINY, "d_ff": 32}))
    assert b["decoder_expert_ffn"] == 2 * a["decoder_expert_ffn"]
    assert b["decoder_head"] == a["decoder_head"]


def test_published_dimensions():
    kw = dict(n_layers=12, d_model=768, n_heads=12, vocab_size=32128, max_len=512, d_ff=3072,
              tie_embeddings=False)
    moe = ModelConfig(**kw, n_experts=10, top_k=1)
    dense = ModelConfig(**kw, n_experts=1, top_k=1)
    assert abs(count_params(moe) / 1.27e9 - 1) < 0.05
    assert abs(count_params(dense) / 250e6 - 1) < 0.05
    assert abs(count_flops_per_token(moe) / 300e6 - 1) < 0.05
    assert count_flops_per_token(moe) == count_flops_per_token(dense)
