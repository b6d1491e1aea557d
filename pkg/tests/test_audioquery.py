import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from aavs.audioquery import QueryBank, generate_queries, prototype_cosine, repeat_queries
from aavs.decoder import Mode
from aavs.gradcheck import fd_relative_error
from aavs.model import AAVSModel, ModelConfig


def _loop_oracle(fa, q_obj, p):
    T, N, D = fa.shape[0], q_obj.shape[0], fa.shape[1]
    out = np.zeros((T, N, D))
    for t in range(T):
        for i in range(N):
            dot = sum(p[i, d] * fa[t, d] for d in range(D))
            nf = sum(x * x for x in fa[t]) ** 0.5
            npi = sum(x * x for x in p[i]) ** 0.5
            cos = dot / (nf * npi) if nf * npi > 0 else 0.0
            for d in range(D):
                out[t, i, d] = cos * fa[t, d] + q_obj[i, d]
    return out


def test_cos_one():
    fa = torch.randn(2, 8, dtype=torch.float64)
    q = torch.randn(2, 8, dtype=torch.float64)
    out = generate_queries(fa, q, fa.clone())
    for t in range(2):
        torch.testing.assert_close(out[t, t], fa[t] + q[t])


def test_orthogonal():
    fa = torch.tensor([[1.0, 0, 0, 0]])
    p = torch.tensor([[0, 1.0, 0, 0]])
    q = torch.randn(1, 4)
    torch.testing.assert_close(generate_queries(fa, q, p)[0, 0], q[0], rtol=0, atol=0)


def test_hand_example():
    fa = torch.tensor([[1.0, 2.0, 0.0, 0.0]], dtype=torch.float64)
    p = torch.tensor([[2.0, 1.0, 0.0, 0.0]], dtype=torch.float64)
    q = torch.zeros(1, 4, dtype=torch.float64)
    out = generate_queries(fa, q, p)[0, 0].numpy()
    np.testing.assert_allclose(out, [0.8, 1.6, 0, 0], atol=1e-15)
    np.testing.assert_allclose(out, _loop_oracle(fa.numpy(), q.numpy(), p.numpy())[0, 0], atol=1e-15)


def test_random_matches_loop_oracle(rng):
    fa, q, p = rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    out = generate_queries(*(torch.from_numpy(x) for x in (fa, q, p))).numpy()
    np.testing.assert_allclose(out, _loop_oracle(fa, q, p), rtol=1e-12, atol=1e-12)


def test_zero_norm_passes_query_through():
    fa = torch.zeros(2, 4)
    p = torch.randn(3, 4)
    q = torch.randn(3, 4)
    out = generate_queries(fa, q, p)
    assert torch.equal(out, q[None].expand(2, 3, 4))
    p0 = torch.zeros(3, 4)
    assert torch.equal(prototype_cosine(torch.randn(2, 4), p0), torch.zeros(2, 3))


class TestRepeat:
    def test_equals_adaptive_when_cos_one(self):
        fa = torch.randn(1, 6, dtype=torch.float64)
        q = torch.randn(3, 6, dtype=torch.float64)
        p = fa.expand(3, 6) * torch.tensor([[1.0], [2.0], [0.5]], dtype=torch.float64)
        torch.testing.assert_close(generate_queries(fa, q, p), repeat_queries(fa, q, p))

    def test_zero_audio(self):
        q = torch.randn(3, 6)
        assert torch.equal(repeat_queries(torch.zeros(2, 6), q), q[None].expand(2, 3, 6))

    def test_difference_identity(self, rng):
        fa, q, p = (torch.from_numpy(rng.normal(size=s)) for s in ((4, 6), (5, 6), (5, 6)))
        cos = prototype_cosine(fa, p)
        diff = repeat_queries(fa, q, p) - generate_queries(fa, q, p)
        torch.testing.assert_close(diff, (1 - cos)[:, :, None] * fa[:, None, :])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), alpha=st.floats(1e-3, 1e3))
def test_prototype_scale_invariance(seed, alpha):
    g = torch.Generator().manual_seed(seed)
    fa, q, p = (torch.randn(*s, generator=g, dtype=torch.float64) for s in ((3, 8), (4, 8), (4, 8)))
    torch.testing.assert_close(generate_queries(fa, q, alpha * p), generate_queries(fa, q, p),
                               rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_prototype_antisymmetry(seed):
    g = torch.Generator().manual_seed(seed)
    fa, q, p = (torch.randn(*s, generator=g, dtype=torch.float64) for s in ((3, 8), (4, 8), (4, 8)))
    assert torch.equal(prototype_cosine(fa, -p), -prototype_cosine(fa, p))
    pos = generate_queries(fa, q, p) - q
    neg = generate_queries(fa, q, -p) - q
    torch.testing.assert_close(neg, -pos, rtol=0, atol=1e-14)


def _census(module):
    return sorted((name, tuple(p.shape)) for name, p in module.named_parameters())


def test_no_extra_parameters():
    ada = AAVSModel(ModelConfig(dim=16, num_stages=1, adaptive_queries=True), Mode.AVS, 1, 8)
    rep = AAVSModel(ModelConfig(dim=16, num_stages=1, adaptive_queries=False), Mode.AVS, 1, 8)
    assert _census(ada) == _census(rep)
    assert _census(QueryBank(16, 32, adaptive=True)) == _census(QueryBank(16, 32, adaptive=False))


def test_default_init():
    bank = QueryBank(16, 32)
    assert torch.equal(bank.q_obj, torch.zeros(16, 32))
    torch.testing.assert_close(bank.p_audio.norm(dim=-1), torch.ones(16))
    assert bank.positional is bank.p_audio


def test_gradients():
    fa = torch.randn(3, 6, dtype=torch.float64, requires_grad=True)
    q = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    p = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    w = torch.randn(3, 4, 6, dtype=torch.float64)

    def f():
        return (generate_queries(fa, q, p) * w).tanh().sum()

    assert fd_relative_error(f, [fa, q, p], coords=10) < 1e-4
