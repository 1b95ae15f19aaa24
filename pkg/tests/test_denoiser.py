import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from beatdiff.denoiser import ConditionBundle, DenoiserConfig, init_params, n_parameters, timestep_embedding, zero_params
from beatdiff.spectral import SpectralConfig

TINY = DenoiserConfig(base_channels=1, channel_mults=(1, 1, 1, 1), subblocks_per_block=1, convs_per_subblock=2, d_emb=4)


def _bundle(model, B, shape, label=0, task=0, t=5, dtype=torch.float32):
    C = torch.zeros((B,) + shape, dtype=dtype)
    return model.bundle(torch.full((B,), label), torch.full((B,), t), torch.full((B,), task), C, C.clone())


def test_timestep_embedding():
    e0 = timestep_embedding(torch.tensor([0]), 8)[0]
    assert torch.all(e0[:4] == 0) and torch.all(e0[4:] == 1)
    E = timestep_embedding(torch.arange(1, 1001), 32)
    d = torch.cdist(E, E) + torch.eye(1000) * 10
    assert d.min() > 0
    assert torch.equal(timestep_embedding(torch.tensor([7]), 32), timestep_embedding(torch.tensor([7]), 32))
    with pytest.raises(ValueError, match="bad embedding dimension"):
        timestep_embedding(torch.tensor([1]), 7)


def test_default_input_channels_and_output_shape():
    cfg = DenoiserConfig()
    assert cfg.in_channels == 9
    m = init_params(cfg)
    shape = SpectralConfig().shape(270)
    out = m(torch.randn((2,) + shape), _bundle(m, 2, shape))
    assert out.shape == (2, 2, 33, 68)


def test_parameter_count_formula():
    for cfg in (DenoiserConfig(), TINY, DenoiserConfig(base_channels=8, emb_channels=3, group_norm=True, convs_per_subblock=1)):
        assert n_parameters(cfg) == sum(p.numel() for p in init_params(cfg).parameters())
    assert n_parameters(DenoiserConfig()) <= 2_000_000
    assert n_parameters(TINY) <= 500


def test_zero_params_give_zero_output():
    m = zero_params(init_params(TINY))
    shape = SpectralConfig().shape(270)
    assert not m(torch.randn((3,) + shape), _bundle(m, 3, shape)).any()


def test_zero_stack_is_zero():
    m = init_params(TINY)
    shape = (2, 33, 68)
    z = torch.zeros((1,) + shape)
    cond = ConditionBundle(torch.zeros(1, 4), torch.zeros(1, 4), torch.zeros(1, 4), z, z)
    m = zero_params(m)
    assert not m.assemble_input(z, cond).any()


def test_seeds():
    a, b, c = init_params(TINY, 0), init_params(TINY, 0), init_params(TINY, 1)
    for (k, p), q in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(p, q), k
    shape = (2, 33, 68)
    x = torch.randn((1,) + shape)
    assert not torch.equal(a(x, _bundle(a, 1, shape)), c(x, _bundle(c, 1, shape)))


def test_class_swap_only_touches_class_planes():
    m = init_params(DenoiserConfig(base_channels=4, emb_channels=2))
    shape = (2, 33, 68)
    x = torch.randn((1,) + shape)
    s0 = m.assemble_input(x, _bundle(m, 1, shape, label=0))
    s1 = m.assemble_input(x, _bundle(m, 1, shape, label=1))
    changed = (s0 != s1).flatten(2).any(2)[0]
    assert changed.nonzero().flatten().tolist() == [6, 7]
    assert not torch.equal(m(x, _bundle(m, 1, shape, label=0)), m(x, _bundle(m, 1, shape, label=2)))


def test_shape_mismatch():
    m = init_params(TINY)
    x = torch.randn(1, 2, 33, 68)
    cond = _bundle(m, 1, (2, 33, 67))
    with pytest.raises(ValueError, match="condition shape mismatch"):
        m(x, cond)


@settings(max_examples=15, deadline=None)
@given(log_n=st.integers(3, 7), hop_div=st.integers(1, 3), length=st.integers(140, 300))
def test_output_matches_state_for_any_spectral_config(log_n, hop_div, length):
    cfg = SpectralConfig(2**log_n, max(1, 2**log_n // 2**hop_div))
    shape = cfg.shape(length)
    m = init_params(TINY)
    out = m(torch.randn((1,) + shape), _bundle(m, 1, shape))
    assert out.shape == (1,) + shape
