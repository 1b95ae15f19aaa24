import numpy as np
import pytest
import torch

from beatdiff.denoiser import ConditionBundle, DenoiserConfig, init_params
from beatdiff.engine import (
    DiffusionCheckpoint,
    SynthesisRequest,
    TrainConfig,
    TrainingArrays,
    TrainLog,
    condition_spectrograms,
    from_state,
    synthesize_batch,
    to_state,
    train,
    training_loss,
)
from beatdiff.ingest import BeatDataset, synth_corpus, template
from beatdiff.schedule import make_schedule
from beatdiff.signal import TaskKind, build_mask
from beatdiff.spectral import SpectralConfig, istft_tensor, stft_tensor

TINY = DenoiserConfig(base_channels=2, channel_mults=(1, 1, 1, 1), subblocks_per_block=1, convs_per_subblock=1, d_emb=4)
GRAD_TINY = DenoiserConfig(base_channels=1, channel_mults=(1, 1, 1, 1), subblocks_per_block=1, d_emb=4)
SPEC = SpectralConfig(32, 8)


class ChainOracle(torch.nn.Module):
    """Returns the noise that maps S_t back onto a stored clean state."""

    def __init__(self, S0, sched):
        super().__init__()
        self.S0, self.sched = S0, sched
        self.dummy = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def bundle(self, labels, t, tasks, C1, C2):
        return ConditionBundle(None, torch.as_tensor(t), torch.as_tensor(tasks), C1, C2)

    def forward(self, St, cond):
        ab = torch.tensor(np.array(self.sched.alpha_bars), dtype=St.dtype)[cond.e_t - 1][:, None, None, None]
        return (St - ab.sqrt() * self.S0) / (1 - ab).sqrt()


@pytest.fixture(scope="module")
def toy():
    return synth_corpus(per_class=8, beats_per_record=6, seed=0)


@pytest.mark.parametrize("T", [1, 5, 10])
def test_chain_inversion_oracle(T):
    sched = make_schedule(T, 1e-4, 0.02)
    x0 = template("V")
    spec = SpectralConfig()
    S0 = stft_tensor(to_state(torch.tensor(x0)), spec)[None]
    out = synthesize_batch([SynthesisRequest("generation", "V", seed=1)], ChainOracle(S0, sched), sched, spec)
    assert np.max(np.abs(out[0] - x0)) <= 1e-5


def test_state_map_roundtrip():
    x = torch.rand(5, 270, dtype=torch.float64)
    assert torch.allclose(from_state(to_state(x)), x)


def _batch(task, B=4, seed=0):
    rng = np.random.default_rng(seed)
    x0 = torch.tensor(rng.random((B, 64)))
    ctx = torch.tensor(rng.random((B, 64)))
    masks = torch.tensor(np.stack([build_mask(task, 64, rng=rng).bits for _ in range(B)]), dtype=torch.float64)
    labels = torch.tensor(rng.integers(0, 3, B))
    tasks = torch.full((B,), task.index)
    t = torch.tensor(rng.integers(1, 11, B))
    eps = torch.tensor(rng.standard_normal((B,) + SPEC.shape(64)))
    return x0, ctx, masks, labels, tasks, t, eps


def test_loss_recomputation_and_gating():
    sched = make_schedule(10, 1e-3, 0.3)
    model = init_params(TINY).double()
    for task in TaskKind:
        x0, ctx, masks, labels, tasks, t, eps = _batch(task)
        with torch.no_grad():
            out = training_loss(model, x0, ctx, masks, labels, tasks, t, eps, sched, SPEC)
            ab = torch.tensor(sched.alpha_bars)[t - 1][:, None, None, None]
            St = ab.sqrt() * stft_tensor(2 * x0 - 1, SPEC) + (1 - ab).sqrt() * eps
            W = SPEC.window_tensor().sum()
            C1, C2 = stft_tensor(masks, SPEC) / W, stft_tensor((2 * ctx - 1) * masks, SPEC) / W
            eh = model(St, model.bundle(labels, t, tasks, C1, C2))
        assert abs(float(out["loss_diff"]) - float(((eps - eh) ** 2).mean())) <= 1e-9
        if task is TaskKind.GENERATION:
            assert float(out["loss_mse"]) == 0
        else:
            xh = (istft_tensor((St - (1 - ab).sqrt() * eh) / ab.sqrt(), SPEC, 64) + 1) / 2
            ref = ((xh - x0) ** 2).mean(1).mean()
            assert abs(float(out["loss_mse"]) - float(ref)) <= 1e-9


def test_oracle_noise_gives_zero_diffusion_loss():
    sched = make_schedule(10, 1e-3, 0.3)
    x0, ctx, masks, labels, tasks, t, eps = _batch(TaskKind.FORECASTING)

    class Echo(torch.nn.Module):
        def bundle(self, *a):
            return None

        def forward(self, St, cond):
            return eps

    out = training_loss(Echo(), x0, ctx, masks, labels, tasks, t, eps, sched, SPEC)
    assert float(out["loss_diff"]) == 0
    assert float(out["loss_mse"]) <= 1e-20


@pytest.mark.parametrize("task", list(TaskKind))
def test_gradient_matches_finite_differences(task):
    sched = make_schedule(10, 1e-3, 0.3)
    model = init_params(GRAD_TINY).double()
    assert sum(p.numel() for p in model.parameters()) <= 500
    x0, ctx, masks, labels, tasks, t, eps = _batch(task, B=2, seed=task.index)
    params = list(model.parameters())

    def loss():
        return training_loss(model, x0, ctx, masks, labels, tasks, t, eps, sched, SPEC)["loss_total"]

    model.zero_grad()
    loss().backward()
    grads = [p.grad.clone() for p in params]
    h, ok, n = 1e-4, 0, 0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                fd = (up - down) / (2 * h)
                an = gflat[i].item()
                ok += abs(an - fd) <= 1e-3 * max(abs(an), abs(fd), 1e-8)
                n += 1
    assert ok / n >= 0.99


def _short_cfg(**kw):
    base = dict(epochs=1, batch_size=8, T=10, beta_min=1e-3, beta_max=0.3, seed=3, dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


def test_train_is_deterministic(toy):
    a, la = train(toy, _short_cfg(), TINY, SPEC)
    b, lb = train(toy, _short_cfg(), TINY, SPEC)
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(p, q)
    assert la.column("loss_total").tolist() == lb.column("loss_total").tolist()


def test_ema_tracks_raw_weights_without_changing_training(toy):
    raw, lr_ = train(toy, _short_cfg(), TINY, SPEC)
    near, _ = train(toy, _short_cfg(ema_decay=1e-12), TINY, SPEC)
    avg, la = train(toy, _short_cfg(ema_decay=0.9), TINY, SPEC)
    assert la.column("loss_total").tolist() == lr_.column("loss_total").tolist()
    for p, q, r in zip(raw.model.parameters(), near.model.parameters(), avg.model.parameters()):
        assert torch.allclose(p, q, atol=1e-9)
    assert any(not torch.allclose(p, r) for p, r in zip(raw.model.parameters(), avg.model.parameters()))
    with pytest.raises(ValueError, match="ema_decay"):
        _short_cfg(ema_decay=1.0)


def test_task_mix_generation_only(toy):
    _, log = train(toy, _short_cfg(task_weights=(1, 0, 0)), TINY, SPEC)
    assert set(log.column("task")) == {"generation"}
    assert np.all(log.column("loss_mse") == 0)


def test_train_rejects_empty():
    with pytest.raises(ValueError, match="no training data"):
        train(BeatDataset([]), _short_cfg(), TINY, SPEC)


def test_arrays_from_numpy_use_prev_rows(toy):
    X, y = toy.X[:4], toy.y[:4]
    prev = np.full_like(X, np.nan)
    prev[1] = X[0]
    data = TrainingArrays.from_arrays(X, y, prev)
    assert data.pairs.tolist() == [[4, 1]] and data.targets.tolist() == [0, 1, 2, 3]


def test_checkpoint_roundtrip(tmp_path, toy):
    res, log = train(toy, _short_cfg(), TINY, SPEC)
    p = tmp_path / "m.ckpt"
    res.save(p)
    back = DiffusionCheckpoint.load(p)
    for (k, v), w in zip(res.model.state_dict().items(), back.model.state_dict().values()):
        assert torch.equal(v, w), k
    assert back.spectral == SPEC and back.schedule.T == 10
    res.save(tmp_path / "again.ckpt")
    assert p.read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    log.write_csv(tmp_path / "log.csv")
    assert len(TrainLog.read_csv(tmp_path / "log.csv")) == len(log)


def test_synthesis_contracts(toy):
    res, _ = train(toy, _short_cfg(), TINY, SPEC)
    beat = toy.beats[3]
    L = toy.beat_length
    mask = build_mask(TaskKind.IMPUTATION, L, gap=(80, 160))
    reqs = [
        SynthesisRequest("generation", "N", seed=0),
        SynthesisRequest("imputation", beat.label, beat.samples, mask, seed=1),
        SynthesisRequest("forecasting", "V", toy.beats[2].samples, seed=2),
    ]
    out = synthesize_batch(reqs, res.model, res.schedule, SPEC, L)
    assert out.shape == (3, L) and out.min() >= 0 and out.max() <= 1
    keep = mask.bits.astype(bool)
    assert np.array_equal(out[1, keep], beat.samples[keep])
    # batching does not change a request's result
    alone = synthesize_batch(reqs[2:], res.model, res.schedule, SPEC, L)
    np.testing.assert_allclose(alone[0], out[2], atol=1e-12)
    again = synthesize_batch(reqs, res.model, res.schedule, SPEC, L)
    assert np.array_equal(out, again)


def test_incomplete_requests():
    with pytest.raises(ValueError, match="incomplete request"):
        SynthesisRequest("forecasting", "N")
    with pytest.raises(ValueError, match="incomplete request"):
        SynthesisRequest("imputation", "N", np.zeros(10))


def test_condition_dispatch_law():
    L = 64
    x = torch.rand(1, L, dtype=torch.float64)
    for task in TaskKind:
        m = build_mask(task, L, gap=(10, 30) if task is TaskKind.IMPUTATION else None)
        mt = torch.tensor(m.bits[None], dtype=torch.float64)
        C1, C2 = condition_spectrograms(x, mt, SPEC)
        if task is TaskKind.GENERATION:
            assert not C1.any() and not C2.any()
        if task is TaskKind.FORECASTING:
            assert torch.allclose(C2 * SPEC.window_tensor().sum(), stft_tensor(2 * x - 1, SPEC))
            assert torch.allclose(C1[:, :, 0], torch.ones_like(C1[:, :, 0]) * torch.tensor([1.0, 0.0])[:, None])


def test_imputation_condition_zero_on_gap_frames():
    L, (a, b) = 270, (80, 160)
    spec = SpectralConfig()
    x = torch.rand(1, L, dtype=torch.float64)
    m = torch.tensor(build_mask(TaskKind.IMPUTATION, L, gap=(a, b)).bits[None], dtype=torch.float64)
    _, C2 = condition_spectrograms(x, m, spec)
    half = spec.n_fft // 2
    # frame k covers samples k*hop - half .. k*hop + half - 1
    inside = [k for k in range(spec.n_frames(L)) if k * spec.hop - half >= a and k * spec.hop + half - 1 <= b]
    assert inside and not C2[0, :, :, inside].any()
    assert C2[0, :, :, 0].abs().sum() > 0
