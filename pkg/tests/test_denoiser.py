import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tempodiff.denoiser import (
    CHECKPOINT_VERSION,
    ControlledUNet,
    DenoiserConfig,
    adapt_control_channels,
    encode_control,
    load_checkpoint,
    predict_noise,
    save_checkpoint,
    set_train_mode,
)
from tempodiff.schedule import NoisyState, make_linear_schedule, training_loss


def _model(seed=0, **cfg):
    torch.manual_seed(seed)
    return ControlledUNet(DenoiserConfig(**cfg)).eval()


def _randomize_connectors(model, seed=1, scale=0.1):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.connectors.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


def _inputs(b=2, k=5, hw=32, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(b, 3, hw, hw, generator=g, dtype=dtype)
    t = torch.randint(1, 1001, (b,), generator=g)
    tok = torch.randint(0, 5, (b,), generator=g)
    ctrl = torch.rand(b, k, hw, hw, generator=g, dtype=dtype)
    return x, t, tok, ctrl


@pytest.fixture(scope="module")
def fresh():
    return _model()


def test_connectors_start_at_zero(fresh):
    for p in fresh.connectors.parameters():
        assert torch.count_nonzero(p) == 0


def test_duplicated_encoder_parameter_counts_match(fresh):
    base = sum(p.numel() for p in fresh.base_encoder.parameters())
    ctrl = sum(p.numel() for p in fresh.control_encoder.parameters())
    assert base == ctrl


def test_output_shape(fresh):
    x, t, tok, ctrl = _inputs()
    with torch.no_grad():
        assert fresh(x, t, tok, ctrl).shape == x.shape


def test_fresh_model_ignores_control(fresh):
    x, t, tok, _ = _inputs()
    with torch.no_grad():
        ref = fresh.base_forward(x, t, tok)
        for seed in range(4):
            ctrl = _inputs(seed=seed + 10)[3]
            for c in (0.3, 1.0):
                out = fresh(x, t, tok, ctrl, c)
                assert torch.max(torch.abs(out - ref)).item() == 0.0


def test_strength_endpoints_exact():
    m = _model()
    _randomize_connectors(m)
    x, t, tok, ctrl = _inputs()
    with torch.no_grad():
        base = m.base_forward(x, t, tok)
        assert torch.equal(m(x, t, tok, ctrl, 0.0), base)
        full = m(x, t, tok, ctrl, 1.0)
        # unscaled blended output, assembled by hand
        emb, feats = m.base_encoder(x, t, tok)
        _, cf = m.control_encoder(x, t, tok, m.hint(ctrl))
        manual = m.base_decoder(tuple(f + conn(c) for f, conn, c in zip(feats, m.connectors, cf)), emb)
        assert torch.equal(full, manual)
        assert not torch.equal(full, base)


def test_output_continuous_in_strength():
    m = _model()
    _randomize_connectors(m)
    x, t, tok, ctrl = _inputs(b=1)
    with torch.no_grad():
        outs = [m(x, t, tok, ctrl, c) for c in np.linspace(0, 1, 101)]
    deltas = [torch.max(torch.abs(a - b)).item() for a, b in zip(outs, outs[1:])]
    total = torch.max(torch.abs(outs[-1] - outs[0])).item()
    # each 0.01 step moves the output by a small, bounded fraction of the full swing
    assert max(deltas) < 0.1 * total
    with torch.no_grad():
        tiny = torch.max(torch.abs(m(x, t, tok, ctrl, 0.5) - m(x, t, tok, ctrl, 0.5 + 1e-6))).item()
    assert tiny < 1e-3 * total


@pytest.mark.parametrize("c", [-0.01, 1.01])
def test_strength_out_of_range(fresh, c):
    x, t, tok, ctrl = _inputs()
    with pytest.raises(ValueError):
        fresh(x, t, tok, ctrl, c)


def test_control_channel_mismatch(fresh):
    x, t, tok, _ = _inputs()
    with pytest.raises(ValueError):
        fresh(x, t, tok, torch.zeros(2, 3, 32, 32), 1.0)


def test_encode_control_contract(fresh):
    zero = encode_control(fresh, np.zeros((5, 32, 32)))
    assert np.isfinite(zero).all()
    assert zero.shape == (fresh.config.base_width, 32, 32)
    bumped = np.zeros((5, 32, 32))
    bumped[2, 10, 10] = 1.0
    assert np.abs(encode_control(fresh, bumped) - zero).max() > 0
    with pytest.raises(ValueError):
        encode_control(fresh, np.zeros((4, 32, 32)))


def test_hint_downsample_variant():
    m = _model(hint_downsample=2)
    assert encode_control(m, np.zeros((5, 64, 64))).shape[-2:] == (32, 32)


def test_predict_noise_numpy_wrapper():
    m = _model()
    _randomize_connectors(m)
    state = NoisyState(np.random.default_rng(0).standard_normal((3, 32, 32)), 400)
    ctrl = np.random.default_rng(1).random((5, 32, 32))
    out = predict_noise(m, state, 2, ctrl, 0.5)
    with torch.no_grad():
        ref = m(torch.as_tensor(state.values, dtype=torch.float32)[None], torch.tensor([400]), torch.tensor([2]),
                torch.as_tensor(ctrl, dtype=torch.float32)[None], 0.5)[0].numpy()
    np.testing.assert_array_equal(out, ref)


def test_fresh_tokens_equal_null_token(fresh):
    x, t, _, _ = _inputs(b=1)
    with torch.no_grad():
        null = fresh.base_forward(x, t, torch.tensor([0]))
        for tok in (1, 2, 4):
            assert torch.equal(fresh.base_forward(x, t, torch.tensor([tok])), null)


def test_token_changes_prediction_once_embedded():
    m = _model()
    with torch.no_grad():
        m.base_encoder.conditioner.token_table.weight[2].fill_(0.5)
    x, t, _, _ = _inputs(b=1)
    with torch.no_grad():
        a = m.base_forward(x, t, torch.tensor([1]))
        b = m.base_forward(x, t, torch.tensor([2]))
    assert not torch.equal(a, b)


# ------------------------------------------------------------ training modes


def _one_step(model, mode, seed=0):
    mask = set_train_mode(model, mode)
    opt = torch.optim.SGD([p for p in model.parameters() if p.requires_grad], lr=0.1)
    x, t, tok, ctrl = _inputs(b=2, seed=seed)
    loss = torch.mean((model(x, t, tok, ctrl) - torch.randn_like(x)) ** 2)
    loss.backward()
    opt.step()
    return mask


def test_locked_mode_freezes_base():
    m = _model()
    before = {k: v.clone() for k, v in m.state_dict().items()}
    mask = _one_step(m, "locked")
    assert mask == {"base": False, "control": True, "connector": True}
    after = m.state_dict()
    for k in before:
        if k.startswith("base_"):
            assert torch.equal(before[k], after[k]), k
    assert any(not torch.equal(before[k], after[k]) for k in before if k.startswith("connectors"))


def test_unlocked_mode_updates_base():
    m = _model()
    before = {k: v.clone() for k, v in m.state_dict().items()}
    _one_step(m, "unlocked")
    after = m.state_dict()
    assert any(not torch.equal(before[k], after[k]) for k in before if k.startswith("base_"))


def test_mode_does_not_change_prediction():
    m = _model()
    _randomize_connectors(m)
    x, t, tok, ctrl = _inputs()
    with torch.no_grad():
        set_train_mode(m, "locked")
        a = m(x, t, tok, ctrl)
        set_train_mode(m, "unlocked")
        b = m(x, t, tok, ctrl)
    assert torch.equal(a, b)


def test_bad_mode():
    with pytest.raises(ValueError):
        set_train_mode(_model(), "frozen")


# ---------------------------------------------------------- gradient check


def test_gradients_match_central_differences():
    torch.manual_seed(0)
    m = ControlledUNet(DenoiserConfig()).double().eval()
    _randomize_connectors(m, scale=0.2)
    sched = make_linear_schedule()
    x0, t, tok, ctrl = _inputs(b=2, hw=4, dtype=torch.float64, seed=3)
    x0 = x0.clamp(-1, 1)
    eps = torch.randn(x0.shape, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
    steps = np.array([120, 640])

    def loss_fn():
        den = lambda xt, tt, tk, cc: m(xt, torch.as_tensor(tt), tk, cc)
        return training_loss(den, x0, steps, eps, tok, ctrl, sched)

    m.zero_grad()
    loss_fn().backward()
    params = dict(m.named_parameters())
    rng = np.random.default_rng(0)
    names = sorted(params)
    picks = []
    # spread picks across the base, control and connector groups
    for prefix in ("base_encoder", "base_decoder", "control_encoder", "hint", "connectors"):
        group = [n for n in names if n.startswith(prefix) and params[n].grad is not None]
        for n in rng.choice(group, size=3, replace=False):
            picks.append((n, int(rng.integers(params[n].numel()))))
    assert len(picks) >= 10
    h = 1e-6
    for name, idx in picks:
        p = params[name]
        flat = p.data.view(-1)
        analytic = p.grad.view(-1)[idx].item()
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + h
            up = loss_fn().item()
            flat[idx] = orig - h
            down = loss_fn().item()
            flat[idx] = orig
        numeric = (up - down) / (2 * h)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        assert abs(analytic - numeric) / denom < 1e-4, (name, idx, analytic, numeric)


# ------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    m = _model(seed=5)
    _randomize_connectors(m)
    path = save_checkpoint(m, tmp_path / "m.npz", {"config_hash": "abc"})
    loaded, meta = load_checkpoint(path, expected=m.config)
    assert meta == {"config_hash": "abc"}
    for (k, a), (_, b) in zip(m.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k


def test_checkpoint_rejects_config_mismatch(tmp_path):
    path = save_checkpoint(_model(), tmp_path / "m.npz")
    with pytest.raises(ValueError):
        load_checkpoint(path, expected=DenoiserConfig(control_channels=3))


def test_checkpoint_rejects_version(tmp_path):
    path = save_checkpoint(_model(), tmp_path / "m.npz")
    with np.load(path) as data:
        arrays = dict(data)
    arrays["__version__"] = np.array("other/0")
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.npz")
    assert str(np.load(path)["__version__"]) == CHECKPOINT_VERSION
    assert json.loads(str(np.load(path)["__config__"]))["base_width"] == 32


def test_adapt_control_channels_keeps_encoders():
    m = _model()
    out = adapt_control_channels(m, 3)
    assert out.config.control_channels == 3
    for k, v in m.base_encoder.state_dict().items():
        assert torch.equal(v, out.base_encoder.state_dict()[k])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 1.0))
def test_zero_connectors_ignore_control_any_t(t, c):
    m = _model()
    x, _, tok, ctrl = _inputs(b=1)
    tt = torch.tensor([t])
    with torch.no_grad():
        assert torch.equal(m(x, tt, tok, ctrl, c), m.base_forward(x, tt, tok))
