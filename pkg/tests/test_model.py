import numpy as np
import pytest

from deepca.model import (
    ConvTransformer,
    Critic,
    CriticConfig,
    DSConv,
    Generator,
    GeneratorConfig,
    cumulative_matrix,
    critic_input,
)
from deepca.tensor import Tensor, default_dtype, grad, no_grad, ops

from gradcheck import rel_err

SMALL_GEN = GeneratorConfig(depth=2, channels=(4, 8), ctl_layers=1, ctl_heads=2)
SMALL_CRITIC = CriticConfig(dsconv_kernel_len=3, dsconv_channels=2, conv_channels=2, downsample_levels=1)


# ---------------------------------------------------------------- generator


def test_generator_shape_and_range():
    g = Generator()
    x = Tensor(np.random.default_rng(0).integers(0, 3, size=(1, 1, 16, 16, 16)))
    with no_grad():
        y = g(x).data
    assert y.shape == (1, 1, 16, 16, 16)
    assert np.all((y > 0) & (y < 1))


def test_generator_is_deterministic():
    x = Tensor(np.random.default_rng(1).random((2, 1, 8, 8, 8)))
    a = Generator(rng=np.random.default_rng(5))
    b = Generator(rng=np.random.default_rng(5))
    with no_grad():
        ya, ya2, yb = a(x).data, a(x).data, b(x).data
    assert ya.tobytes() == ya2.tobytes() == yb.tobytes()


def test_generator_rejects_indivisible_dims():
    with pytest.raises(ValueError, match="divisible by 4"):
        Generator()(Tensor(np.zeros((1, 1, 16, 16, 10))))


def test_generator_without_transformer():
    g = Generator(GeneratorConfig(use_ctl=False))
    assert g.ctl is None
    with no_grad():
        assert g(Tensor(np.zeros((1, 1, 8, 8, 8)))).shape == (1, 1, 8, 8, 8)


@pytest.mark.parametrize("cfg", [
    GeneratorConfig(depth=1, channels=(8,)),
    GeneratorConfig(channels=(8, 8, 32)),
    GeneratorConfig(channels=(8, 16, 30)),
    GeneratorConfig(norm_kind="batch"),
])
def test_generator_config_validation(cfg):
    with pytest.raises(ValueError, match="generator"):
        Generator(cfg)


def test_config_json_round_trip(tmp_path):
    cfg = GeneratorConfig(channels=(4, 8, 16), use_ctl=False)
    cfg.save(tmp_path / "g.json")
    assert GeneratorConfig.load(tmp_path / "g.json") == cfg
    c = CriticConfig(offset_mode="random")
    assert CriticConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError, match="unknown"):
        CriticConfig.from_dict({"bogus": 1})


# ---------------------------------------------------------------- transformer


def test_ctl_shape():
    ctl = ConvTransformer(np.random.default_rng(0), 8, layers=8, heads=8)
    with no_grad():
        assert ctl(Tensor(np.random.default_rng(1).random((1, 8, 2, 2, 2)))).shape == (1, 8, 2, 2, 2)


def test_ctl_single_token():
    ctl = ConvTransformer(np.random.default_rng(0), 8, layers=2, heads=4)
    with no_grad():
        y = ctl(Tensor(np.random.default_rng(1).random((2, 8, 1, 1, 1)))).data
    assert y.shape == (2, 8, 1, 1, 1) and np.all(np.isfinite(y))


def test_ctl_heads_must_divide_channels():
    with pytest.raises(ValueError, match="divisible"):
        ConvTransformer(np.random.default_rng(0), 12, heads=8)


@pytest.mark.parametrize("seed", range(3))
def test_ctl_token_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        ctl = ConvTransformer(rng, 16, layers=8, heads=8)
        x = rng.standard_normal((2, 16, 2, 3, 2))
        perm = rng.permutation(12)
        xp = x.reshape(2, 16, 12)[:, :, perm].reshape(x.shape)
        with no_grad():
            y = ctl(Tensor(x)).data
            yp = ctl(Tensor(xp)).data
    expected = y.reshape(2, 16, 12)[:, :, perm].reshape(y.shape)
    assert np.max(np.abs(yp - expected)) < 1e-5


# ---------------------------------------------------------------- snake convolution


def test_cumulative_matrix_accumulates_outward():
    m = cumulative_matrix(9)
    np.testing.assert_array_equal(m @ np.ones(8), [4, 3, 2, 1, 0, 1, 2, 3, 4])
    inc = np.arange(1, 9, dtype=float)
    off = m @ inc
    assert off[4] == 0 and off[5] == inc[4] and off[3] == inc[3] and off[8] == inc[4:].sum()


def _conv1d_oracle(x, w, b, axis, k):
    """Direct loop: out[n, f, p] = b[f] + sum_{c, t} w[c*k + t, f] * x[n, c, p + (t - k//2) e_axis]."""
    n, c = x.shape[:2]
    dims = x.shape[2:]
    out = np.zeros((n, w.shape[1]) + dims)
    for t in range(k):
        shift = t - k // 2
        shifted = np.zeros_like(x)
        src = [slice(None)] * 5
        dst = [slice(None)] * 5
        if shift >= 0:
            src[2 + axis] = slice(shift, None)
            dst[2 + axis] = slice(0, dims[axis] - shift)
        else:
            src[2 + axis] = slice(0, dims[axis] + shift)
            dst[2 + axis] = slice(-shift, None)
        shifted[tuple(dst)] = x[tuple(src)]
        for ci in range(c):
            out += np.einsum("nxyz,f->nfxyz", shifted[:, ci], w[ci * k + t])
    return out + b.reshape(1, -1, 1, 1, 1)


@pytest.mark.parametrize("axis", [0, 1, 2])
@pytest.mark.parametrize("mode", ["zero", "learned"])
def test_dsconv_straight_kernel_is_axis_conv(axis, mode):
    rng = np.random.default_rng(axis)
    with default_dtype(np.float64):
        conv = DSConv(rng, 2, 3, axis, kernel_len=5, offset_mode=mode)
        conv.bias.data = rng.standard_normal(3)
        x = rng.standard_normal((2, 2, 6, 5, 7))
        with no_grad():
            y = conv(Tensor(x)).data
    expected = _conv1d_oracle(x, conv.weight.data, conv.bias.data, axis, 5)
    assert np.max(np.abs(y - expected)) < 1e-5


def test_dsconv_zero_input_zero_output():
    conv = DSConv(np.random.default_rng(0), 2, 3, 1, offset_mode="random")
    with no_grad():
        assert not conv(Tensor(np.zeros((1, 2, 4, 4, 4)))).data.any()


def test_dsconv_random_offsets_bend_the_kernel():
    x = Tensor(np.random.default_rng(0).random((1, 1, 6, 6, 6)))
    bent = DSConv(np.random.default_rng(1), 1, 2, 0, kernel_len=5, offset_mode="random")
    straight = DSConv(np.random.default_rng(1), 1, 2, 0, kernel_len=5, offset_mode="zero")
    with no_grad():
        inc = bent.increments(x).data
        assert np.all(np.abs(inc) <= 1)
        assert not np.allclose(bent(x).data, straight(x).data)


def test_dsconv_learned_increments_are_bounded():
    conv = DSConv(np.random.default_rng(0), 2, 2, 2)
    conv.offset.weight.data = np.random.default_rng(1).standard_normal(conv.offset.weight.shape).astype(np.float32) * 10
    with no_grad():
        inc = conv.increments(Tensor(np.random.default_rng(2).standard_normal((1, 2, 4, 4, 4)))).data
    assert np.all(np.abs(inc) <= 1) and np.abs(inc).max() > 0.5


@pytest.mark.parametrize("k", [2, 1, 4])
def test_dsconv_rejects_even_kernel(k):
    with pytest.raises(ValueError, match="odd"):
        DSConv(np.random.default_rng(0), 1, 1, 0, kernel_len=k)


# ---------------------------------------------------------------- critic


def test_critic_output_shape_and_channels():
    c = Critic()
    x = Tensor(np.random.default_rng(0).random((3, 2, 8, 8, 8)))
    with no_grad():
        assert c(x).shape == (3, 1)
        first = ops.concat([s(x) for s in c.snakes], axis=1)
    assert first.shape[1] == 3 * c.config.dsconv_channels


def test_critic_zero_weights_give_zero():
    c = Critic(SMALL_CRITIC)
    for p in c.parameters():
        p.data = np.zeros_like(p.data)
    with no_grad():
        out = c(Tensor(np.random.default_rng(0).random((2, 2, 8, 8, 8)))).data
    assert np.all(out == 0)


def test_critic_rejects_wrong_channels():
    with pytest.raises(ValueError, match="expected N x 2"):
        Critic()(Tensor(np.zeros((1, 1, 8, 8, 8))))


def test_critic_input_scales_condition():
    y = Tensor(np.ones((1, 1, 2, 2, 2)))
    x = Tensor(np.full((1, 1, 2, 2, 2), 2.0))
    out = critic_input(y, x).data
    assert out.shape == (1, 2, 2, 2, 2) and np.all(out[:, 1] == 1.0)


def test_critic_without_dsconv():
    c = Critic(CriticConfig(use_dsconv=False))
    assert c.snakes == []
    with no_grad():
        assert c(Tensor(np.zeros((1, 2, 8, 8, 8)))).shape == (1, 1)


def test_critic_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    with default_dtype(np.float64):
        c = Critic(CriticConfig(dsconv_kernel_len=5), rng=rng)
        # bend the snakes so the offset path is exercised
        for s in c.snakes:
            s.offset.weight.data = rng.standard_normal(s.offset.weight.shape) * 0.3
    x = rng.random((1, 2, 8, 8, 8))

    def score(a):
        with no_grad():
            return float(ops.mean(c(Tensor(a))).data)

    leaf = Tensor(x, requires_grad=True)
    (g,) = grad(ops.mean(c(leaf)), [leaf])
    # central differences on 128 random entries plus one random direction
    picks = [tuple(i) for i in np.argwhere(np.ones(x.shape))[rng.choice(x.size, 128, replace=False)]]
    h = 1e-6
    num, ana = [], []
    for i in picks:
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        num.append((score(xp) - score(xm)) / (2 * h))
        ana.append(g.data[i])
    assert rel_err(ana, num) < 1e-4
    d = rng.standard_normal(x.shape)
    directional = (score(x + h * d) - score(x - h * d)) / (2 * h)
    assert abs(directional - np.sum(g.data * d)) / abs(directional) < 1e-4


def _param_check(module, loss_fn, rng, n_params=40):
    """Tape gradient vs central differences on a random subset of parameter entries."""
    params = module.parameters()
    loss = loss_fn()
    grads = grad(loss, params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(3, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            h = 1e-6 * max(1.0, abs(orig))
            flat[i] = orig + h
            with no_grad():
                fp = loss_fn().item()
            flat[i] = orig - h
            with no_grad():
                fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = 0.0 if g is None else g.data.reshape(-1)[i]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


def test_generator_parameter_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    with default_dtype(np.float64):
        g = Generator(SMALL_GEN, rng=rng)
        x = Tensor(rng.integers(0, 3, size=(2, 1, 4, 4, 4)).astype(np.float64))
        y = Tensor((rng.random((2, 1, 4, 4, 4)) < 0.2).astype(np.float64))
        assert _param_check(g, lambda: ops.mean(ops.abs(g(x) - y)) + ops.mean(g(x) * g(x)), rng) < 1e-4


def test_critic_parameter_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    with default_dtype(np.float64):
        c = Critic(SMALL_CRITIC, rng=rng)
        for s in c.snakes:
            s.offset.weight.data = rng.standard_normal(s.offset.weight.shape) * 0.3
        x = Tensor(rng.random((2, 2, 4, 4, 4)))
        assert _param_check(c, lambda: ops.mean(c(x)), rng) < 1e-4


def test_every_parameter_gets_a_finite_nonzero_gradient():
    rng = np.random.default_rng(6)
    g, c = Generator(rng=rng), Critic(rng=rng)
    x = Tensor(rng.integers(0, 3, size=(2, 1, 8, 8, 8)))
    y = Tensor((rng.random((2, 1, 8, 8, 8)) < 0.1).astype(np.float32))
    fake = g(x)
    loss = ops.mean(c(critic_input(fake, x))) - ops.mean(c(critic_input(y, x))) + 100 * ops.mean(ops.abs(fake - y))
    params = g.parameters() + c.parameters()
    grads = grad(loss, params)
    names = [n for n, _ in g.named_parameters()] + [n for n, _ in c.named_parameters()]
    for name, gr in zip(names, grads):
        assert gr is not None, name
        assert np.all(np.isfinite(gr.data)), name
        if name != "fc.bias":  # a constant score offset cancels in E_fake - E_real
            assert np.any(gr.data != 0), name


def test_state_dict_round_trip_is_bit_exact():
    rng = np.random.default_rng(7)
    g = Generator(rng=rng)
    g2 = Generator(rng=np.random.default_rng(99))
    g2.load_state_dict(g.state_dict())
    x = Tensor(rng.random((1, 1, 8, 8, 8)))
    with no_grad():
        assert g(x).data.tobytes() == g2(x).data.tobytes()


def test_output_prior_sets_head_log_odds():
    g = Generator(SMALL_GEN, rng=np.random.default_rng(0))
    g.set_output_prior(0.02)
    assert abs(g.head.bias.data[0] - np.log(0.02 / 0.98)) < 1e-6
    with no_grad():
        y = g(Tensor(np.zeros((1, 1, 8, 8, 8), dtype=np.float32))).data
    assert y.mean() < 0.2  # every voxel starts near background
    g.set_output_prior(0.0)  # an empty training set must not give -inf
    assert np.isfinite(g.head.bias.data).all()
