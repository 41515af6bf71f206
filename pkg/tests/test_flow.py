import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from kwglow.dsp import MelSpectrogram
from kwglow.errors import (
    ConfigInvalid,
    MelTooShort,
    NonFiniteScale,
    NotDivisible,
    ShapeMismatch,
    SingularW,
)
from kwglow.flow import (
    CouplingNet,
    FlowConfig,
    FlowModel,
    ForwardResult,
    coupling_backward,
    coupling_forward,
    coupling_inverse,
    invconv_backward,
    invconv_forward,
    invconv_inverse,
    loss_and_gradients,
    negative_log_likelihood,
    orthogonal_init,
    parameter_spec,
    sample_latent,
    squeeze,
    unsqueeze,
    upsample_condition,
)


def fake_mel(n_mels: int, n_frames: int, hop: int, fill: float = 0.1) -> MelSpectrogram:
    vals = np.full((n_mels, n_frames), fill, dtype=np.float32)
    vals += 0.01 * np.arange(n_frames)[None, :]
    return MelSpectrogram(vals, hop, 22050)


def mel_for(config: FlowConfig, n_samples: int, hop: int | None = None) -> MelSpectrogram:
    hop = hop or config.group_size
    return fake_mel(config.n_mel_channels, n_samples // hop + 1, hop)


# --- squeeze / unsqueeze ---

def test_squeeze_layout():
    x = np.arange(1, 17, dtype=np.float32)
    g = squeeze(x, 4)
    expected = np.array([[1, 5, 9, 13],
                         [2, 6, 10, 14],
                         [3, 7, 11, 15],
                         [4, 8, 12, 16]], dtype=np.float32)
    assert np.array_equal(g, expected)
    assert np.array_equal(unsqueeze(g), x)


def test_unsqueeze_single_frame():
    assert np.array_equal(unsqueeze(np.array([[3.0], [7.0]])), [3.0, 7.0])


def test_squeeze_rejects_bad_shapes():
    with pytest.raises(NotDivisible):
        squeeze(np.arange(10, dtype=np.float32), 4)
    with pytest.raises(ShapeMismatch):
        squeeze(np.zeros((2, 4)), 2)


@given(st.integers(min_value=2, max_value=16), st.integers(min_value=1, max_value=50))
def test_unsqueeze_inverts_squeeze(group, t):
    x = np.random.default_rng(group * 100 + t).standard_normal(group * t)
    assert np.array_equal(unsqueeze(squeeze(x, group)), x)


# --- config schedule ---

def test_default_emission_schedule():
    cfg = FlowConfig()
    cfg.validate()
    assert cfg.emission_flows() == [4, 8]
    assert [cfg.live_channels(k) for k in range(1, 13)] == [8, 8, 8, 8, 6, 6, 6, 6, 4, 4, 4, 4]
    assert cfg.latent_block_sizes() == [2, 2, 4]


def test_no_early_outputs_schedule():
    cfg = FlowConfig(n_flows=3, group_size=4, early_size=0)
    assert cfg.emission_flows() == []
    assert [cfg.live_channels(k) for k in (1, 2, 3)] == [4, 4, 4]
    assert cfg.latent_block_sizes() == [4]


def test_config_validation_rejections():
    with pytest.raises(ConfigInvalid):
        FlowConfig(wn_kernel=2).validate()
    with pytest.raises(ConfigInvalid):
        FlowConfig(n_flows=0).validate()
    with pytest.raises(ConfigInvalid):
        FlowConfig(group_size=1).validate()
    with pytest.raises(ConfigInvalid):
        FlowConfig(sigma_train=0.0).validate()
    # emissions would consume every channel before the last flow
    with pytest.raises(ConfigInvalid):
        FlowConfig(group_size=4, n_flows=5, early_every=1, early_size=2).validate()


# --- conditioning upsampler ---

def test_upsample_repeats_columns():
    mel = fake_mel(3, 4, hop=8)
    up = upsample_condition(mel, 7, 4)
    assert up.shape == (3, 7)
    assert np.array_equal(up[:, 0], mel.values[:, 0])
    assert np.array_equal(up[:, 1], mel.values[:, 0])
    assert np.array_equal(up[:, 2], mel.values[:, 1])
    assert np.array_equal(up[:, 6], mel.values[:, 3])


def test_upsample_rejects_indivisible_hop():
    with pytest.raises(ConfigInvalid):
        upsample_condition(fake_mel(3, 4, hop=6), 5, 4)


def test_upsample_rejects_short_mel():
    with pytest.raises(MelTooShort):
        upsample_condition(fake_mel(3, 2, hop=8), 5, 4)


def test_upsample_covers_every_aligned_length():
    # centered framing guarantees coverage for any group-aligned sample count
    hop, group = 256, 8
    repeat = hop // group
    for n in range(8, 16001, 8):
        n_frames = n // hop + 1
        mel = MelSpectrogram(np.arange(n_frames, dtype=np.float32)[None, :], hop, 22050)
        up = upsample_condition(mel, n // group, group)
        assert up.shape == (1, n // group)
        assert up[0, -1] == (n // group - 1) // repeat


# --- invertible mixing ---

def test_invconv_doubling_matrix():
    x = np.random.default_rng(0).standard_normal((8, 10)).astype(np.float32)
    w = 2.0 * np.eye(8, dtype=np.float32)
    y, log_det = invconv_forward(x, w)
    assert np.allclose(y, 2.0 * x)
    assert log_det == pytest.approx(10 * 8 * np.log(2.0))
    assert np.allclose(invconv_inverse(y, w), x, atol=1e-6)


def test_invconv_scaled_identity_inverts_exactly():
    # division by 2 is exact in binary floating point
    x = np.random.default_rng(30).standard_normal((4, 6)).astype(np.float32)
    w = 2.0 * np.eye(4, dtype=np.float32)
    y, _ = invconv_forward(x, w)
    assert np.array_equal(invconv_inverse(y, w), x)


def test_invconv_log_det_matches_lu_factorization():
    rng = np.random.default_rng(1)
    for n, t in ((4, 7), (6, 3), (8, 25)):
        w = rng.standard_normal((n, n))
        x = rng.standard_normal((n, t))
        _, log_det = invconv_forward(x, w)
        p, l, u = scipy.linalg.lu(w)
        oracle = t * np.log(np.abs(np.diag(u))).sum()
        assert abs(log_det - oracle) / abs(oracle) <= 1e-10


def test_invconv_rejects_singular():
    x = np.ones((4, 3))
    with pytest.raises(SingularW):
        invconv_forward(x, np.zeros((4, 4)))
    with pytest.raises(SingularW):
        invconv_inverse(x, np.zeros((4, 4)))
    # rank-deficient but nonzero
    w = np.outer(np.arange(1.0, 5.0), np.arange(1.0, 5.0))
    with pytest.raises(SingularW):
        invconv_forward(x, w)


def test_invconv_gradient_including_determinant_term():
    rng = np.random.default_rng(2)
    n, t = 4, 6
    x = rng.standard_normal((n, t))
    w = orthogonal_init(n, rng, np.float64) + 0.1 * rng.standard_normal((n, n))
    probe = rng.standard_normal((n, t))
    coef = 0.7

    def loss(w_):
        y, log_det = invconv_forward(x, w_)
        return float((probe * y).sum() + coef * log_det)

    _, grad_w = invconv_backward(probe, x, w, coef)
    eps = 1e-6
    for i in range(n):
        for j in range(n):
            w_hi, w_lo = w.copy(), w.copy()
            w_hi[i, j] += eps
            w_lo[i, j] -= eps
            fd = (loss(w_hi) - loss(w_lo)) / (2 * eps)
            assert abs(fd - grad_w[i, j]) <= 1e-5 * max(1.0, abs(fd))


def test_orthogonal_init_properties():
    for n in (2, 4, 8):
        w = orthogonal_init(n, np.random.default_rng(n), np.float64)
        assert np.allclose(w @ w.T, np.eye(n), atol=1e-12)
        assert np.linalg.det(w) == pytest.approx(1.0)


# --- affine coupling ---

def tiny_net(cfg: FlowConfig, seed: int = 0, dtype=np.float32,
             channels: int = 4) -> CouplingNet:
    rng = np.random.default_rng(seed)
    return CouplingNet("net", (channels + 1) // 2, channels // 2, cfg, rng, dtype)


def test_coupling_is_identity_at_init(tiny_config):
    net = tiny_net(tiny_config)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 10)).astype(np.float32)
    cond = rng.standard_normal((8, 10)).astype(np.float32)
    y, sum_log_s, _ = coupling_forward(x, cond, net)
    assert np.array_equal(y, x)
    assert sum_log_s == 0.0


def test_coupling_constant_scale(tiny_config):
    net = tiny_net(tiny_config)
    c = 0.3
    net.end_b.value[:net.n_trans] = c          # log-scale head bias
    net.end_b.value[net.n_trans:] = 0.25       # additive head bias
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 10)).astype(np.float32)
    cond = rng.standard_normal((8, 10)).astype(np.float32)
    y, sum_log_s, _ = coupling_forward(x, cond, net)
    assert sum_log_s == pytest.approx(20 * c, rel=1e-6)  # n_trans=2, T=10
    assert np.array_equal(y[:2], x[:2])
    assert np.allclose(y[2:], x[2:] * np.exp(c) + 0.25, atol=1e-6)


def test_coupling_inverse_round_trip(tiny_config):
    net = tiny_net(tiny_config, seed=5)
    # give the zero head real values so the transform is non-trivial
    rng = np.random.default_rng(6)
    net.end_w.value[:] = 0.1 * rng.standard_normal(net.end_w.value.shape)
    net.end_b.value[:] = 0.1 * rng.standard_normal(net.end_b.value.shape)
    x = rng.standard_normal((4, 12)).astype(np.float32)
    cond = rng.standard_normal((8, 12)).astype(np.float32)
    y, _, _ = coupling_forward(x, cond, net)
    assert not np.allclose(y, x)
    back = coupling_inverse(y, cond, net)
    assert np.abs(back - x).max() <= 1e-5


def test_coupling_inverse_rejects_nonfinite_network(tiny_config):
    net = tiny_net(tiny_config, seed=7)
    net.end_w.value[0, 0] = np.nan
    rng = np.random.default_rng(8)
    y = rng.standard_normal((4, 6)).astype(np.float32)
    cond = rng.standard_normal((8, 6)).astype(np.float32)
    with pytest.raises(NonFiniteScale):
        coupling_inverse(y, cond, net)


def test_coupling_channel_mismatch(tiny_config):
    net = tiny_net(tiny_config)
    with pytest.raises(ShapeMismatch):
        coupling_forward(np.zeros((6, 4), dtype=np.float32),
                         np.zeros((8, 4), dtype=np.float32), net)


def test_coupling_gradients(tiny_config):
    net = tiny_net(tiny_config, seed=9, dtype=np.float64)
    rng = np.random.default_rng(10)
    net.end_w.value[:] = 0.1 * rng.standard_normal(net.end_w.value.shape)
    x = rng.standard_normal((4, 6))
    cond = rng.standard_normal((8, 6))
    probe = rng.standard_normal((4, 6))
    coef = 0.37

    def loss_at(x_):
        y, sum_log_s, _ = coupling_forward(x_, cond, net)
        return float((probe * y).sum() + coef * sum_log_s)

    _, _, ctx = coupling_forward(x, cond, net, save_ctx=True)
    for p in net.parameters():
        p.zero_grad()
    grad_x = coupling_backward(probe, coef, net, ctx)

    eps = 1e-6
    flat = x.reshape(-1)
    for i in range(0, flat.size, 5):
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_at(x)
        flat[i] = orig - eps
        lo = loss_at(x)
        flat[i] = orig
        fd = (hi - lo) / (2 * eps)
        assert abs(fd - grad_x.reshape(-1)[i]) <= 1e-6 * max(1.0, abs(fd))

    w = net.end_w
    flatw = w.value.reshape(-1)
    for i in range(0, flatw.size, 7):
        orig = flatw[i]
        flatw[i] = orig + eps
        hi = loss_at(x)
        flatw[i] = orig - eps
        lo = loss_at(x)
        flatw[i] = orig
        fd = (hi - lo) / (2 * eps)
        assert abs(fd - w.grad.reshape(-1)[i]) <= 1e-6 * max(1.0, abs(fd))


# --- assembled model ---

def test_forward_shapes_and_init_determinant(tiny_config):
    model = FlowModel(tiny_config, np.random.default_rng(0))
    n = 64
    x = 0.3 * np.random.default_rng(1).standard_normal(n).astype(np.float32)
    fr = model.forward(x, mel_for(tiny_config, n))
    assert fr.latent.shape == (4, 16)
    assert fr.sum_log_scale == 0.0                       # couplings start as identity
    assert abs(fr.sum_log_det_w) <= 1e-4                 # orthogonal init, det +1


def test_forward_latent_matches_block_layout():
    cfg = FlowConfig(n_mel_channels=8, n_flows=12, group_size=8, early_every=4,
                     early_size=2, wn_layers=2, wn_channels=16)
    model = FlowModel(cfg, np.random.default_rng(0))
    n = 8 * 20
    x = 0.3 * np.random.default_rng(1).standard_normal(n).astype(np.float32)
    fr = model.forward(x, mel_for(cfg, n))
    assert fr.latent.shape == (8, 20)
    assert cfg.latent_block_sizes() == [2, 2, 4]


def identity_model(cfg: FlowConfig) -> FlowModel:
    """Couplings already start as the identity; pin the mixing matrices too."""
    model = FlowModel(cfg, np.random.default_rng(0))
    for w in model.inv_convs:
        w.value = np.eye(w.value.shape[0], dtype=np.float32)
    return model


def test_identity_model_latent_is_the_squeezed_input(early_config):
    model = identity_model(early_config)
    n = 8 * 20
    x = 0.3 * np.random.default_rng(31).standard_normal(n).astype(np.float32)
    fr = model.forward(x, mel_for(early_config, n))
    # early outputs peel rows off the top, so the blocks reassemble in order
    assert np.array_equal(fr.latent, squeeze(x, 8))
    assert fr.sum_log_scale == 0.0
    assert fr.sum_log_det_w == 0.0


def test_identity_model_inverse_is_unsqueeze(early_config):
    model = identity_model(early_config)
    z = 0.5 * np.random.default_rng(32).standard_normal((8, 12)).astype(np.float32)
    mel = mel_for(early_config, 8 * 12)
    assert np.array_equal(model.inverse(z, mel), unsqueeze(z))
    silence = model.inverse(np.zeros((8, 12), dtype=np.float32), mel)
    assert np.array_equal(silence, np.zeros(96, dtype=np.float32))


@pytest.mark.parametrize("seed", [0, 1])
def test_round_trip_small_model(tiny_config, seed):
    from kwglow.checks import perturb_model

    model = FlowModel(tiny_config, np.random.default_rng(seed))
    perturb_model(model, np.random.default_rng(seed + 100))
    n = 4 * 30
    x = 0.3 * np.random.default_rng(seed + 7).standard_normal(n).astype(np.float32)
    mel = mel_for(tiny_config, n)
    fr = model.forward(x, mel)
    back = model.inverse(fr.latent, mel)
    assert np.abs(back - x).max() <= 1e-4


def test_round_trip_with_early_outputs(early_config):
    from kwglow.checks import perturb_model

    model = FlowModel(early_config, np.random.default_rng(2))
    perturb_model(model, np.random.default_rng(3))
    n = 8 * 40
    x = 0.3 * np.random.default_rng(4).standard_normal(n).astype(np.float32)
    mel = mel_for(early_config, n)
    fr = model.forward(x, mel)
    back = model.inverse(fr.latent, mel)
    assert np.abs(back - x).max() <= 1e-4


def test_forward_then_inverse_is_identity_on_latents(tiny_config):
    # opposite direction: latent -> samples -> latent
    from kwglow.checks import perturb_model

    model = FlowModel(tiny_config, np.random.default_rng(5))
    perturb_model(model, np.random.default_rng(6))
    latent = 0.5 * np.random.default_rng(7).standard_normal((4, 9)).astype(np.float32)
    mel = mel_for(tiny_config, 4 * 9)
    samples = model.inverse(latent, mel)
    fr = model.forward(samples, mel)
    assert np.abs(fr.latent - latent).max() <= 1e-4


def test_change_of_variables_identity(tiny_config):
    """Accumulated log-dets equal the log-determinant of the numerical Jacobian."""
    from kwglow.checks import perturb_model

    model = FlowModel(tiny_config, np.random.default_rng(8), dtype=np.float64)
    perturb_model(model, np.random.default_rng(9))
    n = 16
    mel = mel_for(tiny_config, n)
    rng = np.random.default_rng(10)
    for _ in range(3):
        x = 0.4 * rng.standard_normal(n)
        fr = model.forward(x, mel)
        eps = 1e-5
        jac = np.empty((n, n))
        for j in range(n):
            hi, lo = x.copy(), x.copy()
            hi[j] += eps
            lo[j] -= eps
            d = model.forward(hi, mel).latent - model.forward(lo, mel).latent
            jac[:, j] = unsqueeze(d) / (2 * eps)
        sign, log_det = np.linalg.slogdet(jac)
        assert sign != 0
        analytic = fr.sum_log_scale + fr.sum_log_det_w
        assert abs(analytic - log_det) / max(abs(log_det), 1.0) <= 1e-3


def test_model_rejects_wrong_mel_height(tiny_config):
    model = FlowModel(tiny_config, np.random.default_rng(0))
    bad = fake_mel(5, 17, hop=4)
    with pytest.raises(ShapeMismatch):
        model.forward(np.zeros(64, dtype=np.float32), bad)


def test_inverse_rejects_wrong_latent_shape(tiny_config):
    model = FlowModel(tiny_config, np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        model.inverse(np.zeros((3, 10), dtype=np.float32), mel_for(tiny_config, 40))


def test_parameter_spec_matches_model(tiny_config, early_config):
    for cfg in (tiny_config, early_config, FlowConfig(wn_layers=2, wn_channels=8)):
        model = FlowModel(cfg, np.random.default_rng(0))
        assert [(p.name, p.value.shape) for p in model.parameters()] == parameter_spec(cfg)


def test_parameter_names_are_unique(early_config):
    names = [n for n, _ in parameter_spec(early_config)]
    assert len(names) == len(set(names))


def test_output_head_starts_at_zero(tiny_config):
    model = FlowModel(tiny_config, np.random.default_rng(0))
    for net in model.couplings:
        assert np.all(net.end_w.value == 0.0)
        assert np.all(net.end_b.value == 0.0)
        assert np.any(net.start_w.value != 0.0)


# --- likelihood ---

def test_nll_of_unit_latent():
    fr = ForwardResult(np.ones((8, 1), dtype=np.float32), 0.0, 0.0)
    nll = negative_log_likelihood(fr, sigma=1.0)
    # eight unit entries: summed quadratic term is 4.0, i.e. 0.5 per entry
    assert nll.z_term * fr.latent.size == pytest.approx(4.0)
    assert nll.z_term == pytest.approx(0.5)
    assert nll.total == pytest.approx(0.5)


def test_nll_zero_latent_leaves_log_det_terms():
    fr = ForwardResult(np.zeros((4, 2), dtype=np.float32), 1.6, 0.8)
    nll = negative_log_likelihood(fr, sigma=1.0)
    assert nll.z_term == 0.0
    assert nll.log_s_term == pytest.approx(0.2)
    assert nll.log_det_w_term == pytest.approx(0.1)
    assert nll.total == pytest.approx(-0.3)


def test_nll_sigma_dependence():
    fr = ForwardResult(np.full((4, 2), 0.5, dtype=np.float32), 0.0, 0.0)
    halves = negative_log_likelihood(fr, sigma=0.5)
    ones = negative_log_likelihood(fr, sigma=1.0)
    twos = negative_log_likelihood(fr, sigma=2.0)
    assert halves.z_term > ones.z_term > twos.z_term
    assert halves.z_term == pytest.approx(4.0 * ones.z_term)
    with pytest.raises(ConfigInvalid):
        negative_log_likelihood(fr, sigma=0.0)


def test_fresh_model_loss_is_the_pure_quadratic_term(early_config):
    # zero-init couplings and orthogonal mixing leave both Jacobian sums at
    # zero, and orthogonal mixing preserves the sum of squares
    model = FlowModel(early_config, np.random.default_rng(33))
    n = 8 * 16
    x = 0.3 * np.random.default_rng(34).standard_normal(n).astype(np.float32)
    fr = model.forward(x, mel_for(early_config, n))
    nll = negative_log_likelihood(fr, sigma=1.0)
    assert fr.sum_log_scale == 0.0
    assert abs(fr.sum_log_det_w) <= 1e-5
    assert nll.z_term == pytest.approx(float((x ** 2).sum()) / (2 * n), rel=1e-5)
    assert nll.total == pytest.approx(nll.z_term, rel=1e-4)


def test_nll_matches_gaussian_density(tiny_config):
    """-n*total - (n/2) ln(2 pi sigma^2) reconstructs ln p(x) under the flow."""
    from kwglow.checks import perturb_model

    model = FlowModel(tiny_config, np.random.default_rng(11), dtype=np.float64)
    perturb_model(model, np.random.default_rng(12))
    n = 16
    mel = mel_for(tiny_config, n)
    x = 0.4 * np.random.default_rng(13).standard_normal(n)
    sigma = 0.8
    fr = model.forward(x, mel)
    nll = negative_log_likelihood(fr, sigma)

    z = fr.latent.reshape(-1)
    log_gauss = -0.5 * (z ** 2).sum() / sigma ** 2 - 0.5 * n * np.log(2 * np.pi * sigma ** 2)
    eps = 1e-5
    jac = np.empty((n, n))
    for j in range(n):
        hi, lo = x.copy(), x.copy()
        hi[j] += eps
        lo[j] -= eps
        jac[:, j] = unsqueeze(model.forward(hi, mel).latent
                              - model.forward(lo, mel).latent) / (2 * eps)
    _, log_det = np.linalg.slogdet(jac)
    log_p = log_gauss + log_det
    reconstructed = -n * nll.total - 0.5 * n * np.log(2 * np.pi * sigma ** 2)
    assert reconstructed == pytest.approx(log_p, rel=1e-3)


def test_loss_and_gradients_against_finite_differences(tiny_config):
    model = FlowModel(tiny_config, np.random.default_rng(14), dtype=np.float64)
    from kwglow.checks import perturb_model

    perturb_model(model, np.random.default_rng(15))
    n = 32
    mel = mel_for(tiny_config, n)
    x = 0.4 * np.random.default_rng(16).standard_normal(n)
    sigma = 0.9

    model.zero_grad()
    loss_and_gradients(model, x, mel, sigma)

    rng = np.random.default_rng(17)
    eps = 1e-6
    for p in model.parameters():
        flat = p.value.reshape(-1)
        for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            hi = negative_log_likelihood(model.forward(x, mel), sigma).total
            flat[i] = orig - eps
            lo = negative_log_likelihood(model.forward(x, mel), sigma).total
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            assert abs(fd - p.grad.reshape(-1)[i]) <= 1e-5 * max(1.0, abs(fd)), p.name


def test_gradient_scale_factor(tiny_config):
    model = FlowModel(tiny_config, np.random.default_rng(18), dtype=np.float64)
    n = 32
    mel = mel_for(tiny_config, n)
    x = 0.4 * np.random.default_rng(19).standard_normal(n)
    model.zero_grad()
    loss_and_gradients(model, x, mel, 1.0, scale=1.0)
    full = {p.name: p.grad.copy() for p in model.parameters()}
    model.zero_grad()
    loss_and_gradients(model, x, mel, 1.0, scale=0.25)
    for p in model.parameters():
        assert np.allclose(p.grad, 0.25 * full[p.name], atol=1e-12)


# --- sampling and synthesis ---

def test_sample_latent_statistics():
    rng = np.random.default_rng(20)
    z = sample_latent(1_000_000, 0.7, rng, dtype=np.float64)
    assert abs(z.mean()) <= 0.005
    assert abs(z.std() - 0.7) <= 0.005
    with pytest.raises(ConfigInvalid):
        sample_latent(8, 0.0, rng)
    with pytest.raises(ConfigInvalid):
        sample_latent(8, -1.0, rng)


def test_sample_latent_dtype():
    z = sample_latent(16, 1.0, np.random.default_rng(0))
    assert z.dtype == np.float32


def test_infer_default_length(early_config):
    model = FlowModel(early_config, np.random.default_rng(21))
    mel = fake_mel(16, 63, hop=256)
    clip = model.infer(mel, sigma_infer=0.6)
    assert len(clip) == 16000
    assert clip.sample_rate == 22050


def test_infer_explicit_length_rounds_to_group(early_config):
    model = FlowModel(early_config, np.random.default_rng(22))
    mel = fake_mel(16, 63, hop=256)
    clip = model.infer(mel, n_samples=1001)
    assert len(clip) == 1000


def test_infer_is_seed_deterministic(early_config):
    model = FlowModel(early_config, np.random.default_rng(23))
    mel = fake_mel(16, 20, hop=256)
    a = model.infer(mel, 0.6, np.random.default_rng(5), n_samples=512).samples
    b = model.infer(mel, 0.6, np.random.default_rng(5), n_samples=512).samples
    c = model.infer(mel, 0.6, np.random.default_rng(6), n_samples=512).samples
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_infer_rejects_empty_mel(early_config):
    model = FlowModel(early_config, np.random.default_rng(24))
    with pytest.raises(MelTooShort):
        model.infer(fake_mel(16, 0, hop=256))
    with pytest.raises(MelTooShort):
        model.infer(fake_mel(16, 10, hop=256), n_samples=4)


def test_trained_on_pure_tone_puts_the_peak_on_the_tone_bin(tmp_path, tone_corpus):
    """End-to-end synthesis sanity: fit the tone corpus, then check that the
    generated waveform's dominant FFT bin is the tone's own bin. The yardstick
    learning rate is far too slow to move the zero-initialized scale head in a
    short run, so this uses a hotter one."""
    from conftest import sine_clip, train_flow_config
    from kwglow.dsp import AudioClip, MelConfig, StftConfig, mel_spectrogram
    from kwglow.training import TrainConfig, build_model, train

    cfg = TrainConfig(batch_size=4, learning_rate=5e-3, segment_length=2048,
                      seed=1234)
    final = train(tone_corpus, cfg, train_flow_config(), StftConfig(),
                  MelConfig(), tmp_path / "run", max_iterations=400,
                  log=lambda msg: None)
    model = build_model(final)

    mel = mel_spectrogram(AudioClip(sine_clip(16000), 22050), StftConfig(),
                          MelConfig())
    clip = model.infer(mel, sigma_infer=0.1, rng=np.random.default_rng(0))
    spectrum = np.abs(np.fft.rfft(clip.samples))
    assert len(clip) == 16000
    assert spectrum[1:].argmax() + 1 == len(clip) // 8


@settings(max_examples=10, deadline=None)
@given(st.integers(min_value=2, max_value=5), st.integers(min_value=4, max_value=24))
def test_round_trip_across_depths(n_flows, t):
    cfg = FlowConfig(n_mel_channels=6, n_flows=n_flows, group_size=4,
                     early_every=4, early_size=0, wn_layers=1, wn_channels=8)
    model = FlowModel(cfg, np.random.default_rng(n_flows))
    from kwglow.checks import perturb_model

    perturb_model(model, np.random.default_rng(t))
    x = 0.3 * np.random.default_rng(t + 1).standard_normal(4 * t).astype(np.float32)
    mel = mel_for(cfg, 4 * t)
    fr = model.forward(x, mel)
    assert np.abs(model.inverse(fr.latent, mel) - x).max() <= 1e-4
