"""The normalizing-flow vocoder.

Audio samples are squeezed into channel groups; each flow applies an
invertible channel-mixing matrix then an affine coupling layer whose
scale/bias come from a dilated-convolution network conditioned on the
upsampled log-mel spectrogram. Partway through the stack, leading
channels are emitted early into the latent. Training maximizes the exact
likelihood (Gaussian term plus both Jacobian log-determinant sums);
synthesis runs the whole stack in reverse from Gaussian noise.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .dsp import AudioClip, MelSpectrogram
from .errors import (
    ConfigInvalid,
    MelTooShort,
    NonFiniteLoss,
    NonFiniteScale,
    NotDivisible,
    ShapeMismatch,
    SingularW,
)

SINGULAR_DET_FLOOR = 1e-12


@dataclass(frozen=True)
class FlowConfig:
    n_mel_channels: int = 80
    n_flows: int = 12
    group_size: int = 8
    early_every: int = 4
    early_size: int = 2
    wn_layers: int = 8
    wn_channels: int = 256
    wn_kernel: int = 3
    sigma_train: float = 1.0

    def validate(self) -> None:
        if self.n_flows < 1 or self.early_every < 1 or self.early_size < 0:
            raise ConfigInvalid("n_flows >= 1, early_every >= 1, early_size >= 0 required")
        if self.group_size < 2:
            raise ConfigInvalid("group_size must be at least 2")
        if self.wn_layers < 1 or self.wn_channels < 1:
            raise ConfigInvalid("coupling network needs >= 1 layer and channel")
        if self.wn_kernel < 1 or self.wn_kernel % 2 == 0:
            raise ConfigInvalid("wn_kernel must be odd")
        if self.sigma_train <= 0:
            raise ConfigInvalid("sigma_train must be positive")
        total_early = self.early_size * len(self.emission_flows())
        if total_early >= self.group_size:
            raise ConfigInvalid("early outputs must leave channels for the final flow")
        for k in range(1, self.n_flows + 1):
            if self.live_channels(k) < 2:
                raise ConfigInvalid(f"flow {k} would have fewer than 2 channels")

    def emission_flows(self) -> list[int]:
        """1-indexed flows after which an early emission happens."""
        if self.early_size == 0:
            return []
        return list(range(self.early_every, self.n_flows, self.early_every))

    def live_channels(self, k: int) -> int:
        """Channel count seen by flow k (1-indexed)."""
        if self.early_size == 0:
            return self.group_size
        return self.group_size - self.early_size * ((k - 1) // self.early_every)

    def latent_block_sizes(self) -> list[int]:
        """Row counts of the latent blocks, in emission order."""
        sizes = [self.early_size] * len(self.emission_flows())
        sizes.append(self.group_size - sum(sizes))
        return sizes


@dataclass
class ForwardResult:
    """Latent plus the two accumulated Jacobian log-determinant sums."""

    latent: np.ndarray          # [group_size, T_g], emission order
    sum_log_scale: float        # sum of every coupling log-scale entry
    sum_log_det_w: float        # sum over flows of T_g * ln|det W|


@dataclass
class LossBreakdown:
    z_term: float
    log_s_term: float
    log_det_w_term: float
    total: float


# --- sample <-> group reshaping ---

def squeeze(samples: np.ndarray, group_size: int) -> np.ndarray:
    """[N] -> [group_size, N/group_size]; channel c frame t = samples[t*G + c]."""
    samples = np.asarray(samples)
    if samples.ndim != 1:
        raise ShapeMismatch(f"expected a 1-D sample array, got {samples.shape}")
    if samples.size % group_size != 0:
        raise NotDivisible(f"{samples.size} samples not divisible by group {group_size}")
    return np.ascontiguousarray(samples.reshape(-1, group_size).T)


def unsqueeze(grouped: np.ndarray) -> np.ndarray:
    """Exact inverse of squeeze."""
    return np.ascontiguousarray(grouped.T).reshape(-1)


def upsample_condition(mel: MelSpectrogram, target_frames: int, group_size: int) -> np.ndarray:
    """Nearest-frame repetition of mel columns to one column per group frame."""
    if mel.hop_length % group_size != 0:
        raise ConfigInvalid(
            f"hop {mel.hop_length} not divisible by group {group_size}")
    repeat = mel.hop_length // group_size
    if mel.n_frames * repeat < target_frames:
        raise MelTooShort(
            f"mel with {mel.n_frames} frames covers {mel.n_frames * repeat} "
            f"group frames, need {target_frames}")
    return np.repeat(mel.values, repeat, axis=1)[:, :target_frames]


# --- invertible channel mixing ---

def _check_nonsingular(w: np.ndarray) -> float:
    sign, logabs = np.linalg.slogdet(w)
    if sign == 0 or logabs < np.log(SINGULAR_DET_FLOOR):
        raise SingularW(f"|det W| below {SINGULAR_DET_FLOOR}")
    return float(logabs)


def invconv_forward(x: np.ndarray, w: np.ndarray):
    """Per-frame multiply by W; returns (y, T * ln|det W|)."""
    if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"W {w.shape} incompatible with x {x.shape}")
    log_abs_det = _check_nonsingular(w)
    return w @ x, x.shape[1] * log_abs_det


def invconv_inverse(y: np.ndarray, w: np.ndarray) -> np.ndarray:
    if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"W {w.shape} incompatible with y {y.shape}")
    _check_nonsingular(w)
    return np.linalg.solve(w, y)


def invconv_backward(grad_y: np.ndarray, x: np.ndarray, w: np.ndarray,
                     coef_log_det: float):
    """Adjoint of invconv_forward when the loss also sees T*ln|det W|.

    coef_log_det is dLoss/d(sum_log_det_w); the matrix gradient includes
    the T * W^-T determinant term.
    """
    grad_x = w.T @ grad_y
    grad_w = grad_y @ x.T
    if coef_log_det != 0.0:
        grad_w = grad_w + (coef_log_det * x.shape[1]) * np.linalg.inv(w).T.astype(w.dtype)
    return grad_x, grad_w


def orthogonal_init(n: int, rng: np.random.Generator, dtype) -> np.ndarray:
    """Random orthogonal matrix with determinant +1 (zero log-det at init)."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q.astype(dtype)


# --- coupling network (dilated-conv stack with gated units) ---

class CouplingNet:
    """Maps the pass-through channels plus conditioning to (log_s, bias).

    wn_layers dilated convolutions with dilation 2^i, gated tanh*sigmoid
    units, residual connections, skip accumulation, per-layer conditioning
    projections, and a zero-initialized output head so the coupling is the
    identity at initialization.
    """

    def __init__(self, prefix: str, n_keep: int, n_trans: int, cfg: FlowConfig,
                 rng: np.random.Generator, dtype):
        h = cfg.wn_channels
        self.n_keep = n_keep
        self.n_trans = n_trans
        self.layers = cfg.wn_layers
        self.kernel = cfg.wn_kernel
        self.hidden = h

        def param(name, shape, fan_in=None):
            if fan_in is None:
                value = np.zeros(shape, dtype=dtype)
            else:
                value = (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)
            return nm.Parameter(f"{prefix}.{name}", value)

        self.start_w = param("start.weight", (h, n_keep), fan_in=n_keep)
        self.start_b = param("start.bias", (h,))
        self.in_w, self.in_b = [], []
        self.cond_w, self.cond_b = [], []
        self.rs_w, self.rs_b = [], []
        for i in range(cfg.wn_layers):
            self.in_w.append(param(f"layer{i}.in.weight", (2 * h, h, cfg.wn_kernel),
                                   fan_in=h * cfg.wn_kernel))
            self.in_b.append(param(f"layer{i}.in.bias", (2 * h,)))
            self.cond_w.append(param(f"layer{i}.cond.weight", (2 * h, cfg.n_mel_channels),
                                     fan_in=cfg.n_mel_channels))
            self.cond_b.append(param(f"layer{i}.cond.bias", (2 * h,)))
            rs_out = 2 * h if i < cfg.wn_layers - 1 else h
            self.rs_w.append(param(f"layer{i}.res_skip.weight", (rs_out, h), fan_in=h))
            self.rs_b.append(param(f"layer{i}.res_skip.bias", (rs_out,)))
        self.end_w = param("end.weight", (2 * n_trans, h))
        self.end_b = param("end.bias", (2 * n_trans,))

    def parameters(self) -> list[nm.Parameter]:
        out = [self.start_w, self.start_b]
        for i in range(self.layers):
            out += [self.in_w[i], self.in_b[i], self.cond_w[i], self.cond_b[i],
                    self.rs_w[i], self.rs_b[i]]
        out += [self.end_w, self.end_b]
        return out

    def forward(self, x_keep: np.ndarray, cond: np.ndarray, save_ctx: bool = False):
        h = nm.pointwise_conv(x_keep, self.start_w.value, self.start_b.value)
        hidden = self.hidden
        skip_total = None
        layer_ctx = []
        for i in range(self.layers):
            pre = nm.dilated_conv1d(h, self.in_w[i].value, self.in_b[i].value, 1 << i)
            pre += nm.pointwise_conv(cond, self.cond_w[i].value, self.cond_b[i].value)
            gate = nm.gated_activation(pre[:hidden], pre[hidden:])
            rs = nm.pointwise_conv(gate, self.rs_w[i].value, self.rs_b[i].value)
            if save_ctx:
                layer_ctx.append((h, pre, gate))
            if i < self.layers - 1:
                h = h + rs[:hidden]
                skip = rs[hidden:]
            else:
                skip = rs
            skip_total = skip if skip_total is None else skip_total + skip
        out = nm.pointwise_conv(skip_total, self.end_w.value, self.end_b.value)
        log_s, bias = out[:self.n_trans], out[self.n_trans:]
        ctx = (x_keep, cond, skip_total, layer_ctx) if save_ctx else None
        return log_s, bias, ctx

    def backward(self, grad_log_s: np.ndarray, grad_bias: np.ndarray, ctx) -> np.ndarray:
        """Accumulates parameter gradients; returns grad wrt the pass-through
        channels. Conditioning is parameter-free upstream, so its gradient
        is not materialized."""
        x_keep, cond, skip_total, layer_ctx = ctx
        hidden = self.hidden
        grad_out = np.concatenate([grad_log_s, grad_bias], axis=0)
        grad_skip_total, gw, gb = nm.pointwise_conv_backward(
            grad_out, skip_total, self.end_w.value)
        self.end_w.grad += gw
        self.end_b.grad += gb

        grad_h = None
        for i in range(self.layers - 1, -1, -1):
            h_in, pre, gate = layer_ctx[i]
            if i == self.layers - 1:
                grad_rs = grad_skip_total
                identity_grad = None
            else:
                grad_rs = np.concatenate([grad_h, grad_skip_total], axis=0)
                identity_grad = grad_h
            grad_gate, gw, gb = nm.pointwise_conv_backward(grad_rs, gate, self.rs_w[i].value)
            self.rs_w[i].grad += gw
            self.rs_b[i].grad += gb
            grad_a, grad_g = nm.gated_activation_backward(grad_gate, pre[:hidden], pre[hidden:])
            grad_pre = np.concatenate([grad_a, grad_g], axis=0)
            grad_h_conv, gw, gb = nm.dilated_conv1d_backward(
                grad_pre, h_in, self.in_w[i].value, 1 << i)
            self.in_w[i].grad += gw
            self.in_b[i].grad += gb
            self.cond_w[i].grad += grad_pre @ cond.T
            self.cond_b[i].grad += grad_pre.sum(axis=1)
            grad_h = grad_h_conv if identity_grad is None else grad_h_conv + identity_grad

        grad_x_keep, gw, gb = nm.pointwise_conv_backward(grad_h, x_keep, self.start_w.value)
        self.start_w.grad += gw
        self.start_b.grad += gb
        return grad_x_keep


def coupling_forward(x: np.ndarray, cond: np.ndarray, net: CouplingNet,
                     save_ctx: bool = False):
    """Affine coupling: pass the first ceil(C/2) channels through, scale and
    shift the rest. Returns (y, sum_log_s, ctx)."""
    if x.shape[0] != net.n_keep + net.n_trans:
        raise ShapeMismatch(f"coupling expects {net.n_keep + net.n_trans} channels, "
                            f"got {x.shape[0]}")
    x_keep, x_trans = x[:net.n_keep], x[net.n_keep:]
    log_s, bias, wn_ctx = net.forward(x_keep, cond, save_ctx)
    scale = np.exp(log_s)
    y = np.concatenate([x_keep, x_trans * scale + bias], axis=0)
    ctx = (x_trans, scale, wn_ctx) if save_ctx else None
    return y, float(log_s.sum(dtype=np.float64)), ctx


def coupling_backward(grad_y: np.ndarray, coef_log_s: float, net: CouplingNet, ctx):
    x_trans, scale, wn_ctx = ctx
    grad_keep_direct = grad_y[:net.n_keep]
    grad_trans_out = grad_y[net.n_keep:]
    grad_log_s = grad_trans_out * x_trans * scale + np.asarray(coef_log_s, dtype=scale.dtype)
    grad_bias = grad_trans_out
    grad_x_trans = grad_trans_out * scale
    grad_x_keep = grad_keep_direct + net.backward(grad_log_s, grad_bias, wn_ctx)
    return np.concatenate([grad_x_keep, grad_x_trans], axis=0)


def coupling_inverse(y: np.ndarray, cond: np.ndarray, net: CouplingNet) -> np.ndarray:
    if y.shape[0] != net.n_keep + net.n_trans:
        raise ShapeMismatch(f"coupling expects {net.n_keep + net.n_trans} channels, "
                            f"got {y.shape[0]}")
    y_keep = y[:net.n_keep]
    log_s, bias, _ = net.forward(y_keep, cond)
    if not np.isfinite(log_s).all() or not np.isfinite(bias).all():
        raise NonFiniteScale("coupling network produced NaN/inf")
    x_trans = (y[net.n_keep:] - bias) * np.exp(-log_s)
    return np.concatenate([y_keep, x_trans], axis=0)


# --- the assembled model ---

class FlowModel:
    def __init__(self, config: FlowConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        if rng is None:
            rng = np.random.default_rng(0)
        self.inv_convs: list[nm.Parameter] = []
        self.couplings: list[CouplingNet] = []
        for k in range(1, config.n_flows + 1):
            c = config.live_channels(k)
            self.inv_convs.append(nm.Parameter(
                f"flow{k:02d}.invconv.weight", orthogonal_init(c, rng, dtype)))
            self.couplings.append(CouplingNet(
                f"flow{k:02d}.wn", (c + 1) // 2, c // 2, config, rng, dtype))

    def parameters(self) -> list[nm.Parameter]:
        out = []
        for w, net in zip(self.inv_convs, self.couplings):
            out.append(w)
            out.extend(net.parameters())
        return out

    def param_dict(self) -> dict[str, nm.Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _condition(self, mel: MelSpectrogram, target_frames: int) -> np.ndarray:
        if mel.n_mels != self.config.n_mel_channels:
            raise ShapeMismatch(f"model expects {self.config.n_mel_channels} mel "
                                f"channels, got {mel.n_mels}")
        return upsample_condition(mel, target_frames, self.config.group_size).astype(self.dtype)

    def forward(self, samples: np.ndarray, mel: MelSpectrogram,
                save_ctx: bool = False):
        """Runs the forward flow. Returns ForwardResult, or (ForwardResult, ctx)
        when save_ctx is set for a subsequent backward call."""
        cfg = self.config
        x = squeeze(np.asarray(samples, dtype=self.dtype), cfg.group_size)
        cond = self._condition(mel, x.shape[1])
        emitted = []
        ctxs = []
        sum_log_s = 0.0
        sum_log_det = 0.0
        for k in range(1, cfg.n_flows + 1):
            x_in = x
            x, log_det = invconv_forward(x, self.inv_convs[k - 1].value)
            sum_log_det += log_det
            x, log_s, cctx = coupling_forward(x, cond, self.couplings[k - 1], save_ctx)
            sum_log_s += log_s
            if save_ctx:
                ctxs.append((x_in, cctx))
            if cfg.early_size and k % cfg.early_every == 0 and k < cfg.n_flows:
                emitted.append(x[:cfg.early_size])
                x = x[cfg.early_size:]
        emitted.append(x)
        result = ForwardResult(np.concatenate(emitted, axis=0), sum_log_s, sum_log_det)
        if save_ctx:
            return result, (cond, ctxs)
        return result

    def backward(self, ctx, grad_latent: np.ndarray, coef_log_s: float,
                 coef_log_det: float) -> None:
        """Accumulates dLoss/dparam given dLoss/dlatent and the coefficients
        multiplying sum_log_scale and sum_log_det_w in the loss."""
        cfg = self.config
        _, ctxs = ctx
        blocks = []
        row = 0
        for size in cfg.latent_block_sizes():
            blocks.append(grad_latent[row:row + size])
            row += size
        grad = blocks.pop()
        for k in range(cfg.n_flows, 0, -1):
            if cfg.early_size and k % cfg.early_every == 0 and k < cfg.n_flows:
                grad = np.concatenate([blocks.pop(), grad], axis=0)
            x_in, cctx = ctxs[k - 1]
            grad = coupling_backward(grad, coef_log_s, self.couplings[k - 1], cctx)
            grad, grad_w = invconv_backward(
                grad, x_in, self.inv_convs[k - 1].value, coef_log_det)
            self.inv_convs[k - 1].grad += grad_w
        assert not blocks

    def inverse(self, latent: np.ndarray, mel: MelSpectrogram) -> np.ndarray:
        """Maps a latent tensor [group_size, T_g] back to samples."""
        cfg = self.config
        latent = np.asarray(latent, dtype=self.dtype)
        if latent.ndim != 2 or latent.shape[0] != cfg.group_size:
            raise ShapeMismatch(f"latent must be [{cfg.group_size}, T], got {latent.shape}")
        cond = self._condition(mel, latent.shape[1])
        blocks = []
        row = 0
        for size in cfg.latent_block_sizes():
            blocks.append(latent[row:row + size])
            row += size
        x = blocks.pop()
        for k in range(cfg.n_flows, 0, -1):
            if cfg.early_size and k % cfg.early_every == 0 and k < cfg.n_flows:
                x = np.concatenate([blocks.pop(), x], axis=0)
            x = coupling_inverse(x, cond, self.couplings[k - 1])
            x = invconv_inverse(x, self.inv_convs[k - 1].value)
        return unsqueeze(x)

    def infer(self, mel: MelSpectrogram, sigma_infer: float = 1.0,
              rng: np.random.Generator | None = None,
              n_samples: int | None = None) -> AudioClip:
        """Samples a latent and runs the inverse flow.

        Without an explicit n_samples the length is taken from the mel: the
        midpoint of the sample counts consistent with its frame count.
        """
        if mel.n_frames == 0:
            raise MelTooShort("cannot synthesize from an empty mel")
        if rng is None:
            rng = np.random.default_rng(0)
        group = self.config.group_size
        if n_samples is None:
            n_samples = mel.hop_length * mel.n_frames - mel.hop_length // 2
        t_g = n_samples // group
        if t_g < 1:
            raise MelTooShort(f"requested {n_samples} samples, below one group")
        latent = sample_latent(group * t_g, sigma_infer, rng,
                               dtype=self.dtype).reshape(group, t_g)
        samples = self.inverse(latent, mel)
        return AudioClip(samples.astype(np.float32), mel.sample_rate)


def parameter_spec(config: FlowConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every model parameter, in parameters() order,
    without allocating anything."""
    config.validate()
    out: list[tuple[str, tuple[int, ...]]] = []
    h = config.wn_channels
    m = config.n_mel_channels
    for k in range(1, config.n_flows + 1):
        c = config.live_channels(k)
        n_keep, n_trans = (c + 1) // 2, c // 2
        pre = f"flow{k:02d}"
        out.append((f"{pre}.invconv.weight", (c, c)))
        out.append((f"{pre}.wn.start.weight", (h, n_keep)))
        out.append((f"{pre}.wn.start.bias", (h,)))
        for i in range(config.wn_layers):
            rs_out = 2 * h if i < config.wn_layers - 1 else h
            out.append((f"{pre}.wn.layer{i}.in.weight", (2 * h, h, config.wn_kernel)))
            out.append((f"{pre}.wn.layer{i}.in.bias", (2 * h,)))
            out.append((f"{pre}.wn.layer{i}.cond.weight", (2 * h, m)))
            out.append((f"{pre}.wn.layer{i}.cond.bias", (2 * h,)))
            out.append((f"{pre}.wn.layer{i}.res_skip.weight", (rs_out, h)))
            out.append((f"{pre}.wn.layer{i}.res_skip.bias", (rs_out,)))
        out.append((f"{pre}.wn.end.weight", (2 * n_trans, h)))
        out.append((f"{pre}.wn.end.bias", (2 * n_trans,)))
    return out


def sample_latent(n_entries: int, sigma_infer: float, rng: np.random.Generator,
                  dtype=np.float32) -> np.ndarray:
    """i.i.d. zero-mean Gaussian draws with standard deviation sigma_infer."""
    if sigma_infer <= 0:
        raise ConfigInvalid("sigma_infer must be positive")
    return (rng.standard_normal(n_entries) * sigma_infer).astype(dtype)


def negative_log_likelihood(fr: ForwardResult, sigma: float) -> LossBreakdown:
    """Per-entry negative log-likelihood, constant term excluded.

    total = sum(z^2)/(2 sigma^2)/n - sum_log_scale/n - sum_log_det_w/n.
    Minimizing it maximizes ln p(x | mel); the identity against the numerical
    Jacobian determinant is what cmd_check's jacobian mode verifies.
    """
    if sigma <= 0:
        raise ConfigInvalid("sigma must be positive")
    n = fr.latent.size
    z_term = float((fr.latent.astype(np.float64) ** 2).sum() / (2.0 * sigma * sigma) / n)
    log_s_term = fr.sum_log_scale / n
    log_det_w_term = fr.sum_log_det_w / n
    total = z_term - log_s_term - log_det_w_term
    if not np.isfinite(total):
        raise NonFiniteLoss(f"loss is not finite: z={z_term} log_s={log_s_term} "
                            f"log_det_w={log_det_w_term}")
    return LossBreakdown(z_term, log_s_term, log_det_w_term, total)


def loss_and_gradients(model: FlowModel, samples: np.ndarray, mel: MelSpectrogram,
                       sigma: float, scale: float = 1.0) -> LossBreakdown:
    """Forward + loss + backward for one segment; grads scaled by `scale`
    accumulate into the model (callers zero them between steps)."""
    fr, ctx = model.forward(samples, mel, save_ctx=True)
    breakdown = negative_log_likelihood(fr, sigma)
    n = fr.latent.size
    grad_latent = fr.latent * np.asarray(scale / (sigma * sigma * n), dtype=model.dtype)
    model.backward(ctx, grad_latent, -scale / n, -scale / n)
    return breakdown
