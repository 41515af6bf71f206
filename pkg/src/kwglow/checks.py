"""Model verification suites: roundtrip, Jacobian identity, gradient checks.

These are the desk-scale claims behind the model, packaged so cmd_check and
the test suite run the same code. The Jacobian and gradient suites need a
64-bit model; finite differences drown in 32-bit noise.
"""

from dataclasses import dataclass

import numpy as np

from .dsp import CORPUS_SAMPLE_RATE, MelSpectrogram
from .errors import ConfigInvalid
from .flow import FlowModel, loss_and_gradients, negative_log_likelihood

TOLERANCES = {"roundtrip": 1e-4, "jacobian": 1e-3, "grad": 1e-3}


@dataclass
class CheckResult:
    mode: str
    max_error: float
    tolerance: float
    detail: dict

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def to_mapping(self) -> dict:
        return {"mode": self.mode, "max_error": self.max_error,
                "tolerance": self.tolerance, "passed": self.passed,
                "detail": self.detail}


def synthetic_mel(n_mels: int, n_frames: int, hop_length: int,
                  rng: np.random.Generator) -> MelSpectrogram:
    """Random log-domain-looking conditioning for model checks."""
    values = (rng.standard_normal((n_mels, n_frames)) * 0.5 - 4.0).astype(np.float32)
    return MelSpectrogram(values, hop_length, CORPUS_SAMPLE_RATE)


def perturb_model(model: FlowModel, rng: np.random.Generator,
                  scale: float = 0.05) -> None:
    """Moves every parameter off its init point so checks run at a generic
    spot (zero-init couplings make too many gradients vanish identically).

    Weight noise is scaled by 1/sqrt(fan_in) like the initializer; a flat
    scale on wide models pushes the log-scale head far enough out that the
    inverse is no longer float32-recoverable."""
    for p in model.parameters():
        std = scale
        if p.value.ndim >= 2:
            std = scale / np.sqrt(np.prod(p.value.shape[1:]))
        p.value = p.value + (rng.standard_normal(p.value.shape) * std).astype(
            p.value.dtype)


def _check_inputs(model: FlowModel, n_samples: int, rng: np.random.Generator):
    group = model.config.group_size
    if n_samples % group != 0 or n_samples < group:
        raise ConfigInvalid(f"n_samples must be a positive multiple of {group}")
    x = (rng.standard_normal(n_samples) * 0.3).astype(model.dtype)
    mel = synthetic_mel(model.config.n_mel_channels, n_samples // group, group, rng)
    return x, mel


def roundtrip_check(model: FlowModel, n_samples: int,
                    rng: np.random.Generator) -> CheckResult:
    """max |inverse(forward(x)) - x| on random audio and conditioning."""
    x, mel = _check_inputs(model, n_samples, rng)
    fr = model.forward(x, mel)
    back = model.inverse(fr.latent, mel)
    err = float(np.max(np.abs(back - x)))
    return CheckResult("roundtrip", err, TOLERANCES["roundtrip"],
                       {"n_samples": n_samples})


def jacobian_check(model: FlowModel, n_samples: int, rng: np.random.Generator,
                   epsilon: float = 1e-5) -> CheckResult:
    """Compares sum_log_scale + sum_log_det_w against ln|det dz/dx| obtained
    by numerically differentiating the whole forward map.

    Error is |analytic - numeric| / max(|numeric|, |analytic|, 1), so it reads
    as relative for the O(1)-and-larger determinants the suites use and
    degrades to absolute near zero.
    """
    if model.dtype != np.float64:
        raise ConfigInvalid("jacobian check needs a 64-bit model")
    if n_samples > 64:
        raise ConfigInvalid("jacobian check is O(n^2) forwards; keep n_samples <= 64")
    x, mel = _check_inputs(model, n_samples, rng)
    fr = model.forward(x, mel)
    analytic = fr.sum_log_scale + fr.sum_log_det_w

    jac = np.empty((n_samples, n_samples))
    for j in range(n_samples):
        xp = x.copy()
        xp[j] += epsilon
        zp = model.forward(xp, mel).latent.reshape(-1)
        xm = x.copy()
        xm[j] -= epsilon
        zm = model.forward(xm, mel).latent.reshape(-1)
        jac[:, j] = (zp - zm) / (2.0 * epsilon)
    _, numeric = np.linalg.slogdet(jac)
    err = abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1.0)
    return CheckResult("jacobian", float(err), TOLERANCES["jacobian"],
                       {"analytic": float(analytic), "numeric": float(numeric)})


def _class_of(name: str) -> str:
    parts = [p for p in name.split(".") if not p.startswith("flow")]
    return ".".join("layer" if p.startswith("layer") else p for p in parts)


def grad_check_suite(model: FlowModel, n_samples: int, rng: np.random.Generator,
                     epsilon: float = 1e-5, coords_per_param: int = 4,
                     sigma: float = 1.0) -> CheckResult:
    """Central-difference check of the loss gradient, sampled coordinates from
    every parameter; worst relative error per parameter class.

    Relative per class: max |analytic - fd| over sampled coordinates divided
    by the class's largest gradient magnitude.
    """
    if model.dtype != np.float64:
        raise ConfigInvalid("grad check needs a 64-bit model")
    x, mel = _check_inputs(model, n_samples, rng)
    model.zero_grad()
    loss_and_gradients(model, x, mel, sigma)
    analytic = {p.name: p.grad.copy() for p in model.parameters()}

    def loss() -> float:
        return negative_log_likelihood(model.forward(x, mel), sigma).total

    stats: dict[str, list[float]] = {}
    for p in model.parameters():
        flat = p.value.reshape(-1)
        gflat = analytic[p.name].reshape(-1)
        n_coords = min(coords_per_param, flat.size)
        for i in rng.choice(flat.size, size=n_coords, replace=False):
            saved = flat[i]
            flat[i] = saved + epsilon
            up = loss()
            flat[i] = saved - epsilon
            down = loss()
            flat[i] = saved
            fd = (up - down) / (2.0 * epsilon)
            cls = stats.setdefault(_class_of(p.name), [0.0, 0.0])
            cls[0] = max(cls[0], abs(gflat[i] - fd))
            cls[1] = max(cls[1], abs(gflat[i]), abs(fd))

    per_class = {cls: diff / max(mag, 1e-8) for cls, (diff, mag) in stats.items()}
    worst = max(per_class.values())
    return CheckResult("grad", float(worst), TOLERANCES["grad"],
                       {"per_class": per_class})


def run_checks(model32: FlowModel, model64: FlowModel, n_samples: int,
               modes, seed: int = 0) -> list[CheckResult]:
    """Runs the requested modes; 32-bit model for roundtrip, 64-bit twin for
    the differentiation suites."""
    results = []
    for mode in modes:
        rng = np.random.default_rng(seed)
        if mode == "roundtrip":
            results.append(roundtrip_check(model32, n_samples, rng))
        elif mode == "jacobian":
            results.append(jacobian_check(
                model64, min(n_samples, 64 // model64.config.group_size
                             * model64.config.group_size), rng))
        elif mode == "grad":
            results.append(grad_check_suite(
                model64, min(n_samples, 64 // model64.config.group_size
                             * model64.config.group_size), rng))
        else:
            raise ConfigInvalid(f"unknown check mode {mode!r}")
    return results
