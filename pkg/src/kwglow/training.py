"""Training loop, Adam optimizer, and checkpoint serialization.

Everything here is deterministic given (seed, manifest, config): the RNG is
a single PCG64 stream whose state travels inside checkpoints, epoch shuffle
order and position are checkpointed too, and all optimizer state is float32
so a save/load/save round trip is byte-identical.
"""

import dataclasses
import hashlib
import json
import os
import struct
import sys
from dataclasses import dataclass, field

import numpy as np

from . import textmap
from .dsp import (
    CORPUS_SAMPLE_RATE,
    MelConfig,
    StftConfig,
    load_wav,
    mel_spectrogram,
    sample_segment,
)
from .errors import (
    ConfigInvalid,
    CorpusEmpty,
    CorruptFile,
    IoFailure,
    NonFiniteLoss,
    ParseError,
    UnsupportedFormat,
    VersionMismatch,
)
from .flow import (
    FlowConfig,
    FlowModel,
    LossBreakdown,
    loss_and_gradients,
    parameter_spec,
)

CHECKPOINT_MAGIC = b"KWGLOW1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 22
    learning_rate: float = 1e-4
    # the source material says only "exponential decay"; these two defaults
    # are ours and are configurable
    lr_decay_gamma: float = 0.999
    lr_decay_interval: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    epochs: int = 100000
    sigma: float = 1.0
    iters_per_checkpoint: int = 2000
    seed: int = 1234
    segment_length: int = 16000

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigInvalid("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigInvalid("beta1/beta2 must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size must be at least 1")
        if self.lr_decay_interval < 1 or self.lr_decay_gamma <= 0:
            raise ConfigInvalid("decay interval >= 1 and gamma > 0 required")
        if self.adam_epsilon <= 0 or self.sigma <= 0:
            raise ConfigInvalid("adam_epsilon and sigma must be positive")
        if self.segment_length < 1 or self.iters_per_checkpoint < 1:
            raise ConfigInvalid("segment_length and iters_per_checkpoint must be >= 1")
        if self.epochs < 0:
            raise ConfigInvalid("epochs must be >= 0")


def config_hash(cfg: TrainConfig) -> str:
    text = textmap.dumps(config_to_map("train", cfg))
    return hashlib.sha256(text.encode()).hexdigest()


class AdamState:
    """First/second moment accumulators, float32, keyed by parameter name."""

    def __init__(self, spec: list[tuple[str, tuple[int, ...]]]):
        self.m = {name: np.zeros(shape, dtype=np.float32) for name, shape in spec}
        self.v = {name: np.zeros(shape, dtype=np.float32) for name, shape in spec}
        self.step = 0

    @classmethod
    def for_model(cls, model: FlowModel) -> "AdamState":
        return cls([(p.name, p.value.shape) for p in model.parameters()])


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Stepped exponential decay; iteration counts completed updates."""
    if iteration < 0:
        raise ConfigInvalid("iteration must be >= 0")
    return cfg.learning_rate * cfg.lr_decay_gamma ** (iteration // cfg.lr_decay_interval)


def training_step(model: FlowModel, batch, adam: AdamState,
                  cfg: TrainConfig) -> LossBreakdown:
    """One optimizer step over a batch of (segment, mel) pairs.

    Raises NonFiniteLoss before touching any parameter if the loss or any
    gradient is not finite, so a skipped step leaves the model unchanged.
    """
    if not batch:
        raise ConfigInvalid("empty batch")
    model.zero_grad()
    scale = 1.0 / len(batch)
    z = log_s = log_det = 0.0
    for segment, mel in batch:
        lb = loss_and_gradients(model, segment, mel, cfg.sigma, scale)
        z += lb.z_term * scale
        log_s += lb.log_s_term * scale
        log_det += lb.log_det_w_term * scale
    params = model.parameters()
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NonFiniteLoss(f"non-finite gradient in {p.name}")
    adam_update(params, adam, cfg)
    return LossBreakdown(z, log_s, log_det, z - log_s - log_det)


def adam_update(params, adam: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam step; moments and updates kept in float32."""
    lr = lr_at(adam.step, cfg)
    adam.step += 1
    bias1 = 1.0 - cfg.beta1 ** adam.step
    bias2 = 1.0 - cfg.beta2 ** adam.step
    for p in params:
        g = p.grad.astype(np.float32, copy=False)
        m = adam.m[p.name]
        v = adam.v[p.name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (lr / bias1) * m / (np.sqrt(v / bias2) + cfg.adam_epsilon)
        p.value -= update.astype(p.value.dtype, copy=False)


# --- checkpoint serialization ---

@dataclass
class Checkpoint:
    flow_config: FlowConfig
    stft_config: StftConfig
    mel_config: MelConfig
    sample_rate: int
    params: dict[str, np.ndarray]       # float32, spec order
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int
    iteration: int
    rng_state: dict
    train_config_hash: str
    epoch: int = 0
    epoch_pos: int = 0
    epoch_order: list[int] = field(default_factory=list)
    format_version: int = CHECKPOINT_VERSION


def config_to_map(prefix: str, cfg) -> dict:
    return {f"{prefix}.{f.name}": getattr(cfg, f.name)
            for f in dataclasses.fields(cfg)}


def config_from_map(prefix: str, cls, mapping: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}.{f.name}"
        if key in mapping:
            kwargs[f.name] = mapping[key]
    return cls(**kwargs)


def make_checkpoint(model: FlowModel, adam: AdamState, iteration: int,
                    rng: np.random.Generator, train_cfg: TrainConfig,
                    stft_cfg: StftConfig, mel_cfg: MelConfig,
                    epoch: int = 0, epoch_pos: int = 0,
                    epoch_order: list[int] | None = None) -> Checkpoint:
    params = {p.name: p.value.astype(np.float32, copy=True)
              for p in model.parameters()}
    return Checkpoint(
        flow_config=model.config,
        stft_config=stft_cfg,
        mel_config=mel_cfg,
        sample_rate=CORPUS_SAMPLE_RATE,
        params=params,
        adam_m={k: v.copy() for k, v in adam.m.items()},
        adam_v={k: v.copy() for k, v in adam.v.items()},
        adam_step=adam.step,
        iteration=iteration,
        rng_state=rng.bit_generator.state,
        train_config_hash=config_hash(train_cfg),
        epoch=epoch,
        epoch_pos=epoch_pos,
        epoch_order=list(epoch_order or []),
    )


def _checkpoint_header(ck: Checkpoint) -> dict:
    header = {"format.version": ck.format_version,
              "audio.sample_rate": ck.sample_rate}
    header.update(config_to_map("flow", ck.flow_config))
    header.update(config_to_map("stft", ck.stft_config))
    header.update(config_to_map("mel", ck.mel_config))
    header["train.iteration"] = ck.iteration
    header["train.adam_step"] = ck.adam_step
    header["train.config_hash"] = ck.train_config_hash
    header["train.epoch"] = ck.epoch
    header["train.epoch_pos"] = ck.epoch_pos
    header["train.epoch_order"] = ck.epoch_order
    header["train.rng_state"] = ck.rng_state
    header["params.order"] = list(ck.params.keys())
    for name, value in ck.params.items():
        header[f"param.{name}.shape"] = list(value.shape)
    return header


def save_checkpoint(ck: Checkpoint, path) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    header = textmap.dumps(_checkpoint_header(ck)).encode()
    tmp = str(path) + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for blobs in (ck.params, ck.adam_m, ck.adam_v):
                for value in blobs.values():
                    fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, expected_flow: FlowConfig | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptFile(f"{path}: bad checkpoint magic")
    offset = len(CHECKPOINT_MAGIC)
    if len(blob) < offset + 4:
        raise CorruptFile(f"{path}: truncated header length")
    (header_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if len(blob) < offset + header_len:
        raise CorruptFile(f"{path}: truncated header")
    try:
        header = textmap.loads(blob[offset:offset + header_len].decode())
    except (ParseError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header: {exc}") from exc
    offset += header_len

    try:
        version = header["format.version"]
        if version != CHECKPOINT_VERSION:
            raise VersionMismatch(f"{path}: unsupported checkpoint version {version}")
        flow_cfg = config_from_map("flow", FlowConfig, header)
        stft_cfg = config_from_map("stft", StftConfig, header)
        mel_cfg = config_from_map("mel", MelConfig, header)
        sample_rate = header["audio.sample_rate"]
        order = header["params.order"]
        shapes = {name: tuple(header[f"param.{name}.shape"]) for name in order}
    except KeyError as exc:
        raise CorruptFile(f"{path}: missing header key {exc}") from exc

    expected = parameter_spec(flow_cfg)
    if [(n, shapes[n]) for n in order] != expected:
        raise VersionMismatch(f"{path}: parameter list does not match the flow config")
    if expected_flow is not None and flow_cfg != expected_flow:
        raise VersionMismatch(f"{path}: checkpoint flow config differs from the "
                              "requested one")

    sizes = [int(np.prod(shape, dtype=np.int64)) for _, shape in expected]
    body_len = 3 * 4 * sum(sizes)
    if len(blob) - offset != body_len:
        raise CorruptFile(f"{path}: parameter payload is {len(blob) - offset} bytes, "
                          f"expected {body_len}")

    def read_blobs():
        nonlocal offset
        out = {}
        for (name, shape), size in zip(expected, sizes):
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
            out[name] = arr.reshape(shape).copy()
            offset += 4 * size
        return out

    params = read_blobs()
    adam_m = read_blobs()
    adam_v = read_blobs()
    return Checkpoint(
        flow_config=flow_cfg, stft_config=stft_cfg, mel_config=mel_cfg,
        sample_rate=sample_rate, params=params, adam_m=adam_m, adam_v=adam_v,
        adam_step=header["train.adam_step"], iteration=header["train.iteration"],
        rng_state=header["train.rng_state"],
        train_config_hash=header["train.config_hash"],
        epoch=header["train.epoch"], epoch_pos=header["train.epoch_pos"],
        epoch_order=header["train.epoch_order"], format_version=version,
    )


def build_model(ck: Checkpoint, dtype=np.float32) -> FlowModel:
    model = FlowModel(ck.flow_config, np.random.default_rng(0), dtype)
    for p in model.parameters():
        p.value = ck.params[p.name].astype(dtype)
    return model


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def restore_adam(ck: Checkpoint) -> AdamState:
    adam = AdamState([(n, v.shape) for n, v in ck.params.items()])
    adam.m = {k: v.copy() for k, v in ck.adam_m.items()}
    adam.v = {k: v.copy() for k, v in ck.adam_v.items()}
    adam.step = ck.adam_step
    return adam


# --- the loop ---

def _format_metrics(iteration: int, lr: float, lb: LossBreakdown) -> str:
    return (f"{iteration}\t{lr:.10g}\t{lb.z_term:.10g}\t{lb.log_s_term:.10g}"
            f"\t{lb.log_det_w_term:.10g}\t{lb.total:.10g}")


def train(records, cfg: TrainConfig, flow_cfg: FlowConfig, stft_cfg: StftConfig,
          mel_cfg: MelConfig, out_dir, resume: Checkpoint | None = None,
          max_iterations: int | None = None, log=None) -> Checkpoint:
    """Runs the epoch loop and returns the final checkpoint.

    records: corpus records; only split == "train" entries are used. Each
    contributes one random segment per epoch, mel computed from the segment
    itself so conditioning and audio always align. max_iterations overrides
    the epoch budget (used by tests and --iterations).
    """
    cfg.validate()
    flow_cfg.validate()
    stft_cfg.validate()
    mel_cfg.validate(CORPUS_SAMPLE_RATE)
    if cfg.segment_length % flow_cfg.group_size != 0:
        raise ConfigInvalid("segment_length must be divisible by group_size")
    train_records = [r for r in records if r.split == "train"]
    if not train_records:
        raise CorpusEmpty("no train-split records in the manifest")
    if log is None:
        log = lambda msg: print(msg, file=sys.stderr)

    os.makedirs(out_dir, exist_ok=True)
    if resume is not None:
        if resume.flow_config != flow_cfg:
            raise VersionMismatch("resume checkpoint has a different flow config")
        if resume.train_config_hash != config_hash(cfg):
            log("warning: train config differs from the resumed checkpoint")
        model = build_model(resume)
        adam = restore_adam(resume)
        rng = restore_rng(resume.rng_state)
        iteration = resume.iteration
        epoch = resume.epoch
        epoch_pos = resume.epoch_pos
        epoch_order = list(resume.epoch_order)
    else:
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        model = FlowModel(flow_cfg, rng, np.float32)
        adam = AdamState.for_model(model)
        iteration = 0
        epoch = 0
        epoch_pos = 0
        epoch_order = rng.permutation(len(train_records)).tolist()

    def finished() -> bool:
        if max_iterations is not None:
            return iteration >= max_iterations
        return epoch >= cfg.epochs

    def snapshot() -> Checkpoint:
        return make_checkpoint(model, adam, iteration, rng, cfg, stft_cfg,
                               mel_cfg, epoch, epoch_pos, epoch_order)

    metrics_path = os.path.join(out_dir, "metrics.tsv")
    consecutive_bad = 0
    last_saved = None
    try:
        metrics = open(metrics_path, "a")
    except OSError as exc:
        raise IoFailure(f"cannot open metrics log: {exc}") from exc
    try:
        while not finished():
            if epoch_pos >= len(epoch_order):
                epoch += 1
                epoch_pos = 0
                if finished():
                    break
                epoch_order = rng.permutation(len(train_records)).tolist()
            take = epoch_order[epoch_pos:epoch_pos + cfg.batch_size]
            epoch_pos += len(take)
            batch = []
            for idx in take:
                record = train_records[idx]
                clip = load_wav(record.audio_path)
                if clip.sample_rate != CORPUS_SAMPLE_RATE:
                    raise UnsupportedFormat(
                        f"{record.audio_path}: expected {CORPUS_SAMPLE_RATE} Hz, "
                        f"got {clip.sample_rate}")
                segment = sample_segment(clip, cfg.segment_length, rng)
                mel = mel_spectrogram(segment, stft_cfg, mel_cfg)
                batch.append((segment.samples, mel))
            try:
                lb = training_step(model, batch, adam, cfg)
            except NonFiniteLoss as exc:
                consecutive_bad += 1
                log(f"iteration after {iteration}: skipped non-finite step "
                    f"({consecutive_bad}/5): {exc}")
                metrics.write(f"# skipped non-finite step after iteration "
                              f"{iteration}\n")
                metrics.flush()
                if consecutive_bad >= 5:
                    raise NonFiniteLoss(
                        "training halted: 5 consecutive non-finite steps") from exc
                continue
            consecutive_bad = 0
            iteration += 1
            metrics.write(_format_metrics(iteration, lr_at(iteration - 1, cfg), lb) + "\n")
            metrics.flush()
            if iteration % cfg.iters_per_checkpoint == 0:
                ck = snapshot()
                save_checkpoint(ck, os.path.join(out_dir, f"checkpoint_{iteration:08d}.kwg"))
                last_saved = iteration
    finally:
        metrics.close()

    final = snapshot()
    if last_saved != iteration:
        save_checkpoint(final, os.path.join(out_dir, f"checkpoint_{iteration:08d}.kwg"))
    return final
