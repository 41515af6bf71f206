import os

import numpy as np
import pytest

from kwglow.corpus import Manifest, UtteranceRecord, write_manifest
from kwglow.dsp import AudioClip, MelConfig, StftConfig, save_wav
from kwglow.flow import FlowConfig

SAMPLE_RATE = 22050

# sample rate / 8: lands exactly on an FFT bin and repeats every squeeze group
TONE_HZ = SAMPLE_RATE / 8.0


@pytest.fixture
def tiny_config() -> FlowConfig:
    """Small enough for numerical-Jacobian work (input dims stay <= 64)."""
    return FlowConfig(n_mel_channels=8, n_flows=2, group_size=4, early_every=4,
                      early_size=0, wn_layers=2, wn_channels=16, wn_kernel=3)


@pytest.fixture
def early_config() -> FlowConfig:
    """Default depth and emission schedule at test-friendly widths."""
    return FlowConfig(n_mel_channels=16, n_flows=12, group_size=8, early_every=4,
                      early_size=2, wn_layers=2, wn_channels=16, wn_kernel=3)


def train_flow_config() -> FlowConfig:
    """Used by the training-sanity and tone-fitting runs."""
    return FlowConfig(n_mel_channels=80, n_flows=4, group_size=8, early_every=2,
                      early_size=2, wn_layers=2, wn_channels=16, wn_kernel=3)


def sine_clip(n_samples: int, amplitude: float = 0.12,
              phase: float = 0.3) -> np.ndarray:
    t = np.arange(n_samples)
    return (amplitude * np.sin(2.0 * np.pi * t / 8.0 + phase)).astype(np.float32)


def noise_clip(n_samples: int, rng: np.random.Generator,
               amplitude: float = 0.05) -> np.ndarray:
    return (amplitude * rng.standard_normal(n_samples)).astype(np.float32)


def build_clip_corpus(directory, clips: list[np.ndarray],
                      categories: list[str]) -> list[UtteranceRecord]:
    os.makedirs(directory, exist_ok=True)
    records = []
    for i, (x, cat) in enumerate(zip(clips, categories)):
        path = os.path.join(str(directory), f"clip{i:02d}.wav")
        save_wav(AudioClip(x, SAMPLE_RATE), path)
        records.append(UtteranceRecord(f"clip{i:02d}", "train", cat, path,
                                       f"utterance number {i}"))
    return records


@pytest.fixture
def mixed_corpus(tmp_path):
    """16 quiet clips, half tones half noise, 16000 samples each."""
    rng = np.random.default_rng(99)
    clips = [sine_clip(16000) for _ in range(8)]
    clips += [noise_clip(16000, rng) for _ in range(8)]
    cats = ["sine"] * 8 + ["noise"] * 8
    return build_clip_corpus(tmp_path / "corpus", clips, cats)


@pytest.fixture
def tone_corpus(tmp_path):
    """8 identical-phase pure tones; the easiest thing a vocoder can learn."""
    clips = [sine_clip(16000) for _ in range(8)]
    return build_clip_corpus(tmp_path / "tones", clips, ["sine"] * 8)


def write_records(records, path) -> str:
    write_manifest(Manifest(list(records)), path)
    return str(path)


# MOS benchmark fixtures. Per-category two-decimal targets are realized
# exactly with 100 ratings: k fives and (100 - k) fours give 4 + k/100.
OUR_MODEL_MEANS = {
    "News": 4.92, "Sports": 4.75, "Linguistics": 4.93, "Psychology": 4.97,
    "Poem": 4.83, "Health": 4.99, "Questions": 4.96, "Exclamation": 4.96,
    "Science": 5.00, "Miscellaneous": 4.94, "General Info": 4.92,
    "Interviews": 4.88, "Politics": 4.78, "Education & Lit": 4.93,
    "Story": 4.75, "Tourism": 5.00, "SMS": 4.91,
}

GENUINE_MEANS = {
    "News": 5.0, "Sports": 4.9, "Linguistics": 4.8, "Psychology": 5.0,
    "Poem": 4.9, "Health": 4.8, "Questions": 5.0, "Exclamation": 5.0,
    "Science": 4.9, "Miscellaneous": 4.8, "General Info": 4.9,
    "Interviews": 4.9, "Politics": 5.0, "Education & Lit": 4.8,
    "Story": 4.9, "Tourism": 4.9, "SMS": 4.8,
}


def ratings_rows_for(model_id: str, means: dict[str, float],
                     raters: int = 12) -> list[str]:
    rows = []
    for cat, target in means.items():
        fives = round(100 * (target - 4.0))
        assert 0 <= fives <= 100
        scores = [5] * fives + [4] * (100 - fives)
        slug = cat.lower().replace(" ", "-").replace("&", "and")
        for j, score in enumerate(scores):
            rows.append(f"r{j % raters:02d},{model_id}-{slug}-{j:03d},"
                        f'"{cat}",{model_id},{score},{1700000000 + j}')
    return rows


def write_ratings_csv(path, model_means: dict[str, dict[str, float]]) -> str:
    lines = ["rater_id,sample_id,category,model_id,score,timestamp"]
    for model_id, means in model_means.items():
        lines.extend(ratings_rows_for(model_id, means))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return str(path)


@pytest.fixture
def benchmark_ratings(tmp_path):
    return write_ratings_csv(tmp_path / "ratings.csv",
                             {"ours": OUR_MODEL_MEANS})


@pytest.fixture
def default_stft() -> StftConfig:
    return StftConfig()


@pytest.fixture
def default_mel() -> MelConfig:
    return MelConfig()
