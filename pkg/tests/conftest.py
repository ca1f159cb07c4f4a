"""Shared fixtures: a tiny run config and tiny synthetic databases."""
from pathlib import Path
import copy

import pytest

from config.config import run_config_from_dict
from core.base import Modality
from core.media_data import DistortionConfig, generate_synthetic_database

TINY_PHASE = {'epochs': 1, 'learning_rate': 0.001, 'batch_size': 4, 'audio_repeat_factor': 1}

TINY = {
    'name': 'tiny',
    'seed': 0,
    'phases': {'step1': dict(TINY_PHASE), 'step2': dict(TINY_PHASE), 'step3': dict(TINY_PHASE)},
    'preprocess': {'short_side': 16, 'crop_size': 16, 'motion_size': 16},
    'backbone': {'channels': [4, 8], 'strides': [2, 2], 'mhsa_heads': 2, 'embed_dim': 8},
    'motion': {'dim': 8, 'hidden_channels': 4},
    'audio': {'dim': 8, 'heads': 2, 'conv_channels': [2, 4], 'max_segments': 16},
    'evaluation': {'repeats': 2},
}

FAMILIES = {
    Modality.IMAGE: ('noise', 'blur'),
    Modality.AUDIO: ('noise', 'clipping'),
    Modality.VIDEO: ('noise', 'jitter'),
    Modality.AV: ('noise', 'clipping'),
}

TINY_MEDIA = dict(height=16, width=20, n_frames=4, frame_rate=4.0, duration=0.25)


def tiny_dict(run_dir=None, **overrides):
    data = copy.deepcopy(TINY)
    if run_dir is not None:
        data['run_dir'] = str(run_dir)
    data.update(overrides)
    return data


def make_tiny_config(run_dir=None, **overrides):
    return run_config_from_dict(tiny_dict(run_dir, **overrides))


def make_database(modality, name=None, n_samples=20, seed=0, mos_noise=0.0, mos_range=(1.0, 5.0)):
    modality = Modality(modality)
    distortion = DistortionConfig(families=FAMILIES[modality], mos_range=mos_range, mos_noise=mos_noise,
                                  **TINY_MEDIA)
    return generate_synthetic_database(modality, n_samples, distortion, seed,
                                       name=name or f"tiny_{modality.value}", batch_size=4)


@pytest.fixture
def tiny_config(tmp_path):
    return make_tiny_config(tmp_path / 'run')


@pytest.fixture
def four_databases():
    return [make_database(m, seed=i + 1) for i, m in enumerate(Modality)]


@pytest.fixture
def toy_run_path() -> Path:
    return Path(__file__).resolve().parent.parent / 'config' / 'toy_run.json'
