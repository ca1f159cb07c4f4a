from dataclasses import replace

import pytest

from config.config import (
    NANO_BACKBONE,
    BackboneConfig,
    EvaluationConfig,
    MelConfig,
    PhaseConfig,
    RunConfig,
    config_hash,
    default_phase_configs,
    load_run_config,
)


def test_default_phase_schedule():
    phases = default_phase_configs()
    assert [phases[p].epochs for p in ('step1', 'step2', 'step3')] == [20, 10, 10]
    assert phases['step1'].loss == 'combined'
    assert phases['step2'].loss == phases['step3'].loss == 'srcc_soft'
    assert phases['step3'].trainable == 'heads'
    assert phases['step3'].learning_rate == pytest.approx(1e-5)


@pytest.mark.parametrize('kwargs', [
    dict(phase='step3', epochs=1, loss='srcc_soft', trainable='all'),
    dict(phase='step1', epochs=1, loss='srcc_soft'),
    dict(phase='step2', epochs=1, loss='combined'),
    dict(phase='step1', epochs=1, audio_repeat_factor=0),
    dict(phase='step1', epochs=1, audio_repeat_factor='often'),
])
def test_phase_config_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        PhaseConfig(**kwargs)


def test_nano_backbone_widths():
    assert NANO_BACKBONE.fused_channels == 1120
    assert NANO_BACKBONE.feature_width == 2240


def test_toy_backbone_width():
    assert BackboneConfig().feature_width == 240


def test_backbone_rejects_bad_heads():
    with pytest.raises(ValueError, match="must divide"):
        BackboneConfig(embed_dim=30, mhsa_heads=4)


def test_toy_run_config_loads(toy_run_path):
    config = load_run_config(toy_run_path)
    assert len(config.synthetic) == 4
    assert {s.modality for s in config.synthetic} == {'audio', 'image', 'video', 'av'}
    assert config.phases['step1'].audio_repeat_factor == 'auto'
    assert config.backbone.strides == (2, 2, 2, 2)


def test_environment_overrides_file(toy_run_path, monkeypatch):
    monkeypatch.setenv('UNQA_SEED', '7')
    monkeypatch.setenv('UNQA_RUN_DIR', '/tmp/elsewhere')
    config = load_run_config(toy_run_path)
    assert config.seed == 7
    assert config.run_dir == '/tmp/elsewhere'


def test_config_hash_tracks_training_fields_only():
    config = RunConfig()
    assert config_hash(config) == config_hash(replace(config, run_dir='x', name='y'))
    assert config_hash(config) != config_hash(replace(config, seed=config.seed + 1))


def test_wts_forces_unit_repeat_factor():
    config = RunConfig(strategy='wts')
    assert config.phase('step1').audio_repeat_factor == 1
    assert RunConfig().phase('step1').audio_repeat_factor == 4


def test_unknown_strategy_and_step():
    with pytest.raises(ValueError):
        RunConfig(strategy='mdt')
    with pytest.raises(ValueError):
        RunConfig(skip_steps=('step4',))


def test_default_protocol_has_ten_repeats():
    assert EvaluationConfig().repeat_seeds == list(range(10))
    assert EvaluationConfig(repeats=3, base_seed=5).repeat_seeds == [5, 6, 7]


def test_segment_hop_rounds_down():
    mel = MelConfig(segment_width=15, segment_overlap=0.5)
    assert mel.segment_hop == 7
    assert mel.segment_width - mel.segment_hop == 8
    assert MelConfig(segment_width=16, segment_overlap=0.5).segment_hop == 8
    assert MelConfig(segment_width=1, segment_overlap=0.9).segment_hop == 1


@pytest.mark.parametrize('kwargs', [dict(segment_overlap=1.0), dict(segment_overlap=-0.1), dict(segment_width=0)])
def test_mel_config_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        MelConfig(**kwargs)


def test_ablation_switches_are_validated():
    assert BackboneConfig(fusion='none').fusion == 'none'
    with pytest.raises(ValueError, match="Unknown fusion"):
        BackboneConfig(fusion='gated')
    assert RunConfig(disabled_branches=('audio', 'motion')).disabled_branches == ('audio', 'motion')
    with pytest.raises(ValueError, match="Unknown branches"):
        RunConfig(disabled_branches=('depth',))
    with pytest.raises(ValueError, match="every feature branch"):
        RunConfig(disabled_branches=('spatial', 'motion', 'audio'))
    with pytest.raises(ValueError, match="Unknown head_layout"):
        RunConfig(head_layout='per_database')


def test_ablation_switches_change_the_config_hash():
    config = RunConfig()
    assert config_hash(config) != config_hash(replace(config, head_layout='single'))
    assert config_hash(config) != config_hash(replace(config, disabled_branches=('audio',)))
    assert config_hash(config) != config_hash(replace(config, backbone=replace(config.backbone, fusion='none')))
