import logging
import math

import pytest
import torch
from torch.autograd import gradcheck

from core.base import DatabaseSpec, Modality, Phase
from core.model import (
    PreparedInput,
    RegressionHead,
    UNQAModel,
    build_model,
    checkpoint_digest,
    compose_features,
    head_layout,
    load_checkpoint,
    merge_heads,
    prepare_sample,
    read_checkpoint_digest,
    regress,
    save_checkpoint,
)
from core.utils import parameter_checksum
from core.verification import ConfigHashError, FeatureCompositionError, HeadMismatchError, UnknownDatabaseError

from conftest import make_tiny_config


def _gelu(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _spec(name, modality):
    return DatabaseSpec(name, Modality(modality), (1.0, 5.0), 20, 4)


def test_composition_widths():
    video = compose_features('video', f_s=torch.zeros(240), f_m=torch.ones(256))
    assert video.values.shape == (496,)
    assert torch.equal(video.values[240:], torch.ones(256))
    f_a = torch.rand(64)
    assert torch.equal(compose_features('audio', f_a=f_a).values, f_a)
    av = compose_features('av', f_s=torch.zeros(2, 4), f_m=torch.zeros(2, 3), f_a=torch.zeros(2, 5))
    assert av.values.shape == (2, 12)


def test_composition_rejects_wrong_constituents():
    with pytest.raises(FeatureCompositionError, match="audio feature not accepted for image"):
        compose_features('image', f_s=torch.zeros(4), f_a=torch.zeros(4))
    with pytest.raises(FeatureCompositionError, match="motion feature required"):
        compose_features('video', f_s=torch.zeros(4))


def test_zero_head_scores_zero():
    head = RegressionHead(6, 'image')
    with torch.no_grad():
        for param in head.parameters():
            param.zero_()
    assert regress(head, compose_features('image', f_s=torch.rand(6))).item() == 0.0


def test_head_matches_hand_evaluation():
    head = RegressionHead(4, 'image')
    assert head.fc1.out_features == 2
    with torch.no_grad():
        head.fc1.weight.copy_(torch.tensor([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]))
        head.fc1.bias.zero_()
        head.fc2.weight.copy_(torch.tensor([[1.0, 1.0]]))
        head.fc2.bias.zero_()
    score = regress(head, compose_features('image', f_s=torch.tensor([1.0, 2.0, 5.0, -3.0])))
    assert score.item() == pytest.approx(_gelu(1.0) + _gelu(2.0), abs=1e-6)


def test_head_mismatch():
    head = RegressionHead(4, 'image')
    with pytest.raises(HeadMismatchError):
        regress(head, compose_features('audio', f_a=torch.zeros(4)))
    with pytest.raises(HeadMismatchError):
        regress(head, compose_features('image', f_s=torch.zeros(3)))


def test_head_kind():
    assert RegressionHead(4, 'audio', database='a').kind == 'database_specific'
    assert RegressionHead(4, 'audio').kind == 'modality_specific'
    assert RegressionHead(4, None).kind == 'shared'


def test_head_gradient_matches_finite_differences():
    torch.manual_seed(0)
    head = RegressionHead(8, 'image').double()
    x = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
    assert gradcheck(head, (x,), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_each_modality_runs_only_its_branches(tiny_config, four_databases):
    model = build_model(tiny_config, [db.spec for db in four_databases])
    expected = {
        Modality.AUDIO: {'audio': 1},
        Modality.IMAGE: {'spatial': 1},
        Modality.VIDEO: {'spatial': 1, 'motion': 1},
        Modality.AV: {'spatial': 1, 'motion': 1, 'audio': 1},
    }
    for db in four_databases:
        model.branch_calls.clear()
        score = model(prepare_sample(db.samples[0], tiny_config))
        assert score.shape == ()
        assert dict(model.branch_calls) == expected[db.modality]


def test_feature_widths(tiny_config):
    model = UNQAModel(tiny_config)
    assert model.feature_width(Modality.IMAGE) == 24
    assert model.feature_width(Modality.VIDEO) == 32
    assert model.feature_width(Modality.AUDIO) == 8
    assert model.feature_width(Modality.AV) == 40


def test_build_model_is_deterministic(tiny_config, four_databases):
    specs = [db.spec for db in four_databases]
    a, b = build_model(tiny_config, specs), build_model(tiny_config, specs)
    assert parameter_checksum(a) == parameter_checksum(b)
    prepared = prepare_sample(four_databases[3].samples[0], tiny_config)
    assert torch.equal(a(prepared), b(prepared))


def test_step1_routes_by_database(tiny_config):
    model = build_model(tiny_config, [_spec('a', 'image'), _spec('b', 'image')])
    assert model.head_for('a', Modality.IMAGE) is not model.head_for('b', Modality.IMAGE)
    with pytest.raises(UnknownDatabaseError):
        model.head_for('c', Modality.IMAGE)


def test_merge_averages_database_heads(tiny_config, caplog):
    model = build_model(tiny_config, [_spec('a', 'image'), _spec('b', 'image'), _spec('v', 'video')])
    before = parameter_checksum(model)
    with caplog.at_level(logging.WARNING):
        merged = merge_heads(model)
    assert 'No audio database heads' in caplog.text
    assert 'No av database heads' in caplog.text

    assert merged.phase == Phase.STEP2
    assert sorted(merged.heads) == ['modality__audio', 'modality__av', 'modality__image', 'modality__video']
    a, b = model.head_for('a', Modality.IMAGE), model.head_for('b', Modality.IMAGE)
    image = merged.head_for('anything', Modality.IMAGE)
    assert torch.allclose(image.fc1.weight, (a.fc1.weight + b.fc1.weight) / 2)
    assert torch.allclose(image.fc2.bias, (a.fc2.bias + b.fc2.bias) / 2)
    video = merged.head_for('v', Modality.VIDEO)
    assert torch.equal(video.fc1.weight, model.head_for('v', Modality.VIDEO).fc1.weight)
    assert image.database is None

    assert parameter_checksum(merged.spatial) == parameter_checksum(model.spatial)
    assert parameter_checksum(model) == before
    assert model.phase == Phase.STEP1
    with pytest.raises(ValueError):
        merge_heads(merged)


def test_modality_heads_serve_any_database(tiny_config, four_databases):
    model = merge_heads(build_model(tiny_config, [db.spec for db in four_databases]))
    prepared = prepare_sample(four_databases[1].samples[0], tiny_config)
    renamed = PreparedInput('never_seen', prepared.sample_id, prepared.modality, prepared.key_frames)
    assert torch.equal(model(prepared), model(renamed))


def test_full_av_model_gradient_matches_finite_differences():
    config = make_tiny_config(
        preprocess={'short_side': 8, 'crop_size': 8, 'motion_size': 8},
        backbone={'channels': [2, 4], 'strides': [2, 2], 'mhsa_heads': 1, 'embed_dim': 2},
        motion={'dim': 4, 'hidden_channels': 2},
        audio={'dim': 4, 'heads': 1, 'conv_channels': [2, 2], 'max_segments': 4},
    )
    torch.manual_seed(0)
    model = UNQAModel(config)
    model.install_modality_heads(Phase.STEP2)
    model = model.double()
    key_frames = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    chunk = torch.rand(2, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    mel = torch.randn(1, 15, 48, dtype=torch.float64, requires_grad=True)

    def score(frames, clip, segments):
        return model(PreparedInput('db', 's', Modality.AV, frames, [clip], segments))

    assert gradcheck(score, (key_frames, chunk, mel), eps=1e-6, atol=1e-5, rtol=1e-3)


def test_checkpoint_roundtrip(tiny_config, four_databases, tmp_path):
    model = build_model(tiny_config, [db.spec for db in four_databases])
    path = save_checkpoint(model, tmp_path / 'ckpt' / 'step1.pt', extra={'note': 'x'})
    loaded = load_checkpoint(path, tiny_config)
    assert loaded.phase == Phase.STEP1
    assert head_layout(loaded) == head_layout(model)
    assert parameter_checksum(loaded) == parameter_checksum(model)
    assert checkpoint_digest(loaded) == read_checkpoint_digest(path) == checkpoint_digest(model)
    assert not any(p.requires_grad for p in loaded.motion.parameters())
    prepared = prepare_sample(four_databases[2].samples[0], tiny_config)
    assert torch.equal(loaded(prepared), model(prepared))


def test_checkpoint_under_other_config_is_refused(tiny_config, tmp_path):
    path = save_checkpoint(build_model(tiny_config), tmp_path / 'step1.pt')
    with pytest.raises(ConfigHashError):
        load_checkpoint(path, make_tiny_config(seed=1))


def test_disabled_branch_narrows_every_modality(four_databases):
    config = make_tiny_config(disabled_branches=['motion'])
    model = build_model(config, [db.spec for db in four_databases])
    assert model.constituents(Modality.AV) == ('spatial', 'audio')
    assert model.feature_width(Modality.VIDEO) == 24
    assert model.feature_width(Modality.AV) == 32
    for db in four_databases:
        model.branch_calls.clear()
        assert model(prepare_sample(db.samples[0], config)).shape == ()
        assert 'motion' not in model.branch_calls
    with pytest.raises(FeatureCompositionError, match="not constituents of image"):
        compose_features('image', f_s=torch.zeros(4), constituents=('motion',))


def test_modality_without_any_branch_is_refused():
    config = make_tiny_config(disabled_branches=['spatial'])
    model = UNQAModel(config)
    assert model.modalities == [Modality.AUDIO, Modality.VIDEO, Modality.AV]
    model.install_modality_heads(Phase.STEP2)
    assert sorted(model.heads) == ['modality__audio', 'modality__av', 'modality__video']
    assert model.feature_width(Modality.VIDEO) == 8
    with pytest.raises(FeatureCompositionError, match="feeding image"):
        model.head_for('x', Modality.IMAGE)
    with pytest.raises(FeatureCompositionError):
        build_model(config, [_spec('i', 'image')])


def test_single_head_layout_shares_one_regressor(four_databases):
    config = make_tiny_config(head_layout='single')
    model = build_model(config, [db.spec for db in four_databases])
    assert {h.in_width for h in model.heads.values()} == {40}

    merged = merge_heads(model)
    assert list(merged.heads) == ['shared']
    shared = merged.heads['shared']
    assert shared.kind == 'shared'
    mean = torch.stack([h.fc1.weight for h in model.database_heads()]).mean(dim=0)
    assert torch.allclose(shared.fc1.weight, mean)
    assert merged.head_for('a', Modality.AUDIO) is merged.head_for('b', Modality.IMAGE)

    image = merged.features(prepare_sample(four_databases[1].samples[0], config))
    assert image.values.shape == (40,)
    assert torch.equal(image.values[24:], torch.zeros(16))
    audio = merged.features(prepare_sample(four_databases[0].samples[0], config))
    assert torch.equal(audio.values[:32], torch.zeros(32))


def test_single_head_checkpoint_roundtrip(four_databases, tmp_path):
    config = make_tiny_config(head_layout='single')
    model = merge_heads(build_model(config, [db.spec for db in four_databases]))
    loaded = load_checkpoint(save_checkpoint(model, tmp_path / 'step2.pt'), config)
    assert head_layout(loaded) == head_layout(model) == [
        {'key': 'shared', 'modality': None, 'database': None, 'in_width': 40}]
    prepared = prepare_sample(four_databases[3].samples[0], config)
    assert torch.equal(loaded(prepared), model(prepared))
