from dataclasses import replace

import librosa
import numpy as np
import pandas as pd
import pytest
import soundfile as sf
from PIL import Image
from scipy.stats import spearmanr

from config.config import MelConfig
from core.base import MediaSample, Modality
from core.media_data import (
    DatabaseRegistry,
    DistortionConfig,
    chunk_frames,
    compute_mel_spectrogram,
    crop_offsets,
    generate_synthetic_database,
    load_manifest,
    load_payload,
    preprocess_image,
    preprocess_motion_clip,
    rescale_mos,
    resized_shape,
    select_key_frames,
    split_database,
    split_sizes,
    write_manifest,
)
from core.verification import DuplicateSampleError, MissingMediaError, MosRangeError, SplitError

from conftest import make_database


@pytest.mark.parametrize('n, expected', [(100, (70, 10, 20)), (10, (7, 1, 2)), (101, (71, 10, 20))])
def test_split_sizes(n, expected):
    assert split_sizes(n) == expected


def test_split_is_a_seeded_partition():
    db = make_database('image', n_samples=30)
    split = split_database(db, seed=3)
    assert split.sizes == (21, 3, 6)
    everything = split.train + split.val + split.test
    assert sorted(everything) == sorted(db.sample_ids)
    assert len(set(everything)) == 30
    assert split_database(db, seed=3) == split
    assert split_database(db, seed=4).test != split.test


def test_split_rejects_tiny_database():
    db = make_database('image', n_samples=10)
    small = replace(db, samples=db.samples[:9])
    with pytest.raises(SplitError):
        split_database(small, seed=0)


def test_resize_keeps_aspect_and_rounds():
    assert resized_shape(1080, 1920, 520) == (520, 924)
    assert resized_shape(600, 400, 520) == (780, 520)
    assert crop_offsets(780, 520, 384) == (198, 68)


def test_preprocess_image_shapes():
    frame = np.random.default_rng(0).random((3, 30, 40)).astype(np.float32)
    out = preprocess_image(frame, short_side=20, crop_size=16)
    assert tuple(out.shape) == (3, 16, 16)


def test_preprocess_image_crop_too_large():
    with pytest.raises(ValueError):
        preprocess_image(np.zeros((3, 20, 20), dtype=np.float32), short_side=20, crop_size=24)


def test_motion_clip_resized_without_crop():
    clip = np.zeros((5, 3, 12, 30), dtype=np.float32)
    assert tuple(preprocess_motion_clip(clip, 16).shape) == (5, 3, 16, 16)


def test_mel_grid_dimensions_for_one_second():
    wave = np.random.default_rng(0).normal(size=16000).astype(np.float32)
    mel = compute_mel_spectrogram(wave, 16000)
    assert mel.values.shape == (99, 48)
    assert mel.frame_hop == pytest.approx(0.01)
    assert mel.segments.shape == (13, 15, 48)
    assert mel.segment_starts[:3] == (0, 7, 14)


def test_mel_silence_hits_log_floor():
    mel = compute_mel_spectrogram(np.zeros(16000, dtype=np.float32), 16000)
    assert mel.log_floor == pytest.approx(-10.0)
    assert np.all(mel.values == mel.log_floor)


def test_mel_tone_peaks_near_its_band():
    t = np.arange(16000) / 16000
    mel = compute_mel_spectrogram(np.sin(2 * np.pi * 1000 * t), 16000)
    centers = librosa.mel_frequencies(n_mels=50, fmin=0.0, fmax=8000.0)[1:-1]
    nearest = int(np.argmin(np.abs(centers - 1000.0)))
    assert abs(int(np.argmax(mel.values.mean(axis=0))) - nearest) <= 1


def test_short_audio_padded_to_one_segment():
    mel = compute_mel_spectrogram(np.ones(800, dtype=np.float32) * 0.1, 16000)
    assert mel.values.shape[0] == 4
    assert mel.segments.shape == (1, 15, 48)
    assert np.all(mel.segments[0, 4:] == mel.log_floor)


def test_audio_shorter_than_window_rejected():
    with pytest.raises(ValueError):
        compute_mel_spectrogram(np.zeros(100), 16000, MelConfig())


def test_synthetic_database_is_deterministic_and_monotone():
    a = make_database('image', n_samples=30, seed=5)
    b = make_database('image', n_samples=30, seed=5)
    assert a.sample_ids == b.sample_ids
    assert [s.mos for s in a.samples] == [s.mos for s in b.samples]
    assert all(s.payload.equals(t.payload) for s, t in zip(a.samples, b.samples))
    assert all(a.spec.contains(s.mos) for s in a.samples)
    latent = [s.latent_quality for s in a.samples]
    mos = [s.mos for s in a.samples]
    assert spearmanr(latent, mos).correlation == pytest.approx(1.0)


@pytest.mark.parametrize('modality', list(Modality))
def test_synthetic_payload_fits_modality(modality):
    db = make_database(modality, n_samples=10)
    payload = load_payload(db.samples[0])
    assert (payload.frames is not None) == modality.has_frames
    assert (payload.waveform is not None) == modality.has_audio


def test_synthetic_rejects_bad_arguments():
    config = DistortionConfig(families=('noise',))
    with pytest.raises(ValueError):
        generate_synthetic_database('image', 9, config, seed=0)
    with pytest.raises(ValueError):
        generate_synthetic_database('image', 20, DistortionConfig(families=('jitter',)), seed=0)
    with pytest.raises(ValueError):
        generate_synthetic_database('smell', 20, config, seed=0)


def test_registry_rejects_duplicate_names():
    registry = DatabaseRegistry()
    registry.register(make_database('audio', n_samples=10))
    with pytest.raises(ValueError):
        registry.register(make_database('audio', n_samples=10))
    assert 'tiny_audio' in registry and len(registry) == 1


def test_manifest_reload_preserves_samples(tmp_path):
    db = make_database('av', n_samples=10)
    loaded = load_manifest(write_manifest(db, tmp_path))
    assert loaded.spec == db.spec
    assert loaded.sample_ids == db.sample_ids
    assert [s.mos for s in loaded.samples] == [s.mos for s in db.samples]
    assert load_payload(loaded.samples[3]).equals(load_payload(db.samples[3]))


def _rewrite(manifest, mutate):
    table = pd.read_csv(manifest, dtype=str, keep_default_na=False)
    mutate(table)
    table.to_csv(manifest, index=False)


def test_manifest_duplicate_id(tmp_path):
    manifest = write_manifest(make_database('image', n_samples=10), tmp_path)

    def duplicate(table):
        table.loc[1, 'sample_id'] = table.loc[0, 'sample_id']
    _rewrite(manifest, duplicate)
    with pytest.raises(DuplicateSampleError):
        load_manifest(manifest)


def test_manifest_mos_out_of_range(tmp_path):
    manifest = write_manifest(make_database('image', n_samples=10), tmp_path)

    def out_of_range(table):
        table.loc[2, 'mos'] = '9.5'
    _rewrite(manifest, out_of_range)
    with pytest.raises(MosRangeError):
        load_manifest(manifest)


def test_manifest_missing_media(tmp_path):
    manifest = write_manifest(make_database('audio', n_samples=10), tmp_path)

    def missing(table):
        table.loc[0, 'audio_path'] = 'media/nowhere.npz'
    _rewrite(manifest, missing)
    with pytest.raises(MissingMediaError):
        load_manifest(manifest)


def test_png_and_wav_media(tmp_path):
    pixels = (np.random.default_rng(0).random((12, 10, 3)) * 255).astype(np.uint8)
    Image.fromarray(pixels).save(tmp_path / 'a.png')
    image = MediaSample('d', 'a', Modality.IMAGE, 3.0, media_path=tmp_path / 'a.png')
    frames = load_payload(image).frames
    assert frames.shape == (1, 3, 12, 10)
    assert 0.0 <= frames.min() and frames.max() <= 1.0

    sf.write(tmp_path / 'b.wav', np.zeros(8000, dtype=np.float32), 8000)
    audio = MediaSample('d', 'b', Modality.AUDIO, 3.0, audio_path=tmp_path / 'b.wav')
    payload = load_payload(audio, sample_rate=16000)
    assert payload.sample_rate == 16000
    assert abs(payload.waveform.shape[0] - 16000) <= 2


def test_key_frames_and_chunks():
    frames = np.zeros((9, 3, 4, 4), dtype=np.float32)
    assert select_key_frames(frames[:8], 4.0, 1.0).shape[0] == 2
    chunks = chunk_frames(frames, 4.0, 1.0)
    assert [c.shape[0] for c in chunks] == [4, 5]
    with pytest.raises(ValueError):
        chunk_frames(frames[:1], 4.0, 1.0)


def test_rescale_mos_maps_scores_and_range():
    db = make_database('image', n_samples=10)
    scaled = rescale_mos(db, 3.0, 7.0)
    assert scaled.spec.mos_range == (10.0, 22.0)
    assert [s.mos for s in scaled.samples] == [3.0 * s.mos + 7.0 for s in db.samples]
    with pytest.raises(ValueError):
        rescale_mos(db, -1.0, 0.0)


def test_noisy_synthetic_images_track_latent_quality():
    distortion = DistortionConfig(families=('noise', 'blur'), height=24, width=32, n_frames=1)
    db = generate_synthetic_database('image', 100, distortion, seed=1, name='noisy_image')
    assert len(db.samples) == 100
    latent = [s.latent_quality for s in db.samples]
    assert spearmanr(latent, [s.mos for s in db.samples]).correlation >= 0.95


def test_full_hd_frame_becomes_the_crop():
    frame = np.random.default_rng(0).random((3, 1080, 1920)).astype(np.float32)
    assert tuple(preprocess_image(frame).shape) == (3, 384, 384)


def _bilinear_reference(image, size):
    """Half-pixel-centred bilinear resampling with edge clamping."""
    height, width = image.shape

    def taps(n_in):
        src = np.maximum((np.arange(size) + 0.5) * n_in / size - 0.5, 0.0)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = taps(height)
    x0, x1, wx = taps(width)
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy)[:, None] + bottom * wy[:, None]


def test_motion_resize_matches_bilinear_reference():
    gradient = np.arange(16, dtype=np.float32).reshape(4, 4)
    clip = np.broadcast_to(gradient, (2, 3, 4, 4)).copy()
    resized = preprocess_motion_clip(clip, 7).numpy()
    expected = _bilinear_reference(gradient.astype(np.float64), 7)
    for frame in resized:
        for channel in frame:
            np.testing.assert_allclose(channel, expected, atol=1e-5)
    tall = np.zeros((8, 3, 100, 50), dtype=np.float32)
    assert tuple(preprocess_motion_clip(tall, 224).shape) == (8, 3, 224, 224)
