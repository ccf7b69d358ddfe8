import numpy as np
import pytest
import torch

from facediff import pipeline
from facediff.denoiser import make_config
from facediff.diffusion import make_schedule
from facediff.sampler import ReferenceSet, sample, sample_batch, sample_many
from facediff.training import TrainConfig


@pytest.fixture(scope="module")
def setup(small_dataset):
    ds = small_dataset
    cfg = make_config("micro", num_vertices=40, audio_dim=16, max_frames=12, diffusion_steps=15)
    model, _ = pipeline.train_denoiser(ds, cfg, TrainConfig(steps=5, batch_size=4, lr=1e-3, log_every=0))
    reps = pipeline.representations(ds.utterances, ds.rig)
    return model, reps, pipeline.audio_tracks(ds.utterances)


def test_reference_exactness(setup):
    model, reps, audios = setup
    ref = reps[0]
    out = sample(model, audios[0], ReferenceSet(identity=ref.identity, pose=ref.pose), seed=1)
    assert np.array_equal(out.identity, ref.identity) and np.array_equal(out.pose, ref.pose)
    other = sample(model, audios[0], ReferenceSet(identity=ref.identity, pose=ref.pose), seed=2)
    assert not np.array_equal(out.motion, other.motion)
    full = sample(model, audios[1], ReferenceSet(ref.identity, ref.pose, ref.motion), seed=3)
    for name in ("identity", "pose", "motion"):
        assert np.array_equal(getattr(full, name), getattr(ref, name))


def test_seed_determinism_and_free_variation(setup):
    model, _, audios = setup
    a = sample(model, audios[0], seed=5)
    b = sample(model, audios[0], seed=5)
    c = sample(model, audios[0], seed=6)
    assert np.array_equal(a.flatten(), b.flatten())
    for name in ("identity", "pose", "motion"):
        assert not np.array_equal(getattr(a, name), getattr(c, name))


def test_batch_matches_single_and_order(setup):
    model, _, audios = setup
    batch = sample_batch(model, audios[0], ReferenceSet(), 1.0, None, [3, 4, 5])
    single = sample(model, audios[0], seed=4)
    np.testing.assert_allclose(batch[1].flatten(), single.flatten(), rtol=0, atol=1e-5)
    rev = sample_batch(model, audios[0], ReferenceSet(), 1.0, None, [5, 4, 3])
    for x, y in zip(batch, rev[::-1]):
        np.testing.assert_allclose(x.flatten(), y.flatten(), rtol=0, atol=1e-5)
    again = sample_batch(model, audios[0], ReferenceSet(), 1.0, None, [3, 4, 5])
    assert all(np.array_equal(x.flatten(), y.flatten()) for x, y in zip(batch, again))
    one = sample_batch(model, audios[0], ReferenceSet(), 1.0, None, [4])
    assert np.array_equal(one[0].flatten(), single.flatten())


def test_reference_shape_errors(setup):
    model, reps, audios = setup
    with pytest.raises(ValueError):
        sample(model, audios[0], ReferenceSet(pose=np.zeros((11, 3))))
    with pytest.raises(ValueError):
        sample(model, audios[0], ReferenceSet(identity=np.zeros(12)))


def test_guidance_needs_masked_training(small_dataset, setup):
    _, _, audios = setup
    cfg = make_config("micro", num_vertices=40, audio_dim=16, max_frames=12, diffusion_steps=5, masked_conditioning=False)
    plain, _ = pipeline.train_denoiser(small_dataset, cfg, TrainConfig(steps=1, batch_size=2, log_every=0))
    sample(plain, audios[0], s=1.0)
    with pytest.raises(ValueError):
        sample(plain, audios[0], s=2.0)


def test_untrained_warning(setup):
    model, _, audios = setup
    fresh = pipeline.build_model(model.config, setup[1])
    with pytest.warns(RuntimeWarning):
        sample(fresh, audios[0])


def test_guided_sampling_runs(setup):
    model, _, audios = setup
    out = sample(model, audios[0], s=2.5, seed=1)
    assert np.all(np.isfinite(out.flatten()))
    assert np.all(out.flatten()[0, -3:] == 0)


def test_ablated_models_require_references(small_dataset, setup):
    _, reps, audios = setup
    cfg = make_config("micro", num_vertices=40, audio_dim=16, max_frames=12, diffusion_steps=5, learn_identity=False)
    model, _ = pipeline.train_denoiser(small_dataset, cfg, TrainConfig(steps=1, batch_size=2, log_every=0))
    with pytest.raises(ValueError):
        sample(model, audios[0])
    out = sample(model, audios[0], ReferenceSet(identity=reps[0].identity))
    assert np.array_equal(out.identity, reps[0].identity)
