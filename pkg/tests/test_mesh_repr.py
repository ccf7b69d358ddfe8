import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from facediff.mesh_repr import (
    FaceMeshSequence,
    FaceRepresentation,
    InvalidInputError,
    RigSpec,
    apply_pose,
    decompose,
    extract_identity,
    render,
    rotation_matrices,
    to_zero_pose,
)

from conftest import toy_rig

coords = st.floats(-100, 100, allow_nan=False)
rotvecs = arrays(np.float64, 3, elements=st.floats(-1.8, 1.8)).filter(lambda r: np.linalg.norm(r) < 3.1)


def rodrigues(r):
    """Independent closed-form rotation matrix."""
    theta = np.linalg.norm(r)
    if theta == 0:
        return np.eye(3)
    k = r / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * kx @ kx


def test_zero_rotation_is_identity(rng):
    frame = rng.normal(size=(6, 3))
    rig = toy_rig(pivot=rng.normal(size=3))
    np.testing.assert_allclose(apply_pose(frame, np.zeros(3), rig), frame, rtol=0, atol=1e-12)


def test_quarter_turn_about_z():
    frame = np.zeros((4, 3))
    frame[0] = (1, 0, 0)
    out = apply_pose(frame, np.array([0, 0, np.pi / 2]), toy_rig(4))
    np.testing.assert_allclose(out[0], (0, 1, 0), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(rotvecs, arrays(np.float64, 3, elements=coords))
def test_rotation_matches_rodrigues_and_inverts(r, pivot):
    rng = np.random.default_rng(0)
    frame = rng.normal(scale=50, size=(6, 3))
    rig = toy_rig(pivot=pivot)
    out = apply_pose(frame, r, rig)
    np.testing.assert_allclose(out, (frame - pivot) @ rodrigues(r).T + pivot, atol=1e-9)
    np.testing.assert_allclose(apply_pose(out, -r, rig), frame, atol=1e-9)
    # isometry about the pivot
    d_in = np.linalg.norm(frame[:, None] - frame[None], axis=-1)
    d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
    np.testing.assert_allclose(d_out, d_in, rtol=1e-9, atol=1e-9)


def test_flat_frame_keeps_shape(rng):
    frame = rng.normal(size=18)
    assert apply_pose(frame, np.array([0.1, 0.2, 0.3]), toy_rig()).shape == (18,)


@pytest.mark.parametrize("bad", [np.array([np.pi, 0, 0]), np.array([0, 4.0, 0]), np.array([np.nan, 0, 0])])
def test_rotation_rejects_out_of_range(bad):
    with pytest.raises(InvalidInputError):
        rotation_matrices(bad)


def test_apply_pose_rejects_nonfinite_mesh():
    frame = np.zeros((4, 3))
    frame[1, 1] = np.inf
    with pytest.raises(InvalidInputError):
        apply_pose(frame, np.zeros(3), toy_rig(4))


def test_zero_pose_recovers_base_mesh(rng):
    base = rng.normal(scale=40, size=(6, 3))
    rig = toy_rig(pivot=rng.normal(size=3))
    pose = rng.uniform(-0.5, 0.5, size=(5, 3))
    seq = FaceMeshSequence(np.stack([apply_pose(base, p, rig) for p in pose]))
    zero = to_zero_pose(seq, pose, rig)
    np.testing.assert_allclose(zero.vertices, np.repeat(base[None], 5, axis=0), atol=1e-9)
    back = np.stack([apply_pose(f, p, rig) for f, p in zip(zero.vertices, pose)])
    np.testing.assert_allclose(back, seq.vertices, atol=1e-9)


def test_zero_pose_static_unchanged(rng):
    seq = FaceMeshSequence(np.repeat(rng.normal(size=(1, 6, 3)), 3, axis=0))
    np.testing.assert_allclose(to_zero_pose(seq, np.zeros((3, 3)), toy_rig()).vertices, seq.vertices, atol=0)


def test_zero_pose_frame_count_mismatch(rng):
    seq = FaceMeshSequence(rng.normal(size=(3, 6, 3)))
    with pytest.raises(InvalidInputError):
        to_zero_pose(seq, np.zeros((2, 3)), toy_rig())


def test_extract_identity_cases(rng):
    m = rng.normal(size=(6, 3))
    const = FaceMeshSequence(np.repeat(m[None], 7, axis=0))
    np.testing.assert_allclose(extract_identity(const, 3, seed=5), m.reshape(-1), atol=1e-12)
    seq = FaceMeshSequence(rng.normal(size=(7, 6, 3)))
    np.testing.assert_allclose(extract_identity(seq, 7, seed=1), seq.flat().mean(axis=0), atol=1e-12)
    a, b = rng.normal(size=(2, 18))
    np.testing.assert_allclose(extract_identity(FaceMeshSequence(np.stack([a, b])), 2, 0), (a + b) / 2)


def test_extract_identity_seeded(rng):
    seq = FaceMeshSequence(rng.normal(size=(10, 6, 3)))
    np.testing.assert_array_equal(extract_identity(seq, 4, 3), extract_identity(seq, 4, 3))
    assert not np.array_equal(extract_identity(seq, 4, 3), extract_identity(seq, 4, 4))
    for k in (0, 11):
        with pytest.raises(InvalidInputError):
            extract_identity(seq, k, 0)


def test_decompose_hand_offsets(rng):
    m = rng.normal(size=18)
    delta = rng.normal(size=(5, 18))
    seq = FaceMeshSequence(m + delta)
    rep = decompose(seq, np.zeros((5, 3)), toy_rig(), k=5)
    np.testing.assert_allclose(rep.identity, m + delta.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(rep.motion, delta - delta.mean(axis=0), atol=1e-12)
    # mean-centering at k = N
    np.testing.assert_allclose(rep.motion.mean(axis=0), 0, atol=1e-12)


def test_decompose_static_sequence(rng):
    m = rng.normal(size=18)
    rep = decompose(FaceMeshSequence(np.repeat(m[None], 4, axis=0)), np.zeros((4, 3)), toy_rig(), k=4)
    np.testing.assert_allclose(rep.identity, m, atol=1e-12)
    np.testing.assert_allclose(rep.motion, 0, atol=1e-12)


def test_render_additive_case(rng):
    m, delta = rng.normal(size=18), rng.normal(size=(3, 18))
    rep = FaceRepresentation(m, delta, np.zeros((3, 3)))
    np.testing.assert_array_equal(render(rep, toy_rig()).flat(), m + delta)
    still = FaceRepresentation(m, np.zeros((3, 18)), np.zeros((3, 3)))
    np.testing.assert_array_equal(render(still, toy_rig()).flat(), np.repeat(m[None], 3, axis=0))


def test_render_rejects_nonfinite():
    rep = FaceRepresentation(np.zeros(18), np.full((2, 18), np.nan), np.zeros((2, 3)))
    with pytest.raises(InvalidInputError):
        render(rep, toy_rig())


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(4, 9), st.integers(0, 2**31 - 1))
def test_flatten_unflatten_bijective(n, v, seed):
    rng = np.random.default_rng(seed)
    rep = FaceRepresentation(rng.normal(size=3 * v), rng.normal(size=(n, 3 * v)), rng.normal(size=(n, 3)))
    x = rep.flatten()
    assert x.shape == (n + 1, 3 * v + 3)
    assert np.all(x[0, -3:] == 0)
    back = FaceRepresentation.unflatten(x)
    for name in ("identity", "motion", "pose"):
        np.testing.assert_array_equal(getattr(back, name), getattr(rep, name))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_decompose_render_round_trip(seed):
    rng = np.random.default_rng(seed)
    n, v = int(rng.integers(1, 10)), int(rng.integers(4, 12))
    rig = RigSpec(rng.normal(size=3), np.arange(v) < 2)
    seq = FaceMeshSequence(rng.normal(scale=80, size=(n, v, 3)))
    pose = rng.uniform(-1, 1, size=(n, 3))
    rep = decompose(seq, pose, rig, k=int(rng.integers(1, n + 1)), seed=seed)
    np.testing.assert_allclose(render(rep, rig).vertices, seq.vertices, atol=1e-6)


def test_type_invariants():
    with pytest.raises(InvalidInputError):
        FaceMeshSequence(np.zeros((0, 5, 3)))
    with pytest.raises(InvalidInputError):
        FaceMeshSequence(np.zeros((2, 3, 3)))
    with pytest.raises(InvalidInputError):
        RigSpec(np.zeros(3), np.ones(5, bool))
    with pytest.raises(InvalidInputError):
        RigSpec(np.zeros(3), np.zeros(5, bool))
    rig = toy_rig()
    np.testing.assert_array_equal(rig.nonlip_mask, ~rig.lip_mask)
    with pytest.raises(InvalidInputError):
        FaceRepresentation(np.zeros(18), np.zeros((2, 18)), np.zeros((3, 3)))
