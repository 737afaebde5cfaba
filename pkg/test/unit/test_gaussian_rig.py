import numpy as np
import pytest
from conftest import finite_difference, make_patch_model

from rig_splat.blendshape_model import triangle_frames
from rig_splat.errors import CheckpointError, InvalidInputError
from rig_splat.gaussian_rig import (
    DensifyStats,
    GaussianPrototypes,
    SplatGradients,
    bind_splats,
    bind_splats_backward,
    densify_and_prune,
    init_prototypes,
    read_prototypes,
    splat_adjacency,
    update_stats,
    write_prototypes,
)
from rig_splat.utils import normalize_quat, quat_to_matrix, rng_stream

UNIT_TRIANGLE = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def _prototypes(parent, rng=None, log_scale=None):
    n = len(parent)
    rotation = np.zeros((n, 4))
    rotation[:, 0] = 1.0
    return GaussianPrototypes(
        parent_face=np.asarray(parent),
        offset=np.zeros((n, 3)) if rng is None else 0.3 * rng.standard_normal((n, 3)),
        rotation=rotation if rng is None else rotation + 0.2 * rng.standard_normal((n, 4)),
        log_scale=np.zeros((n, 2)) if log_scale is None else log_scale,
        opacity_logit=np.zeros(n),
        albedo=np.full((n, 3), 0.5),
    )


def _stats(n_faces, opacity, grad, t_history=4):
    stats = DensifyStats(n_faces, t_history)
    grads = np.zeros((len(grad), 3))
    grads[:, 0] = grad
    return update_stats(stats, np.asarray(opacity, dtype=np.float64), grads)


# --- Binding ---
def test_zero_offset_binds_to_centroid() -> None:
    """Test that a zero offset and identity rotation reproduce the parent frame."""
    frames = triangle_frames(UNIT_TRIANGLE, np.array([[0, 1, 2]]))
    protos = _prototypes([0], log_scale=np.log([[0.5, 0.25]]))
    splats = bind_splats(protos, frames)
    assert np.allclose(splats.center[0], [1 / 3, 1 / 3, 0.0])
    assert np.allclose(splats.rotation[0], np.eye(3))
    assert np.allclose(splats.scales[0], [0.5, 0.25])
    assert splats.opacity[0] == pytest.approx(0.5)


def test_normal_offset_uses_normal_scale() -> None:
    """Test that an offset along the normal is scaled by s_pn."""
    frames = triangle_frames(UNIT_TRIANGLE, np.array([[0, 1, 2]]))
    protos = _prototypes([0])
    protos.offset[0] = [0.0, 0.0, 1.0]
    assert np.allclose(bind_splats(protos, frames).center[0], [1 / 3, 1 / 3, 1.0])


def test_binding_rigid_equivariance(test_head, rng) -> None:
    """Test that binding commutes with a rigid motion of the mesh."""
    q = quat_to_matrix(normalize_quat(rng.standard_normal(4)))
    t = rng.standard_normal(3)
    protos = init_prototypes(test_head)
    protos.offset = 0.2 * rng.standard_normal(protos.offset.shape)
    protos.rotation = protos.rotation + 0.3 * rng.standard_normal(protos.rotation.shape)
    v = test_head.base_vertices
    a = bind_splats(protos, triangle_frames(v, test_head.faces))
    b = bind_splats(protos, triangle_frames(v @ q.T + t, test_head.faces))
    assert np.allclose(b.center, a.center @ q.T + t, atol=1e-6)
    assert np.allclose(b.rotation, q @ a.rotation, atol=1e-6)
    assert np.allclose(b.scales, a.scales, rtol=1e-6)


def test_invalid_parent_frames_are_skipped() -> None:
    """Test that splats on degenerate faces are dropped and counted."""
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    frames = triangle_frames(v, np.array([[0, 1, 2], [0, 1, 3]]))
    splats = bind_splats(_prototypes([0, 1, 1, 0]), frames)
    assert len(splats) == 2
    assert splats.skipped == 2
    assert list(splats.source) == [1, 2]


def test_init_prototypes_targets_half_mean_edge(rng) -> None:
    """Test one mid-grey, half-opaque splat per face at roughly half the mean edge length."""
    model = make_patch_model(rng)
    protos = init_prototypes(model)
    assert list(protos.parent_face) == list(range(model.n_faces))
    splats = bind_splats(protos, triangle_frames(model.base_vertices, model.faces))
    corners = model.base_vertices[model.faces]
    half_edge = 0.5 * np.linalg.norm(corners - np.roll(corners, 1, axis=1), axis=2).mean(axis=1)
    assert np.allclose(splats.scales, half_edge[:, None])
    assert np.allclose(splats.opacity, 0.5)
    assert np.allclose(splats.albedo, 0.5)
    assert np.array_equal(protos.reference_log_scale, protos.log_scale)


def test_center_gradient_wrt_offset(rng) -> None:
    """Test that d(center)/d(offset) equals R_p diag(s_p) via finite differences."""
    v = np.array([[0.0, 0.0, 0.0], [1.3, 0.2, 0.1], [0.4, 0.7, -0.2]])
    frames = triangle_frames(v, np.array([[0, 1, 2]]))
    protos = _prototypes([0], rng)
    expected = frames.rotation[0] * frames.scale[0][None, :]
    for axis in range(3):
        for j in range(3):
            fd = finite_difference(lambda: float(bind_splats(protos, frames).center[0, axis]),
                                   protos.offset, (0, j), 1e-6)
            assert fd == pytest.approx(expected[axis, j], rel=1e-5, abs=1e-9)


def test_bind_backward_matches_finite_differences(rng) -> None:
    """Test prototype and frame gradients of a random linear functional of the bound splats."""
    model = make_patch_model(rng)
    frames = triangle_frames(model.base_vertices, model.faces)
    protos = _prototypes(np.array([0, 1, 1, 5, 7]), rng, log_scale=0.2 * rng.standard_normal((5, 2)))
    protos.opacity_logit = rng.standard_normal(5)
    g = SplatGradients(rng.standard_normal((5, 3)), rng.standard_normal((5, 3, 3)),
                       rng.standard_normal((5, 2)), rng.standard_normal(5), np.zeros((5, 3)))

    def loss() -> float:
        s = bind_splats(protos, frames)
        return float(np.sum(g.center * s.center) + np.sum(g.rotation * s.rotation)
                     + np.sum(g.scales * s.scales) + np.sum(g.opacity * s.opacity))

    splats = bind_splats(protos, frames)
    pg, fg = bind_splats_backward(protos, frames, splats, g)
    for name in ("offset", "rotation", "log_scale", "opacity_logit"):
        array, analytic = getattr(protos, name), getattr(pg, name)
        for index in np.ndindex(array.shape):
            fd = finite_difference(loss, array, index, 1e-6)
            assert fd == pytest.approx(analytic[index], rel=1e-5, abs=1e-8), (name, index)
    for name, array, analytic in (("centroid", frames.centroid, fg.centroid), ("scale", frames.scale, fg.scale),
                                  ("rotation", frames.rotation, fg.rotation)):
        for index in np.ndindex(array.shape):
            fd = finite_difference(loss, array, index, 1e-6)
            assert fd == pytest.approx(analytic[index], rel=1e-5, abs=1e-8), (name, index)


# --- Statistics ---
def test_constant_gradient_window_mean() -> None:
    """Test that a constant gradient gives its norm as the window mean."""
    stats = DensifyStats(1, 3)
    g = np.array([[3.0, 4.0, 0.0]])
    for _ in range(5):
        update_stats(stats, np.array([0.5]), g)
    assert stats.mean_grad(1) == pytest.approx([5.0])
    assert len(stats.grad_window) == 3


def test_two_step_window_mean() -> None:
    """Test the arithmetic mean of magnitudes 1 and 3."""
    stats = DensifyStats(1, 2)
    update_stats(stats, np.array([0.2]), np.array([[1.0, 0.0, 0.0]]))
    update_stats(stats, np.array([0.4]), np.array([[0.0, 3.0, 0.0]]))
    assert stats.mean_grad(1) == pytest.approx([2.0])
    assert stats.mean_opacity(1) == pytest.approx([0.3])


def test_zero_gradients_give_zero_mean() -> None:
    stats = _stats(2, [0.5, 0.5], [0.0, 0.0])
    assert np.array_equal(stats.mean_grad(2), [0.0, 0.0])


def test_update_stats_length_mismatch() -> None:
    """Test that mismatched opacity and gradient lengths are rejected."""
    with pytest.raises(InvalidInputError):
        update_stats(DensifyStats(1, 2), np.array([0.5, 0.5]), np.zeros((3, 3)))


# --- Densify and prune ---
def test_balanced_densify_keeps_count() -> None:
    """Test that n_prune = n_densify leaves the total unchanged and respects face bounds."""
    parent = np.repeat(np.arange(4), 3)
    protos = _prototypes(parent)
    stats = _stats(4, np.linspace(0.1, 0.9, 12), np.linspace(1.0, 0.0, 12))
    report = densify_and_prune(protos, stats, 4, 4, 0.05, rng_stream(0, "test"))
    assert len(report.prototypes) == 12
    assert report.pruned == 4 and report.cloned == 4
    counts = report.prototypes.face_counts(4)
    assert counts.min() >= 1 and counts.max() <= 6


def test_last_splat_on_face_survives() -> None:
    """Test that the lowest-opacity splat survives when it is alone on its face."""
    protos = _prototypes([0, 1, 1, 1])
    stats = _stats(2, [0.01, 0.2, 0.5, 0.9], [0.0, 0.0, 0.0, 0.0])
    report = densify_and_prune(protos, stats, 1, 0, 0.05, rng_stream(0, "test"))
    assert list(report.index_map) == [0, 2, 3]
    assert report.prune_deficit == 0


def test_no_op_densify() -> None:
    """Test that zero counts leave the prototypes unchanged."""
    protos = _prototypes([0, 0, 1])
    stats = _stats(2, [0.3, 0.4, 0.5], [1.0, 2.0, 3.0])
    report = densify_and_prune(protos, stats, 0, 0, 0.05, rng_stream(0, "test"))
    assert list(report.index_map) == [0, 1, 2]
    for name in GaussianPrototypes.PARAMETERS:
        assert np.array_equal(getattr(report.prototypes, name), getattr(protos, name))


def test_clones_are_capped_at_six_per_face() -> None:
    """Test that a full face takes no clones and the shortfall is reported."""
    protos = _prototypes(np.zeros(6, dtype=np.int64))
    stats = _stats(1, np.full(6, 0.5), np.arange(6.0))
    report = densify_and_prune(protos, stats, 0, 2, 0.05, rng_stream(0, "test"))
    assert report.cloned == 0
    assert report.clone_deficit == 2
    assert report.count_delta == 0


def test_prune_deficit_when_every_face_has_one() -> None:
    """Test that pruning cannot empty a face."""
    protos = _prototypes([0, 1, 2])
    stats = _stats(3, [0.1, 0.2, 0.3], [0.0, 0.0, 0.0])
    report = densify_and_prune(protos, stats, 2, 0, 0.05, rng_stream(0, "test"))
    assert report.pruned == 0 and report.prune_deficit == 2
    assert len(report.prototypes) == 3


def test_clones_copy_highest_gradient_with_noise() -> None:
    """Test that clones come from the largest gradients and only offset and scale are perturbed."""
    protos = _prototypes([0, 0, 1, 1])
    protos.albedo[3] = [0.9, 0.1, 0.2]
    stats = _stats(2, [0.5, 0.5, 0.5, 0.5], [0.1, 0.2, 0.3, 4.0])
    report = densify_and_prune(protos, stats, 0, 1, 0.05, rng_stream(0, "test"))
    assert list(report.index_map) == [0, 1, 2, 3, 3]
    assert list(report.is_clone) == [False, False, False, False, True]
    clone = report.prototypes[4]
    assert np.array_equal(clone.albedo, [0.9, 0.1, 0.2])
    assert not np.array_equal(clone.offset, protos.offset[3])
    assert np.array_equal(report.prototypes.reference_log_scale[4], protos.reference_log_scale[3])
    # statistics follow the surviving rows
    assert len(stats.grad_window[0]) == 5


def test_count_delta_matches_deficits(rng) -> None:
    """Test count bookkeeping over random scenarios."""
    for _ in range(20):
        parent = rng.integers(0, 5, 30)
        parent[:5] = np.arange(5)
        protos = _prototypes(parent)
        stats = _stats(5, rng.random(30), rng.random(30))
        n_prune, n_densify = rng.integers(0, 15, 2)
        report = densify_and_prune(protos, stats, int(n_prune), int(n_densify), 0.05, rng)
        expected = (n_densify - report.clone_deficit) - (n_prune - report.prune_deficit)
        assert len(report.prototypes) - 30 == expected
        counts = report.prototypes.face_counts(5)
        assert counts.min() >= 1


def test_densify_rejects_empty() -> None:
    with pytest.raises(InvalidInputError):
        densify_and_prune(_prototypes(np.zeros(0, dtype=np.int64)), DensifyStats(1, 1), 0, 0, 0.05,
                          rng_stream(0, "test"))


def test_splat_adjacency_lifts_face_adjacency() -> None:
    """Test that splats inherit the adjacency of their parent faces."""
    face_adj = np.array([[True, True, False], [True, True, True], [False, True, True]])
    adj = splat_adjacency(np.array([0, 0, 2]), face_adj)
    assert adj.tolist() == [[True, True, False], [True, True, False], [False, False, True]]


# --- Prototype blob ---
def test_prototype_blob_round_trip(tmp_path, rng) -> None:
    """Test the little-endian prototype file."""
    protos = _prototypes(np.array([0, 3, 3, 7]), rng, log_scale=rng.standard_normal((4, 2)))
    protos.opacity_logit = rng.standard_normal(4)
    path = str(tmp_path / "prototypes.bin")
    write_prototypes(protos, path)
    assert (tmp_path / "prototypes.bin").stat().st_size == 12 + 4 * (13 * 8 + 4)
    assert (tmp_path / "prototypes.bin").read_bytes()[:4] == b"RSPR"
    loaded = read_prototypes(path)
    assert np.array_equal(loaded.parent_face, protos.parent_face)
    for name in GaussianPrototypes.PARAMETERS:
        assert np.array_equal(getattr(loaded, name), getattr(protos, name)), name


def test_truncated_blob_is_rejected(tmp_path, rng) -> None:
    """Test that a short file raises a checkpoint error."""
    path = tmp_path / "prototypes.bin"
    write_prototypes(_prototypes([0, 1]), str(path))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError):
        read_prototypes(str(path))
