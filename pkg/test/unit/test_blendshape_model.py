import numpy as np
import pytest
from conftest import finite_difference, make_patch_model

from rig_splat.blendshape_model import (
    BlendshapeModel,
    Pose,
    export_obj,
    face_adjacency,
    landmarks_3d,
    load_model,
    load_obj,
    pose_mesh,
    pose_mesh_backward,
    save_model,
    triangle_frames,
    triangle_frames_backward,
)
from rig_splat.errors import CheckpointError, InvalidInputError
from rig_splat.utils import normalize_quat, quat_from_euler_deg, quat_to_matrix

UNIT_TRIANGLE = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def _rigid(rng):
    return quat_to_matrix(normalize_quat(rng.standard_normal(4))), rng.standard_normal(3)


# --- pose_mesh ---
def test_identity_pose_returns_base(test_head) -> None:
    """Test that zero codes and the identity pose leave the base mesh unchanged."""
    v = pose_mesh(test_head, np.zeros(test_head.n_shape), np.zeros(test_head.n_expr), Pose())
    assert np.array_equal(v, test_head.base_vertices)


def test_unit_shape_code_adds_basis_column(test_head) -> None:
    """Test that beta = e_k adds the k-th shape column as per-vertex offsets."""
    beta = np.zeros(test_head.n_shape)
    beta[2] = 1.0
    v = pose_mesh(test_head, beta, np.zeros(test_head.n_expr), Pose())
    expected = test_head.base_vertices + test_head.shape_basis[:, 2].reshape(-1, 3)
    assert np.allclose(v, expected, atol=1e-15)


def test_translation_shifts_every_vertex(test_head) -> None:
    """Test a pure translation pose."""
    pose = Pose(global_translation=np.array([0.0, 0.0, 0.1]))
    v = pose_mesh(test_head, np.zeros(test_head.n_shape), np.zeros(test_head.n_expr), pose)
    assert np.allclose(v - test_head.base_vertices, [0.0, 0.0, 0.1], atol=1e-15)


def test_shape_linearity(test_head, rng) -> None:
    """Test that shape offsets add linearly at the identity pose."""
    zero_psi = np.zeros(test_head.n_expr)
    b1, b2 = rng.standard_normal((2, test_head.n_shape))
    base = test_head.base_vertices
    lhs = pose_mesh(test_head, b1 + b2, zero_psi, Pose()) - base
    rhs = (pose_mesh(test_head, b1, zero_psi, Pose()) - base) + (pose_mesh(test_head, b2, zero_psi, Pose()) - base)
    assert np.allclose(lhs, rhs, atol=1e-14)


def test_identity_neck_ignores_neck_weights(test_head, rng) -> None:
    """Test that neck weights have no effect while the neck rotation is the identity."""
    beta = rng.standard_normal(test_head.n_shape)
    psi = rng.standard_normal(test_head.n_expr)
    pose = Pose(quat_from_euler_deg(5.0, -3.0, 2.0), np.array([0.0, 0.0, 1.0]))
    reweighted = BlendshapeModel(test_head.base_vertices, test_head.faces, test_head.shape_basis,
                                 test_head.expr_basis, rng.uniform(0.0, 1.0, test_head.n_vertices),
                                 test_head.neck_pivot, test_head.landmark_faces, test_head.landmark_bary,
                                 test_head.uv_coords)
    assert np.allclose(pose_mesh(test_head, beta, psi, pose), pose_mesh(reweighted, beta, psi, pose), atol=1e-15)


def test_code_length_mismatch_is_rejected(test_head) -> None:
    """Test that a wrong-length code raises a validation error."""
    with pytest.raises(InvalidInputError):
        pose_mesh(test_head, np.zeros(test_head.n_shape + 1), np.zeros(test_head.n_expr), Pose())


def test_non_unit_pose_quaternion_is_rejected() -> None:
    """Test the unit-norm invariant on poses."""
    with pytest.raises(InvalidInputError):
        Pose(global_rotation=np.array([2.0, 0.0, 0.0, 0.0]))


def test_pose_mesh_backward_matches_finite_differences(rng) -> None:
    """Test vertex-gradient pullback to codes, rotation quaternions and translation."""
    model = make_patch_model(rng, basis_scale=0.01)
    beta = rng.standard_normal(model.n_shape)
    psi = rng.standard_normal(model.n_expr)
    q_global = quat_from_euler_deg(10.0, -20.0, 5.0)
    q_neck = quat_from_euler_deg(-8.0, 4.0, 12.0)
    t = np.array([0.01, -0.02, 0.5])
    weight = rng.standard_normal((model.n_vertices, 3))

    def loss() -> float:
        return float(np.sum(weight * pose_mesh(model, beta, psi, Pose(q_global, t, q_neck))))

    grads = pose_mesh_backward(model, beta, psi, Pose(q_global, t, q_neck), weight)
    for array, analytic in ((beta, grads.beta), (psi, grads.psi), (t, grads.global_translation)):
        for i in range(len(array)):
            assert finite_difference(loss, array, i, 1e-6) == pytest.approx(analytic[i], rel=1e-6, abs=1e-9)
    # quaternion gradients are taken at fixed norm; compare along tangent directions
    for q, analytic in ((q_global, grads.global_rotation), (q_neck, grads.neck_rotation)):
        for _ in range(3):
            step = rng.standard_normal(4)
            step -= (step @ q) * q
            step *= 1e-6 / np.linalg.norm(step)
            base = q.copy()
            q[:] = normalize_quat(base + step)
            plus = loss()
            q[:] = normalize_quat(base - step)
            minus = loss()
            q[:] = base
            assert (plus - minus) / 2.0 == pytest.approx(analytic @ step, rel=1e-4, abs=1e-12)


# --- triangle_frames ---
def test_axis_aligned_triangle_frame() -> None:
    """Test the hand-computed frame of the unit right triangle."""
    frames = triangle_frames(UNIT_TRIANGLE, np.array([[0, 1, 2]]))
    assert np.allclose(frames.rotation[0], np.eye(3), atol=1e-15)
    assert np.allclose(frames.scale[0], [1.0, 1.0, 1.0])
    assert np.allclose(frames.centroid[0], [1 / 3, 1 / 3, 0.0])
    assert frames.valid[0]


def test_scaled_triangle_frame() -> None:
    """Test that doubling the triangle doubles scales and centroid but not the rotation."""
    frames = triangle_frames(2.0 * UNIT_TRIANGLE, np.array([[0, 1, 2]]))
    assert np.allclose(frames.rotation[0], np.eye(3), atol=1e-15)
    assert np.allclose(frames.scale[0], [2.0, 2.0, 2.0])
    assert np.allclose(frames.centroid[0], [2 / 3, 2 / 3, 0.0])


def test_anisotropic_normal_scale_is_minimum() -> None:
    """Test s_pn = min(s_pu, s_pv) on a long thin triangle."""
    v = np.array([[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [1.0, 0.5, 0.0]])
    frames = triangle_frames(v, np.array([[0, 1, 2]]))
    assert np.allclose(frames.scale[0], [4.0, 0.5, 0.5])


def test_triangle_frames_rigid_equivariance(test_head, rng) -> None:
    """Test that a rigid motion rotates frames and moves centroids but keeps scales."""
    q, t = _rigid(rng)
    v = test_head.base_vertices
    a = triangle_frames(v, test_head.faces)
    b = triangle_frames(v @ q.T + t, test_head.faces)
    assert np.allclose(b.rotation, q @ a.rotation, atol=1e-6)
    assert np.allclose(b.centroid, a.centroid @ q.T + t, atol=1e-6)
    assert np.allclose(b.scale, a.scale, rtol=1e-6)


def test_frames_are_orthonormal(test_head) -> None:
    """Test the rotation invariant on every face of the bundled head."""
    frames = triangle_frames(test_head.base_vertices, test_head.faces)
    r = frames.rotation
    assert np.allclose(np.transpose(r, (0, 2, 1)) @ r, np.eye(3), atol=1e-6)
    assert np.all(frames.scale[:, :2] > 0)
    assert frames.degenerate_count == 0


def test_degenerate_triangle_is_marked_invalid() -> None:
    """Test that a zero-area face is flagged rather than raising."""
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    frames = triangle_frames(v, np.array([[0, 1, 2], [0, 1, 3]]))
    assert list(frames.valid) == [False, True]
    assert frames.degenerate_count == 1


def test_triangle_frames_backward_matches_finite_differences(rng) -> None:
    """Test the frame pullback on random triangles away from the s_pu = s_pv kink."""
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.3, 0.5, 0.1],
                  [1.2, 0.9, -0.3], [1.0, 2.5, 0.2], [0.4, 1.1, 0.6]]) + 0.01 * rng.standard_normal((6, 3))
    faces = np.array([[0, 1, 2], [3, 4, 5], [1, 3, 5]])
    g_rot = rng.standard_normal((3, 3, 3))
    g_scale = rng.standard_normal((3, 3))
    g_cen = rng.standard_normal((3, 3))

    def loss() -> float:
        f = triangle_frames(v, faces)
        return float(np.sum(g_rot * f.rotation) + np.sum(g_scale * f.scale) + np.sum(g_cen * f.centroid))

    frames = triangle_frames(v, faces)
    assert np.all(np.abs(frames.scale[:, 0] - frames.scale[:, 1]) > 0.1)
    analytic = triangle_frames_backward(v, faces, frames, g_rot, g_scale, g_cen)
    for index in np.ndindex(v.shape):
        assert finite_difference(loss, v, index, 1e-6) == pytest.approx(analytic[index], rel=1e-5, abs=1e-8)


# --- landmarks_3d ---
def test_landmark_corner_and_centroid(rng) -> None:
    """Test barycentric corner and centroid embeddings."""
    model = make_patch_model(rng)
    model.landmark_bary = np.array([[1.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3], [0.0, 0.0, 1.0]])
    v = model.base_vertices
    lm = landmarks_3d(v, model)
    faces = model.faces[model.landmark_faces]
    assert np.array_equal(lm[0], v[faces[0, 0]])
    assert np.allclose(lm[1], v[faces[1]].mean(axis=0), atol=1e-15)
    assert np.array_equal(lm[2], v[faces[2, 2]])


def test_landmarks_follow_rigid_motion(test_head, rng) -> None:
    """Test affine invariance of barycentric interpolation."""
    q, t = _rigid(rng)
    v = test_head.base_vertices
    assert np.allclose(landmarks_3d(v @ q.T + t, test_head), landmarks_3d(v, test_head) @ q.T + t, atol=1e-12)


def test_bundled_head_layout(test_head) -> None:
    """Test the bundled model sizes and the 68-point landmark layout."""
    assert 500 <= test_head.n_vertices <= 2000
    assert test_head.n_landmarks == 68
    assert test_head.n_shape == 10 and test_head.n_expr == 6
    assert np.any(test_head.face_region) and not np.all(test_head.face_region)


# --- face_adjacency ---
def test_shared_edge_faces_are_adjacent() -> None:
    """Test two triangles sharing an edge at degree 1."""
    adj = face_adjacency(np.array([[0, 1, 2], [1, 3, 2]]), 1)
    assert adj.all()


def test_vertex_linked_chain_reach() -> None:
    """Test a three-face chain linked by single vertices at degrees 1 and 2."""
    faces = np.array([[0, 1, 2], [2, 3, 4], [4, 5, 6]])
    d1 = face_adjacency(faces, 1)
    d2 = face_adjacency(faces, 2)
    assert not d1[0, 2] and not d1[2, 0]
    assert d1[0, 1] and d1[1, 2]
    assert d2[0, 2] and d2[2, 0]


def test_degree_two_is_boolean_square(test_head) -> None:
    """Test that degree 2 equals the boolean square of degree 1, and that it is symmetric and monotone."""
    d1 = face_adjacency(test_head.faces, 1)
    d2 = face_adjacency(test_head.faces, 2)
    square = (d1.astype(np.int64) @ d1.astype(np.int64)) > 0
    assert np.array_equal(d2, square)
    assert np.array_equal(d2, d2.T)
    assert np.all(np.diag(d1))
    assert np.all(d2[d1])


def test_adjacency_degree_must_be_positive() -> None:
    with pytest.raises(InvalidInputError):
        face_adjacency(np.array([[0, 1, 2]]), 0)


# --- File I/O ---
def test_model_file_round_trip(tmp_path, test_head) -> None:
    """Test that the text model form reloads bit-exactly."""
    path = str(tmp_path / "model.txt")
    save_model(test_head, path)
    loaded = load_model(path)
    for name in ("base_vertices", "faces", "shape_basis", "expr_basis", "neck_weights", "neck_pivot",
                 "landmark_faces", "landmark_bary", "uv_coords", "face_region"):
        assert np.array_equal(getattr(loaded, name), getattr(test_head, name)), name


def test_model_file_rejects_wrong_header(tmp_path) -> None:
    """Test that a foreign file is reported as a checkpoint error."""
    path = tmp_path / "model.txt"
    path.write_text("something-else 1\n1 1 1 1 1\n0 0 0\n")
    with pytest.raises(CheckpointError):
        load_model(str(path))


def test_obj_export_uses_one_based_faces(tmp_path, rng) -> None:
    """Test the OBJ v/f records and reading them back."""
    model = make_patch_model(rng)
    path = str(tmp_path / "mesh.obj")
    export_obj(model.base_vertices, model.faces, path)
    lines = (tmp_path / "mesh.obj").read_text().splitlines()
    face_lines = [line.split() for line in lines if line.startswith("f ")]
    assert len(face_lines) == model.n_faces
    assert min(int(tok.split("/")[0]) for row in face_lines for tok in row[1:]) == 1
    vertices, faces = load_obj(path)
    assert np.allclose(vertices, model.base_vertices, atol=1e-6)
    assert np.array_equal(faces, model.faces)
