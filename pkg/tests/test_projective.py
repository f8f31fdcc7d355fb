import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bagrad.lie import Pose, se3_exp
from bagrad.projective import (CheiralityError, Intrinsics, InvalidDepth, proj_jacobians, project,
                               reproject, unproject)

K = Intrinsics(120.0, 110.0, 80.0, 60.0)
pix = arrays(float, 2, elements=st.floats(5.0, 150.0))
depth = st.floats(0.5, 20.0)
motion = arrays(float, 6, elements=st.floats(-0.1, 0.1))


@given(pix, depth)
def test_identity_reprojection(p, d):
    assert np.allclose(reproject(p, d, Pose.identity(), Pose.identity(), K), p, atol=1e-9)


@given(pix, depth)
def test_unproject_project_roundtrip(p, d):
    X = unproject(p, d, K)
    assert abs(X[2] - d) < 1e-12
    assert np.allclose(project(Pose.identity(), X, K), p, atol=1e-9)


def test_invalid_depth_and_cheirality():
    with pytest.raises(InvalidDepth):
        unproject(np.array([1.0, 2.0]), 0.0, K)
    with pytest.raises(CheiralityError):
        project(Pose.identity(), np.array([0.0, 0.0, -1.0]), K)


def _fd(fn, x, h=1e-6):
    cols = []
    for k in range(len(x)):
        e = np.zeros(len(x))
        e[k] = h
        cols.append((fn(x + e) - fn(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


@given(pix, depth, motion, motion)
def test_jacobians_match_fd(p, d, a, b):
    Ti, Tj = se3_exp(a), se3_exp(b)
    J = proj_jacobians(p, d, Ti, Tj, K)
    fd_t = _fd(lambda x: reproject(p, d, Ti, se3_exp(x) @ Tj, K), np.zeros(6))
    fd_s = _fd(lambda x: reproject(p, d, se3_exp(x) @ Ti, Tj, K), np.zeros(6))
    fd_d = _fd(lambda x: reproject(p, x[0], Ti, Tj, K), np.array([d]))
    scale = 1 + np.abs(fd_t).max()
    assert np.allclose(J.j_pose, fd_t, atol=1e-5 * scale)
    assert np.allclose(J.j_pose_src, fd_s, atol=1e-5 * scale)
    assert np.allclose(J.j_depth, fd_d, atol=1e-5 * (1 + np.abs(fd_d).max()))


def test_frozen_jacobian_values():
    # pure forward translation of the target camera by 1 with the point at depth 2 on the axis
    J = proj_jacobians(np.array([80.0, 60.0]), 2.0, Pose.identity(), Pose.identity(), K)
    assert np.allclose(J.j_pose[:, :3], [[60.0, 0, 0], [0, 55.0, 0]])
    assert np.allclose(J.j_depth, 0.0)
