"""Forward and swing-only inverse kinematics on a skeleton tree.

Rotations are *global*: ``R_k`` turns the rest bone vector
``b_k = t_k - t_parent`` straight into the posed bone, so

    q_k = R_k b_k + q_parent                      (forward)
    p_k - p_parent = R_k b_k                     (what inverse solves)

are exact joint-by-joint inverses. The root carries a translation; its
rotation slot is kept for shape symmetry, checked for validity, and always
identity on inverse output. Positions are millimeters. Every function
accepts arbitrary leading batch axes (e.g. frames).
"""

from dataclasses import dataclass

import numpy as np

from .errors import BoneLengthMismatch, DegenerateBone, InvalidRotation, ShapeMismatch, ZeroVector

ORTHO_TOL = 1e-9
BONE_RTOL = 1e-6


@dataclass
class RotationSet:
    rotations: np.ndarray         # (..., N, 3, 3)
    root_translation: np.ndarray  # (..., 3)

    @classmethod
    def identity(cls, n, batch=()):
        rot = np.broadcast_to(np.eye(3), tuple(batch) + (n, 3, 3)).copy()
        return cls(rot, np.zeros(tuple(batch) + (3,)))


def rest_bones(topology, rest):
    """``(N, 3)`` rest bone vectors; the root row is zero."""
    rest = np.asarray(rest, dtype=np.float64)
    bones = np.zeros_like(rest)
    for k, p in topology.bones():
        bones[..., k, :] = rest[..., k, :] - rest[..., p, :]
    return bones


def check_rotations(R, tol=ORTHO_TOL):
    R = np.asarray(R, dtype=np.float64)
    gram = np.swapaxes(R, -1, -2) @ R - np.eye(3)
    ortho = np.sqrt((gram ** 2).sum(axis=(-2, -1)))
    det = np.linalg.det(R)
    bad = (ortho > tol) | (np.abs(det - 1.0) > tol)
    if np.any(bad):
        where = np.argwhere(bad)[0].tolist()
        raise InvalidRotation(
            f"rotation at index {where} is not proper orthogonal "
            f"(|R^T R - I| = {ortho[tuple(where)]:.3g}, det = {det[tuple(where)]:.12g})"
        )


def forward_kinematics(topology, rest, rot):
    rest = np.asarray(rest, dtype=np.float64)
    n = topology.joint_count
    if rest.shape != (n, 3) or rot.rotations.shape[-3:] != (n, 3, 3):
        raise ShapeMismatch(f"topology has {n} joints; rest {rest.shape}, rotations {rot.rotations.shape}")
    check_rotations(rot.rotations)
    bones = rest_bones(topology, rest)
    batch = rot.rotations.shape[:-3]
    q = np.empty(batch + (n, 3))
    q[..., topology.root, :] = rest[topology.root] + rot.root_translation
    for k in topology.topological_order():
        p = topology.parents[k]
        if p < 0:
            continue
        q[..., k, :] = np.einsum("...ij,j->...i", rot.rotations[..., k, :, :], bones[k]) + q[..., p, :]
    return q


def _unit(v):
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ZeroVector("cannot take the direction of a zero vector")
    return v / norm


def _skew(k):
    z = np.zeros(k.shape[:-1])
    return np.stack(
        [
            np.stack([z, -k[..., 2], k[..., 1]], axis=-1),
            np.stack([k[..., 2], z, -k[..., 0]], axis=-1),
            np.stack([-k[..., 1], k[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


def perpendicular_axis(u):
    """Unit axis ``u x e_m`` with ``m`` the smallest-magnitude component of ``u``."""
    u = np.asarray(u, dtype=np.float64)
    e = np.zeros_like(u)
    m = np.argmin(np.abs(u), axis=-1)
    np.put_along_axis(e, m[..., None], 1.0, axis=-1)
    return _unit(np.cross(u, e))


def rotation_between(u, v):
    """Minimal rotation taking direction ``u`` onto direction ``v``.

    Built as ``c I + [k]x + (1 - c)/s^2 k k^T`` with ``k = u x v``,
    ``s = |k|``, ``c = u . v`` (unit vectors), which stays accurate for
    angles close to 180 degrees. Exactly antiparallel input rotates by 180
    degrees about :func:`perpendicular_axis`.
    """
    uh = _unit(np.asarray(u, dtype=np.float64))
    vh = _unit(np.asarray(v, dtype=np.float64))
    k = np.cross(uh, vh)
    s2 = (k ** 2).sum(axis=-1)
    c = (uh * vh).sum(axis=-1)
    eye = np.broadcast_to(np.eye(3), uh.shape[:-1] + (3, 3))
    degenerate = s2 < 1e-30
    safe_s2 = np.where(degenerate, 1.0, s2)
    coef = np.where(degenerate, 0.0, (1.0 - c) / safe_s2)
    R = c[..., None, None] * eye + _skew(k) + coef[..., None, None] * (k[..., :, None] * k[..., None, :])
    flip = degenerate & (c < 0)
    parallel = degenerate & (c >= 0)
    if np.any(parallel):
        R = np.where(parallel[..., None, None], eye, R)
    if np.any(flip):
        a = perpendicular_axis(uh)
        half_turn = 2.0 * a[..., :, None] * a[..., None, :] - eye
        R = np.where(flip[..., None, None], half_turn, R)
    return R


def inverse_kinematics_swing(topology, rest, observed, rtol=BONE_RTOL):
    rest = np.asarray(rest, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    n = topology.joint_count
    if rest.shape != (n, 3) or observed.shape[-2:] != (n, 3):
        raise ShapeMismatch(f"topology has {n} joints; rest {rest.shape}, observed {observed.shape}")
    batch = observed.shape[:-2]
    rot = RotationSet.identity(n, batch)
    rot.root_translation = observed[..., topology.root, :] - rest[topology.root]
    bones = rest_bones(topology, rest)
    for k, p in topology.bones():
        b = bones[k]
        length = np.linalg.norm(b)
        if length == 0:
            raise DegenerateBone(f"rest bone of joint {k} has zero length")
        d = observed[..., k, :] - observed[..., p, :]
        rel = np.abs(np.linalg.norm(d, axis=-1) - length) / length
        if np.any(rel > rtol):
            raise BoneLengthMismatch(
                f"joint {k}: observed bone length differs from rest by relative {np.max(rel):.3g}"
            )
        rot.rotations[..., k, :, :] = rotation_between(np.broadcast_to(b, d.shape), d)
    return rot


def axis_angle_matrix(axis, angle):
    """Rodrigues rotation about unit ``axis`` by ``angle`` radians (batched)."""
    axis = _unit(np.asarray(axis, dtype=np.float64))
    angle = np.asarray(angle, dtype=np.float64)
    K = _skew(axis)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + np.sin(angle)[..., None, None] * K + (1.0 - np.cos(angle))[..., None, None] * (K @ K)


def random_swing_rotations(topology, rest, gen, max_angle=0.95 * np.pi, batch=()):
    """Random swing-only rotation sets: axis perpendicular to each rest bone."""
    n = topology.joint_count
    bones = rest_bones(topology, rest)
    rot = RotationSet.identity(n, batch)
    for k, _ in topology.bones():
        bhat = bones[k] / np.linalg.norm(bones[k])
        raw = gen.normal(size=tuple(batch) + (3,))
        raw -= (raw @ bhat)[..., None] * bhat
        angle = gen.uniform(0.0, max_angle, size=tuple(batch))
        rot.rotations[..., k, :, :] = axis_angle_matrix(raw, angle)
    rot.root_translation = gen.normal(scale=500.0, size=tuple(batch) + (3,))
    return rot
