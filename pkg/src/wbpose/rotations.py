"""Rotation representations and conversions.

Rotations flow through the networks as unconstrained 6D vectors (first two
rotation-matrix columns before orthonormalization), are materialized as
matrices via Gram-Schmidt, and are stored/compared as axis-angle vectors.
All conversions run on the autodiff tape; batched leading dimensions are
supported everywhere.

Conventions:
  * rot6d_to_matrix stacks the orthonormalized frame as matrix COLUMNS.
  * axis-angle magnitude is the rotation angle in radians, in [0, pi].
  * the sagittal mirror plane is x = 0 (M = diag(-1, 1, 1)).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import DegenerateInput, NotARotation

__all__ = [
    "rot6d_to_matrix", "matrix_to_rot6d", "axis_angle_to_matrix",
    "matrix_to_axis_angle", "mirror_rotation", "MIRROR",
]

MIRROR = np.diag([-1.0, 1.0, 1.0])

# Rodrigues switches to a second-order Taylor expansion below this angle.
_SMALL_ANGLE = 1e-8
# matrix_to_axis_angle switches to the diagonal extraction near angle pi.
_SIN_EPS = 1e-5


def _vecnorm(x):
    return ad.sqrt(ad.tsum(x * x, axis=-1, keepdims=True))


def _cross3(a, b):
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return ad.stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def rot6d_to_matrix(r6) -> Tensor:
    """Orthonormalize a (..., 6) 6D rotation into (..., 3, 3) matrices.

    Gram-Schmidt: b1 = a1/|a1|, b2 = normalize(a2 - (a2.b1) b1),
    b3 = b1 x b2, stacked as columns. Raises DegenerateInput when a1 is
    numerically zero or a2 is parallel to a1 (cross-product norm < 1e-12).
    """
    r6 = as_tensor(r6)
    if r6.shape[-1] != 6:
        raise DegenerateInput(f"6D rotation must have last dim 6, got {r6.shape}")
    d = r6.data
    a1d, a2d = d[..., :3], d[..., 3:]
    n1 = np.linalg.norm(a1d, axis=-1)
    ncross = np.linalg.norm(np.cross(a1d, a2d), axis=-1)
    if np.any(n1 < 1e-12) or np.any(ncross < 1e-12):
        raise DegenerateInput("collapsed 6D rotation: |a1| or |a1 x a2| below 1e-12")

    a1, a2 = r6[..., :3], r6[..., 3:]
    b1 = a1 / _vecnorm(a1)
    proj = ad.tsum(a2 * b1, axis=-1, keepdims=True)
    u = a2 - proj * b1
    b2 = u / _vecnorm(u)
    b3 = _cross3(b1, b2)
    return ad.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(m) -> Tensor:
    """First two matrix columns flattened to (..., 6)."""
    m = as_tensor(m)
    return ad.concat([m[..., :, 0], m[..., :, 1]], axis=-1)


def _skew(v):
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = x * 0.0
    rows = ad.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=-1)
    return ad.reshape(rows, v.shape[:-1] + (3, 3))


def axis_angle_to_matrix(v) -> Tensor:
    """Rodrigues' formula for (..., 3) axis-angle vectors, total on R^3.

    R = I + A [v]x + B [v]x^2 with A = sin(t)/t and B = (1 - cos t)/t^2;
    both coefficients switch to their Taylor expansions below the
    small-angle threshold, so the zero rotation is exact and smooth.
    """
    v = as_tensor(v)
    if v.shape[-1] != 3:
        raise DegenerateInput(f"axis-angle must have last dim 3, got {v.shape}")
    t2 = ad.tsum(v * v, axis=-1)
    small = t2.data < _SMALL_ANGLE ** 2
    t2_safe = ad.where(small, np.ones_like(t2.data), t2)
    theta = ad.sqrt(t2_safe)
    a = ad.where(small, 1.0 - t2 / 6.0, ad.sin(theta) / theta)
    b = ad.where(small, 0.5 - t2 / 24.0, (1.0 - ad.cos(theta)) / t2_safe)
    k = _skew(v)
    k2 = ad.matmul(k, k)
    shape_e = t2.shape + (1, 1)
    eye = np.broadcast_to(np.eye(3), v.shape[:-1] + (3, 3))
    return eye + ad.reshape(a, shape_e) * k + ad.reshape(b, shape_e) * k2


def matrix_to_axis_angle(m) -> Tensor:
    """Invert Rodrigues: (..., 3, 3) rotation matrices to (..., 3) vectors.

    The skew part recovers sin(t) * axis; near t = pi that vanishes, so the
    axis is re-extracted from the diagonal with signs from the symmetric
    off-diagonals, the overall sign chosen so the largest-magnitude axis
    component is positive. Output magnitude lies in [0, pi].

    Raises NotARotation if m'm deviates from identity by more than 1e-6
    or det(m) is not positive.
    """
    m = as_tensor(m)
    if m.shape[-2:] != (3, 3):
        raise NotARotation(f"rotation matrix must be (..., 3, 3), got {m.shape}")
    md = m.data
    gram = np.swapaxes(md, -1, -2) @ md
    err = np.abs(gram - np.eye(3)).max()
    if err > 1e-6 or np.any(np.linalg.det(md) <= 0.0):
        raise NotARotation(f"matrix fails orthonormality check (deviation {err:.3e})")

    w = ad.stack([m[..., 2, 1] - m[..., 1, 2],
                  m[..., 0, 2] - m[..., 2, 0],
                  m[..., 1, 0] - m[..., 0, 1]], axis=-1) * 0.5
    c = (m[..., 0, 0] + m[..., 1, 1] + m[..., 2, 2] - 1.0) * 0.5
    s2 = ad.tsum(w * w, axis=-1)
    sd = np.sqrt(s2.data)

    small = sd < _SIN_EPS
    near_pi = small & (c.data < 0.0)
    near_zero = small & (c.data >= 0.0)

    # regular branch: v = w * t / sin(t); Taylor of t/sin(t) near zero
    s2_safe = ad.where(small, np.ones_like(s2.data), s2)
    s = ad.sqrt(s2_safe)
    theta = ad.atan2(s, c)
    factor = ad.where(near_zero, 1.0 + s2 / 6.0 + s2 * s2 * (3.0 / 40.0), theta / s)
    v_main = w * ad.reshape(factor, factor.shape + (1,))

    # near-pi branch: axis from the diagonal, angle still from atan2;
    # 1 - c > 1 whenever this branch is live, so the guard only silences
    # the dead branch near identity
    one_minus_c = ad.where(near_pi, 1.0 - c, np.ones_like(c.data))
    diag = ad.stack([m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]], axis=-1)
    q2 = (diag - ad.reshape(c, c.shape + (1,))) / ad.reshape(one_minus_c, c.shape + (1,))
    q = ad.sqrt(ad.relu(q2) + 1e-30)
    sym = md + np.swapaxes(md, -1, -2)
    kstar = np.argmax(q.data, axis=-1)
    row_idx = np.broadcast_to(kstar[..., None, None], kstar.shape + (1, 3))
    anchor_rows = np.take_along_axis(sym, row_idx, axis=-2)[..., 0, :]
    signs = np.where(anchor_rows >= 0.0, 1.0, -1.0)
    np.put_along_axis(signs, kstar[..., None], 1.0, axis=-1)
    # below pi the skew part still fixes the global sign; at exactly pi it
    # vanishes and the positive-anchor convention stands
    wq = np.sum(w.data * q.data * signs, axis=-1, keepdims=True)
    signs = np.where(wq < -1e-12, -signs, signs)
    theta_pi = ad.atan2(ad.sqrt(s2 + 1e-30), c)
    v_pi = q * signs * ad.reshape(theta_pi, theta_pi.shape + (1,))

    return ad.where(near_pi[..., None], v_pi, v_main)


def mirror_rotation(v) -> Tensor:
    """Sagittal mirror of an axis-angle vector: (x, y, z) -> (x, -y, -z).

    Satisfies M R(v) M = R(mirror_rotation(v)) for M = diag(-1, 1, 1).
    """
    v = as_tensor(v)
    return v * np.array([1.0, -1.0, -1.0])
