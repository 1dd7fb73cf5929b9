"""Poincare-ball geometry with curvature parameter ``c``.

The ball is ``{x : c * |x|^2 < 1}``. All functions accept a single vector of
shape ``(d,)`` or a stack of vectors with shape ``(..., d)`` and operate on the
last axis. Everything here is a pure function of its arguments.

Distances use the inverse hyperbolic tangent form

    d_c(x, y) = 2 / sqrt(c) * artanh(sqrt(c) * |(-x) (+)_c y|)

which tends to ``2 |x - y|`` as ``c -> 0``. (Some write-ups of this formula
print ``arctan`` in place of ``artanh``; that variant is bounded and does not
agree with the arccosh closed form, so it is not used.)
"""

from __future__ import annotations

import numpy as np

BALL_EPS = 1e-5
ARTANH_CLAMP = 1.0 - 1e-7
# below this distance the gradient direction is undefined
SINGULAR_TOL = 1e-12


class GeometryError(ValueError):
    """A point lies on or outside the ball, or inputs are malformed."""


class SingularGradientError(GeometryError):
    """Distance gradient requested at (numerically) coincident points."""


def _check_curvature(c: float) -> float:
    c = float(c)
    if not np.isfinite(c) or c < 0:
        raise GeometryError(f"curvature must be finite and >= 0, got {c}")
    return c


def _as_vectors(*arrays):
    out = [np.asarray(a, dtype=np.float64) for a in arrays]
    dims = {a.shape[-1] if a.ndim else None for a in out}
    if None in dims:
        raise GeometryError("inputs must have at least one axis")
    if len(dims) > 1:
        raise GeometryError(f"dimension mismatch: {sorted(dims)}")
    for a in out:
        if not np.all(np.isfinite(a)):
            raise GeometryError("non-finite input")
    return out


def _sqnorm(x: np.ndarray) -> np.ndarray:
    return np.sum(x * x, axis=-1)


def _check_in_ball(x: np.ndarray, c: float, name: str) -> None:
    if c > 0 and np.any(c * _sqnorm(x) >= 1.0):
        raise GeometryError(f"{name} lies on or outside the ball for c={c}")


def max_norm(c: float, eps: float = BALL_EPS) -> float:
    """Radius that ``ball_project`` clips to."""
    return (1.0 - eps) / np.sqrt(c)


def ball_project(x, c: float, eps: float = BALL_EPS) -> np.ndarray:
    """Rescale points whose norm exceeds ``(1 - eps) / sqrt(c)`` back onto that radius.

    Points already inside are returned unchanged. ``c == 0`` has no ball and is a
    no-op.
    """
    (x,) = _as_vectors(x)
    c = _check_curvature(c)
    if c == 0:
        return x.copy()
    if not 0 < eps < 1:
        raise GeometryError(f"eps must be in (0, 1), got {eps}")
    limit = max_norm(c, eps)
    norm = np.sqrt(_sqnorm(x))[..., None]
    scale = np.where(norm > limit, limit / np.maximum(norm, 1e-300), 1.0)
    return x * scale


def mobius_add(x, y, c: float, project: bool = True) -> np.ndarray:
    """Mobius (gyrovector) addition ``x (+)_c y``.

    ``project`` applies :func:`ball_project` to the result; the raw sum is
    already inside the ball in exact arithmetic but can round onto the boundary.
    """
    x, y = _as_vectors(x, y)
    c = _check_curvature(c)
    _check_in_ball(x, c, "x")
    _check_in_ball(y, c, "y")
    out = _mobius_add_raw(x, y, c)
    if project and c > 0:
        out = ball_project(out, c)
    return out


def _mobius_add_raw(x: np.ndarray, y: np.ndarray, c: float) -> np.ndarray:
    xy = np.sum(x * y, axis=-1, keepdims=True)
    x2 = np.sum(x * x, axis=-1, keepdims=True)
    y2 = np.sum(y * y, axis=-1, keepdims=True)
    num = (1 + 2 * c * xy + c * y2) * x + (1 - c * x2) * y
    den = 1 + 2 * c * xy + c * c * x2 * y2
    return num / den


def _mobius_diff_sqnorm(x2, y2, dist2, c):
    """|(-x) (+) y|^2 from squared norms and |x - y|^2.

    Equal to the Mobius route analytically, but symmetric in x and y bit for
    bit and exactly zero when x == y.
    """
    return dist2 / ((1 - c * x2) * (1 - c * y2) + c * dist2)


def _exp_scale(r: np.ndarray, c: float) -> np.ndarray:
    """tanh(sqrt(c) r) / (sqrt(c) r), continuous at r = 0."""
    sc = np.sqrt(c)
    u = sc * r
    small = u < 1e-6
    safe = np.where(small, 1.0, u)
    return np.where(small, 1.0 - u * u / 3.0, np.tanh(safe) / safe)


def exp_map_zero(v, c: float, project: bool = True) -> np.ndarray:
    """Exponential map at the origin, ``tanh(sqrt(c)|v|) v / (sqrt(c)|v|)``.

    The conformal factor at the origin is 2, which cancels the 1/2 inside the
    general base-point formula. ``c == 0`` is the identity.
    """
    (v,) = _as_vectors(v)
    c = _check_curvature(c)
    if c == 0:
        return v.copy()
    r = np.sqrt(_sqnorm(v))[..., None]
    out = _exp_scale(r, c) * v
    if project:
        out = ball_project(out, c)
    return out


def hyperbolic_distance(x, y, c: float) -> np.ndarray | float:
    """Geodesic distance on the ball; returns ``2|x - y|`` for ``c == 0``."""
    x, y = _as_vectors(x, y)
    c = _check_curvature(c)
    if c == 0:
        return _scalar(2.0 * np.sqrt(_sqnorm(x - y)))
    _check_in_ball(x, c, "x")
    _check_in_ball(y, c, "y")
    arg = np.sqrt(c * _mobius_diff_sqnorm(_sqnorm(x), _sqnorm(y), _sqnorm(x - y), c))
    if np.any(~np.isfinite(arg)):
        raise GeometryError("non-finite distance argument")
    arg = np.minimum(arg, ARTANH_CLAMP)
    return _scalar(2.0 / np.sqrt(c) * np.arctanh(arg))


def distance_oracle_arccosh(x, y, c: float) -> np.ndarray | float:
    """Closed-form arccosh distance, kept independent of the Mobius route."""
    x, y = _as_vectors(x, y)
    c = _check_curvature(c)
    if c == 0:
        raise GeometryError("arccosh form needs c > 0")
    _check_in_ball(x, c, "x")
    _check_in_ball(y, c, "y")
    delta = 2 * c * _sqnorm(x - y) / ((1 - c * _sqnorm(x)) * (1 - c * _sqnorm(y)))
    # arccosh(1 + t) = log1p(t + sqrt(t (t + 2))), exact near t = 0
    return _scalar(np.log1p(delta + np.sqrt(delta * (delta + 2))) / np.sqrt(c))


def cosine_distance(x, y) -> np.ndarray | float:
    """``2 - 2 cos(x, y)``, in [0, 4]."""
    x, y = _as_vectors(x, y)
    nx = np.sqrt(_sqnorm(x))
    ny = np.sqrt(_sqnorm(y))
    if np.any(nx == 0) or np.any(ny == 0):
        raise GeometryError("cosine distance of a zero vector")
    cos = np.sum(x * y, axis=-1) / (nx * ny)
    return _scalar(2.0 - 2.0 * np.clip(cos, -1.0, 1.0))


def hyperbolic_distance_grad(x, y, c: float, on_singular: str = "raise"):
    """Gradients ``(dd/dx, dd/dy)`` of :func:`hyperbolic_distance`.

    Uses the derivative of the arccosh closed form, which coincides with the
    Mobius form wherever both are smooth. At coincident points the gradient is
    undefined: ``on_singular="raise"`` raises :class:`SingularGradientError`,
    ``"zero"`` returns zero vectors (a valid subgradient of the norm).
    """
    x, y = _as_vectors(x, y)
    c = _check_curvature(c)
    if c == 0:
        diff = x - y
        n = np.sqrt(_sqnorm(diff))[..., None]
        if np.any(n < SINGULAR_TOL) and on_singular == "raise":
            raise SingularGradientError("coincident points")
        g = np.where(n < SINGULAR_TOL, 0.0, 2.0 * diff / np.maximum(n, SINGULAR_TOL))
        return g, -g
    _check_in_ball(x, c, "x")
    _check_in_ball(y, c, "y")
    gx, gy, singular = _distance_grad_raw(x, y, c)
    if np.any(singular) and on_singular == "raise":
        raise SingularGradientError("distance gradient is undefined at coincident points")
    return gx, gy


def _distance_grad_raw(x, y, c):
    diff = x - y
    d2 = np.sum(diff * diff, axis=-1, keepdims=True)
    a = 1 - c * np.sum(x * x, axis=-1, keepdims=True)
    b = 1 - c * np.sum(y * y, axis=-1, keepdims=True)
    delta = 2 * c * d2 / (a * b)
    root = np.sqrt(delta * (delta + 2))
    singular = root[..., 0] < SINGULAR_TOL
    # dd/d(delta) = 1 / (sqrt(c) * sqrt(delta (delta + 2)))
    outer = np.where(root < SINGULAR_TOL, 0.0, 1.0 / (np.sqrt(c) * np.maximum(root, SINGULAR_TOL)))
    k = 4 * c / (a * b)
    gx = outer * k * (diff + c * d2 * x / a)
    gy = outer * k * (-diff + c * d2 * y / b)
    return gx, gy, singular


def _scalar(v: np.ndarray):
    return float(v) if np.ndim(v) == 0 else v


# --- batched forms and vector-Jacobian products used by the training objective ---


def pairwise_distance(X: np.ndarray, Y: np.ndarray, c: float) -> np.ndarray:
    """Distance matrix ``D[i, j] = d_c(X[i], Y[j])`` for X (n, d), Y (k, d)."""
    X, Y = _as_vectors(X, Y)
    _check_in_ball(X, c, "X")
    _check_in_ball(Y, c, "Y")
    x2 = _sqnorm(X)[:, None]
    y2 = _sqnorm(Y)[None, :]
    dist2 = np.maximum(x2 + y2 - 2 * (X @ Y.T), 0.0)
    arg = np.sqrt(c * _mobius_diff_sqnorm(x2, y2, dist2, c))
    arg = np.minimum(arg, ARTANH_CLAMP)
    return 2.0 / np.sqrt(c) * np.arctanh(arg)


def pairwise_distance_vjp(X, Y, c: float, dD: np.ndarray):
    """Pull ``dD`` (n, k) back through :func:`pairwise_distance`.

    Returns ``(dX, dY, n_singular)``; coincident pairs contribute zero.
    """
    diff = X[:, None, :] - Y[None, :, :]
    d2 = np.sum(diff * diff, axis=-1)
    a = (1 - c * _sqnorm(X))[:, None]
    b = (1 - c * _sqnorm(Y))[None, :]
    delta = 2 * c * d2 / (a * b)
    root = np.sqrt(delta * (delta + 2))
    singular = root < SINGULAR_TOL
    outer = np.where(singular, 0.0, 1.0 / (np.sqrt(c) * np.maximum(root, SINGULAR_TOL)))
    w = dD * outer * 4 * c / (a * b)  # (n, k)
    # gx_ij = w_ij (diff_ij + c d2_ij x_i / a_i)
    dX = np.einsum("ij,ijd->id", w, diff) + (c * np.sum(w * d2 / a, axis=1))[:, None] * X
    dY = -np.einsum("ij,ijd->jd", w, diff) + (c * np.sum(w * d2 / b, axis=0))[:, None] * Y
    return dX, dY, int(np.count_nonzero(singular & (dD != 0)))


def exp_map_zero_vjp(v: np.ndarray, c: float, dy: np.ndarray) -> np.ndarray:
    """Pull ``dy`` back through the (unprojected) exponential map at 0."""
    sc = np.sqrt(c)
    r = np.sqrt(_sqnorm(v))[..., None]
    g = _exp_scale(r, c)
    u = sc * r
    small = u < 1e-4
    safe_r = np.where(small, 1.0, r)
    safe_u = np.where(small, 1.0, u)
    # g'(r) / r, with series -2c/3 + 8 c^2 r^2 / 15 near zero
    sech2 = 1.0 - np.tanh(safe_u) ** 2
    gp_over_r = np.where(
        small,
        -2.0 * c / 3.0 + 8.0 * c * c * r * r / 15.0,
        (sech2 / safe_r - np.tanh(safe_u) / (sc * safe_r * safe_r)) / safe_r,
    )
    vdy = np.sum(v * dy, axis=-1, keepdims=True)
    return g * dy + gp_over_r * vdy * v


def ball_project_vjp(x: np.ndarray, c: float, dy: np.ndarray, eps: float = BALL_EPS) -> np.ndarray:
    """Pull ``dy`` back through :func:`ball_project`."""
    limit = max_norm(c, eps)
    norm = np.sqrt(_sqnorm(x))[..., None]
    active = norm > limit
    safe = np.where(active, norm, 1.0)
    unit = x / safe
    proj = limit / safe * (dy - unit * np.sum(unit * dy, axis=-1, keepdims=True))
    return np.where(active, proj, dy)
