"""Sine-activated distance-field network in float64.

The network is h_l = sin(omega0 * (W_l h_{l-1} + b_l)) for L hidden layers with
a linear scalar output. Everything is computed explicitly: the value, the
spatial gradient via forward Jacobian propagation (cosine chain rule, no
finite differences), and parameter gradients of the training loss by a reverse
sweep over the combined value+Jacobian graph. The eikonal term differentiates
through the spatial-gradient computation, so its parameter gradient is a mixed
second derivative; the reverse sweep below carries the extra adjoints this
requires.

Matrix products go through BLAS; the elementwise stages are numba kernels,
including a fused sin/cos (Cody-Waite reduction + minimax polynomials,
~4e-13 absolute error) because plain float64 libm trig is the single hottest
operation in training, an order of magnitude slower than this path. A
LossWorkspace carries every large intermediate so the training loop never
reallocates between iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

EIKONAL_NORM_GUARD = 1e-12  # inside sqrt, keeps the eikonal gradient finite at ||g|| = 0


class NumericError(RuntimeError):
    """A layer produced non-finite activations."""

    def __init__(self, layer: int):
        super().__init__(f"non-finite values in layer {layer}")
        self.layer = layer


# ---------------------------------------------------------------------------
# fused elementwise kernels

_INV_PI2 = 0.6366197723675814
_PI2_HI = 1.5707963267948966
_PI2_LO = 6.123233995736766e-17


@njit(cache=True, fastmath=True)
def _sincos_pair(x):
    """(sin x, cos x) by quadrant reduction; accurate to ~4e-13 for |x| < 1e6."""
    k = np.rint(x * _INV_PI2)
    r = (x - k * _PI2_HI) - k * _PI2_LO
    r2 = r * r
    s = r * (1.0 + r2 * (-1.0 / 6.0 + r2 * (1.0 / 120.0 + r2 * (-1.0 / 5040.0
        + r2 * (1.0 / 362880.0 + r2 * (-1.0 / 39916800.0 + r2 * (1.0 / 6227020800.0)))))))
    c = 1.0 + r2 * (-0.5 + r2 * (1.0 / 24.0 + r2 * (-1.0 / 720.0
        + r2 * (1.0 / 40320.0 + r2 * (-1.0 / 3628800.0 + r2 * (1.0 / 479001600.0))))))
    q = np.int64(k) & 3
    swap = np.float64(q & 1)
    sin_val = s * (1.0 - swap) + c * swap
    cos_val = c * (1.0 - swap) + s * swap
    sin_sign = 1.0 - 2.0 * np.float64((q >> 1) & 1)
    cos_sign = 1.0 - 2.0 * np.float64(((q + 1) >> 1) & 1)
    return sin_sign * sin_val, cos_sign * cos_val


@njit(cache=True, fastmath=True)
def _activations(z, bias, w0, n_s, h_out, d_out, dqt_out):
    """h = sin(w0 (z + bias)), d = w0 cos(w0 (z + bias)), elementwise.

    Also writes the query rows of d transposed into dqt_out (n, B - n_s);
    the Jacobian kernels below read the derivative row-major in that layout.
    """
    b, n = z.shape
    for i in range(b):
        for j in range(n):
            s, c = _sincos_pair(w0 * (z[i, j] + bias[j]))
            h_out[i, j] = s
            d = w0 * c
            d_out[i, j] = d
            if i >= n_s:
                dqt_out[j, i - n_s] = d


@njit(cache=True, fastmath=True)
def _scale_rows(dqt, a, out):
    """out[i, b, :] = dqt[i, b] * a[i, b, :]."""
    n, bq, _ = a.shape
    for i in range(n):
        for b in range(bq):
            s = dqt[i, b]
            out[i, b, 0] = s * a[i, b, 0]
            out[i, b, 1] = s * a[i, b, 1]
            out[i, b, 2] = s * a[i, b, 2]


@njit(cache=True, fastmath=True)
def _scale_rows_first(dqt, w, out):
    """First-layer Jacobian: out[i, b, :] = dqt[i, b] * w[i, :]."""
    n, bq = dqt.shape
    for i in range(n):
        w0_, w1_, w2_ = w[i, 0], w[i, 1], w[i, 2]
        for b in range(bq):
            s = dqt[i, b]
            out[i, b, 0] = s * w0_
            out[i, b, 1] = s * w1_
            out[i, b, 2] = s * w2_


@njit(cache=True, fastmath=True)
def _backward_jac(jbar, a, dqt, abar_out, dbart_out):
    """Fused Jacobian-path adjoints for one hidden layer.

    dbart[i, b] = sum_j jbar[i, b, j] * a[i, b, j]   (adjoint of the derivative)
    abar[i, b, :] = dqt[i, b] * jbar[i, b, :]        (adjoint of W @ jac_prev)
    """
    n, bq, _ = jbar.shape
    for i in range(n):
        for b in range(bq):
            j0, j1, j2 = jbar[i, b, 0], jbar[i, b, 1], jbar[i, b, 2]
            dbart_out[i, b] = j0 * a[i, b, 0] + j1 * a[i, b, 1] + j2 * a[i, b, 2]
            s = dqt[i, b]
            abar_out[i, b, 0] = s * j0
            abar_out[i, b, 1] = s * j1
            abar_out[i, b, 2] = s * j2


@njit(cache=True, fastmath=True)
def _backward_jac_first(jbar, w, dqt, abar_out, dbart_out, wgrad_out):
    """Fused first-layer Jacobian adjoints; also accumulates the W_1 gradient
    contribution sum_b abar[:, b, :] since jac_prev is the identity there."""
    n, bq, _ = jbar.shape
    for i in range(n):
        w0_, w1_, w2_ = w[i, 0], w[i, 1], w[i, 2]
        s0 = s1 = s2 = 0.0
        for b in range(bq):
            j0, j1, j2 = jbar[i, b, 0], jbar[i, b, 1], jbar[i, b, 2]
            dbart_out[i, b] = j0 * w0_ + j1 * w1_ + j2 * w2_
            s = dqt[i, b]
            a0 = s * j0
            a1 = s * j1
            a2 = s * j2
            abar_out[i, b, 0] = a0
            abar_out[i, b, 1] = a1
            abar_out[i, b, 2] = a2
            s0 += a0
            s1 += a1
            s2 += a2
        wgrad_out[i, 0] += s0
        wgrad_out[i, 1] += s1
        wgrad_out[i, 2] += s2


@njit(cache=True, fastmath=True)
def _zbar_combine(hbar, deriv, dbart, h_next, w0, n_s, out):
    """zbar = hbar * deriv, plus the Jacobian-path term on the query rows.

    The second term is dbar * d(deriv)/dz with d(w0 cos(w0 z))/dz =
    -w0^2 sin(w0 z) = -w0^2 h. dbart is transposed (n, B - n_s).
    """
    b, n = hbar.shape
    w2 = w0 * w0
    for i in range(b):
        if i < n_s:
            for j in range(n):
                out[i, j] = hbar[i, j] * deriv[i, j]
        else:
            for j in range(n):
                out[i, j] = hbar[i, j] * deriv[i, j] - dbart[j, i - n_s] * w2 * h_next[i, j]


@njit(cache=True, fastmath=True)
def _jbar_seed(w_out, gbar, out):
    """out[i, b, :] = w_out[i] * gbar[b, :]."""
    n = w_out.shape[0]
    bq = gbar.shape[0]
    for i in range(n):
        wv = w_out[i]
        for b in range(bq):
            out[i, b, 0] = wv * gbar[b, 0]
            out[i, b, 1] = wv * gbar[b, 1]
            out[i, b, 2] = wv * gbar[b, 2]


# ---------------------------------------------------------------------------
# model

@dataclass
class FieldEvaluation:
    value: float
    gradient: np.ndarray


@dataclass
class FieldModel:
    """Weights/biases of the sine MLP; weights[l] is (fan_out, fan_in).

    The last entry is the linear output layer (1, width); all layers before it
    are sine layers scaled by omega0.
    """

    weights: list
    biases: list
    omega0: float

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) < 2:
            raise ValueError("model needs at least one hidden and one output layer")
        if self.omega0 <= 0:
            raise ValueError("omega0 must be positive")
        fan_in = 3
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[1] != fan_in or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i} dimensions do not chain: {w.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")
            fan_in = w.shape[0]
        if self.weights[-1].shape[0] != 1:
            raise ValueError("output layer must produce a scalar")

    @property
    def depth(self) -> int:
        """Number of hidden sine layers."""
        return len(self.weights) - 1

    @property
    def width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "FieldModel":
        return FieldModel([w.copy() for w in self.weights],
                          [b.copy() for b in self.biases], self.omega0)

    def pack(self) -> np.ndarray:
        """Flatten all parameters (weights then bias per layer, row-major)."""
        return np.concatenate([np.concatenate([w.ravel(), b])
                               for w, b in zip(self.weights, self.biases)])

    def unpack(self, flat: np.ndarray) -> None:
        """Overwrite parameters in place from a pack()-ordered vector."""
        k = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = flat[k:k + w.size].reshape(w.shape)
            k += w.size
            b[...] = flat[k:k + b.size]
            k += b.size
        if k != len(flat):
            raise ValueError("parameter vector length mismatch")

    def evaluate(self, x) -> FieldEvaluation:
        return evaluate(self, x)

    def evaluate_batch(self, xs):
        return evaluate_batch(self, xs)


@dataclass
class LossTerms:
    """Loss components; total is fit + alpha_surf * surf + alpha_eik * eik."""

    fit: float
    surf: float
    eik: float
    total: float


@dataclass
class FieldGradients:
    """Parameter gradients shaped like the model."""

    weights: list
    biases: list

    def pack(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b])
                               for w, b in zip(self.weights, self.biases)])


def init_model(width: int = 256, depth: int = 3, omega0: float = 25.0,
               seed: int = 0) -> FieldModel:
    """Fresh network: first layer U(-1/3, 1/3), deeper layers U(+-sqrt(6/n)/omega0).

    depth counts hidden sine layers; the linear output layer uses the same
    bound as the hidden layers. Biases start at zero. Deterministic per seed.
    """
    if width < 1 or depth < 1:
        raise ValueError("width and depth must be >= 1")
    rng = np.random.default_rng(seed)
    weights = [rng.uniform(-1.0 / 3.0, 1.0 / 3.0, size=(width, 3))]
    hidden_bound = np.sqrt(6.0 / width) / omega0
    for _ in range(depth - 1):
        weights.append(rng.uniform(-hidden_bound, hidden_bound, size=(width, width)))
    weights.append(rng.uniform(-hidden_bound, hidden_bound, size=(1, width)))
    biases = [np.zeros(w.shape[0]) for w in weights]
    return FieldModel(weights, biases, float(omega0))


def evaluate(model: FieldModel, x) -> FieldEvaluation:
    """Value and exact spatial gradient at one point.

    The gradient is propagated analytically layer by layer: each sine layer
    multiplies the running Jacobian by diag(omega0 cos(omega0 z)) W.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (3,) or not np.all(np.isfinite(x)):
        raise ValueError("x must be a finite 3-vector")
    values, grads = evaluate_batch(model, x[None, :])
    return FieldEvaluation(float(values[0]), grads[0])


def evaluate_batch(model: FieldModel, xs: np.ndarray):
    """Values (B,) and gradients (B, 3) for a batch of points."""
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != 3:
        raise ValueError("xs must be (B, 3)")
    if not np.all(np.isfinite(xs)):
        raise ValueError("xs contains non-finite points")
    n_batch = len(xs)
    w0 = model.omega0
    h = xs
    jac = None
    for i in range(model.depth):
        w = model.weights[i]
        z = h @ w.T
        h = np.empty_like(z)
        deriv = np.empty_like(z)
        deriv_t = np.empty((w.shape[0], n_batch))
        _activations(z, model.biases[i], w0, 0, h, deriv, deriv_t)
        if not np.all(np.isfinite(h)):
            raise NumericError(i)
        out = np.empty((w.shape[0], n_batch, 3))
        if i == 0:
            _scale_rows_first(deriv_t, w, out)
        else:
            lifted = (w @ jac.reshape(w.shape[1], -1)).reshape(w.shape[0], n_batch, 3)
            _scale_rows(deriv_t, lifted, out)
        jac = out
    w_out = model.weights[-1][0]
    values = h @ w_out + model.biases[-1][0]
    grads = (w_out @ jac.reshape(model.width, -1)).reshape(n_batch, 3)
    if not (np.all(np.isfinite(values)) and np.all(np.isfinite(grads))):
        raise NumericError(model.depth)
    return values, grads


class LossWorkspace:
    """Preallocated intermediates for loss_and_param_grads at fixed batch shape.

    The training loop calls the loss thousands of times with identical shapes;
    reusing these buffers avoids tens of MB of allocation per iteration.
    """

    def __init__(self, width: int, depth: int, n_surface: int, n_query: int):
        self.shape_key = (width, depth, n_surface, n_query)
        n_total = n_surface + n_query
        self.pts = np.empty((n_total, 3))
        self.hs = [self.pts] + [np.empty((n_total, width)) for _ in range(depth)]
        self.ds = [np.empty((n_total, width)) for _ in range(depth)]
        self.dst = [np.empty((width, n_query)) for _ in range(depth)]
        self.z = np.empty((n_total, width))
        self.jacs = [np.empty((width, n_query, 3)) for _ in range(depth)]
        self.lifted = [None] + [np.empty((width, n_query, 3)) for _ in range(depth - 1)]
        self.jbar = np.empty((width, n_query, 3))
        self.abar = np.empty((width, n_query, 3))
        self.ybar = np.empty(n_total)
        self.gbar = np.empty((n_query, 3))
        self.hbar = np.empty((n_total, width))
        self.zbar = np.empty((n_total, width))
        self.dbart = np.empty((width, n_query))
        self.wg = np.empty((width, width))


def loss_and_param_grads(model: FieldModel, surface_points: np.ndarray,
                         query_points: np.ndarray, query_distances: np.ndarray,
                         alpha_surf: float, alpha_eik: float,
                         workspace: LossWorkspace | None = None):
    """Training loss and its exact parameter gradient.

    fit  = mean over queries of (f(q) - d(q))^2
    surf = mean over surface points of |f(p)|
    eik  = mean over queries of (||grad f(q)||_eps - 1)^2

    with ||.||_eps = sqrt(||.||^2 + 1e-12). Returns (LossTerms, FieldGradients)
    for total = fit + alpha_surf * surf + alpha_eik * eik. The eikonal path
    backpropagates through the Jacobian propagation itself.
    """
    surf_pts = np.asarray(surface_points, dtype=np.float64)
    qry_pts = np.asarray(query_points, dtype=np.float64)
    d_true = np.asarray(query_distances, dtype=np.float64)
    if len(surf_pts) == 0 or len(qry_pts) == 0:
        raise ValueError("surface and query batches must be nonempty")
    if d_true.shape != (len(qry_pts),):
        raise ValueError("query_distances must match query_points")
    n_s, n_q = len(surf_pts), len(qry_pts)
    w0 = model.omega0
    depth = model.depth
    width = model.width
    ws = workspace
    if ws is None or ws.shape_key != (width, depth, n_s, n_q):
        ws = LossWorkspace(width, depth, n_s, n_q)
    ws.pts[:n_s] = surf_pts
    ws.pts[n_s:] = qry_pts

    # forward: values for all points, Jacobians for the query rows only
    for i in range(depth):
        w = model.weights[i]
        np.matmul(ws.hs[i], w.T, out=ws.z)
        _activations(ws.z, model.biases[i], w0, n_s, ws.hs[i + 1], ws.ds[i], ws.dst[i])
        if i == 0:
            _scale_rows_first(ws.dst[0], w, ws.jacs[0])
        else:
            np.matmul(w, ws.jacs[i - 1].reshape(w.shape[1], -1),
                      out=ws.lifted[i].reshape(w.shape[0], -1))
            _scale_rows(ws.dst[i], ws.lifted[i], ws.jacs[i])
    w_out = model.weights[-1][0]
    values = ws.hs[-1] @ w_out + model.biases[-1][0]
    grads_q = (w_out @ ws.jacs[-1].reshape(width, -1)).reshape(n_q, 3)

    y_s = values[:n_s]
    y_q = values[n_s:]
    fit = float(np.mean((y_q - d_true) ** 2))
    surf = float(np.mean(np.abs(y_s)))
    norm_eps = np.sqrt(np.sum(grads_q ** 2, axis=1) + EIKONAL_NORM_GUARD)
    eik = float(np.mean((norm_eps - 1.0) ** 2))
    total = fit + alpha_surf * surf + alpha_eik * eik
    terms = LossTerms(fit, surf, eik, total)

    # adjoint seeds
    ws.ybar[:n_s] = alpha_surf * np.sign(y_s) / n_s
    ws.ybar[n_s:] = 2.0 * (y_q - d_true) / n_q
    np.multiply(((alpha_eik * 2.0) * (norm_eps - 1.0) / norm_eps / n_q)[:, None],
                grads_q, out=ws.gbar)

    w_grads = [np.zeros_like(w) for w in model.weights]
    b_grads = [np.zeros_like(b) for b in model.biases]
    # output layer
    w_grads[-1][0] = ws.hs[-1].T @ ws.ybar + ws.jacs[-1].reshape(width, -1) @ ws.gbar.ravel()
    b_grads[-1][0] = ws.ybar.sum()
    np.multiply(ws.ybar[:, None], w_out[None, :], out=ws.hbar)
    _jbar_seed(w_out, ws.gbar, ws.jbar)

    for i in range(depth - 1, -1, -1):
        w = model.weights[i]
        if i == 0:
            _backward_jac_first(ws.jbar, w, ws.dst[0], ws.abar, ws.dbart, w_grads[0])
        else:
            _backward_jac(ws.jbar, ws.lifted[i], ws.dst[i], ws.abar, ws.dbart)
            np.matmul(ws.abar.reshape(w.shape[0], -1),
                      ws.jacs[i - 1].reshape(w.shape[1], -1).T, out=ws.wg)
            w_grads[i] += ws.wg
            np.matmul(w.T, ws.abar.reshape(w.shape[0], -1),
                      out=ws.jbar.reshape(w.shape[1], -1))
        _zbar_combine(ws.hbar, ws.ds[i], ws.dbart, ws.hs[i + 1], w0, n_s, ws.zbar)
        if i == 0:
            w_grads[0] += ws.zbar.T @ ws.pts
        else:
            np.matmul(ws.zbar.T, ws.hs[i], out=ws.wg)
            w_grads[i] += ws.wg
            np.matmul(ws.zbar, w, out=ws.hbar)
        b_grads[i] += ws.zbar.sum(axis=0)

    return terms, FieldGradients(w_grads, b_grads)
