"""Sine-activated MLP fields with exact spatial and parameter gradients.

Parameter layout (flat float64 array, layer-major). For each hidden layer ``l``
with fan-in ``d`` and width ``n``: ``W_l`` (row-major ``n x d``) followed by
``b_l`` (``n``). Then the output layer: ``w_out`` (``n``) followed by the scalar
``b_out``.

Hidden layer ``l`` computes ``sin(omega_l * (W_l a + b_l))`` with
``omega_0 = arch.omega0`` and ``omega_l = arch.omega_hidden`` for ``l >= 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .rng import make_rng

try:  # torch's vectorised float64 sin/cos is ~10x faster than numpy's
    import torch as _torch

    def _sin(x):
        return _torch.sin(_torch.from_numpy(x)).numpy()

    def _cos(x):
        return _torch.cos(_torch.from_numpy(x)).numpy()

except ImportError:  # pragma: no cover
    _sin, _cos = np.sin, np.cos


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    input_dim: int = 3
    hidden_dim: int = 256
    hidden_layers: int = 4
    omega0: float = 30.0
    omega_hidden: float = 30.0

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_dim < 1 or self.input_dim < 1:
            raise ValueError(f"invalid architecture {self}")
        if self.omega0 <= 0 or self.omega_hidden <= 0:
            raise ValueError("frequency scales must be positive")

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_out, fan_in) of every affine map, output layer last."""
        shapes = [(self.hidden_dim, self.input_dim)]
        shapes += [(self.hidden_dim, self.hidden_dim)] * (self.hidden_layers - 1)
        shapes.append((1, self.hidden_dim))
        return shapes

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())

    def omegas(self) -> list[float]:
        return [self.omega0] + [self.omega_hidden] * (self.hidden_layers - 1)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "hidden_layers": self.hidden_layers,
            "omega0": self.omega0,
            "omega_hidden": self.omega_hidden,
        }


@dataclass
class NeuralField:
    architecture: Architecture
    params: np.ndarray
    seed: int | None = None
    _views: list = dc_field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (self.architecture.n_params,):
            raise ShapeMismatch(
                f"expected {self.architecture.n_params} parameters, got {self.params.shape}"
            )
        self._views = _split(self.architecture, self.params)

    def with_params(self, params: np.ndarray) -> "NeuralField":
        return NeuralField(self.architecture, np.array(params, dtype=np.float64), self.seed)

    def copy(self) -> "NeuralField":
        return self.with_params(self.params.copy())

    # -- evaluation -----------------------------------------------------
    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.eval(x)

    def eval(self, x: np.ndarray) -> np.ndarray:
        """Field values at ``x`` (shape ``(3,)`` or ``(B, 3)``)."""
        X, single = _as_batch(x, self.architecture.input_dim)
        a = X
        omegas = self.architecture.omegas()
        for (W, b), om in zip(self._views[:-1], omegas):
            a = _sin(om * (a @ W.T + b))
        w_out, b_out = self._views[-1]
        out = a @ w_out[0] + b_out[0]
        return out[0] if single else out

    def value_and_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values ``(B,)`` and exact spatial gradients ``(B, 3)``."""
        X, single = _as_batch(x, self.architecture.input_dim)
        val, grad = _forward(self.architecture, self._views, X, keep=False)[:2]
        if single:
            return val[0], grad[0]
        return val, grad

    def eval_with_gradient(self, x: np.ndarray) -> "FieldSample":
        v, g = self.value_and_grad(np.asarray(x, dtype=np.float64).reshape(-1))
        return FieldSample(float(v), np.asarray(g))

    # -- parameter gradients -------------------------------------------
    def backprop(self, x: np.ndarray, value_adj: np.ndarray | None = None,
                 grad_adj: np.ndarray | None = None) -> np.ndarray:
        """Gradient w.r.t. parameters of ``sum_i a_i*value_i + b_i . grad_i``.

        ``value_adj`` has shape ``(B,)``, ``grad_adj`` shape ``(B, 3)``; either
        may be ``None`` (treated as zero).
        """
        X, _ = _as_batch(x, self.architecture.input_dim)
        B = X.shape[0]
        if value_adj is not None:
            value_adj = np.asarray(value_adj, dtype=np.float64)
            if value_adj.shape != (B,):
                raise ShapeMismatch(f"value adjoint shape {value_adj.shape} != ({B},)")
        if grad_adj is not None:
            grad_adj = np.asarray(grad_adj, dtype=np.float64)
            if grad_adj.shape != (B, self.architecture.input_dim):
                raise ShapeMismatch(f"gradient adjoint shape {grad_adj.shape} != ({B}, 3)")
        return _backward(self.architecture, self._views, X, value_adj, grad_adj)

    def value_grad_and_backprop(self, x, adjoint_fn):
        """Forward once, let ``adjoint_fn(values, grads) -> (a, b)`` build the
        adjoints, then backprop reusing the cached forward pass.

        Returns ``(values, grads, param_grad)``.
        """
        X, _ = _as_batch(x, self.architecture.input_dim)
        val, grad, cache = _forward(self.architecture, self._views, X, keep=True)
        a, b = adjoint_fn(val, grad)
        pg = _backward(self.architecture, self._views, X, a, b, cache=cache)
        return val, grad, pg


@dataclass(frozen=True)
class FieldSample:
    value: float
    gradient: np.ndarray


def backprop_parameter_gradients(field: NeuralField, x, value_adj=None, grad_adj=None):
    return field.backprop(x, value_adj, grad_adj)


def init_siren(arch: Architecture, seed: int) -> NeuralField:
    """SIREN initialisation: first layer U(-1/d, 1/d), deeper layers
    U(-sqrt(6/d)/omega_hidden, sqrt(6/d)/omega_hidden), zero biases."""
    rng = make_rng(seed, 0xF1E1D)
    chunks = []
    shapes = arch.layer_shapes()
    for li, (fan_out, fan_in) in enumerate(shapes):
        if li == 0:
            bound = 1.0 / fan_in
        else:
            bound = np.sqrt(6.0 / fan_in) / arch.omega_hidden
        chunks.append(rng.uniform(-bound, bound, size=fan_out * fan_in))
        chunks.append(np.zeros(fan_out))
    return NeuralField(arch, np.concatenate(chunks), seed)


def zero_field(arch: Architecture) -> NeuralField:
    return NeuralField(arch, np.zeros(arch.n_params))


def constant_field(arch: Architecture, c: float, seed: int = 0) -> NeuralField:
    """SIREN-initialised hidden layers with zero output weights and bias ``c``."""
    f = init_siren(arch, seed)
    p = f.params.copy()
    n = arch.hidden_dim
    p[-(n + 1):-1] = 0.0
    p[-1] = c
    return f.with_params(p)


# ---------------------------------------------------------------------------
def _split(arch: Architecture, params: np.ndarray):
    views = []
    off = 0
    for fan_out, fan_in in arch.layer_shapes():
        W = params[off:off + fan_out * fan_in].reshape(fan_out, fan_in)
        off += fan_out * fan_in
        b = params[off:off + fan_out]
        off += fan_out
        views.append((W, b))
    return views


def _as_batch(x, dim):
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = X.reshape(-1, dim) if single else X
    if X.ndim != 2 or X.shape[1] != dim:
        raise ShapeMismatch(f"expected points of shape (B, {dim}), got {np.shape(x)}")
    return X, single


def _mm(A, M):
    # (d, B, n) @ (n, m) as one 2-D matmul; numpy's stacked matmul is far slower
    d, B, n = A.shape
    return (A.reshape(d * B, n) @ M).reshape(d, B, M.shape[1])


def _forward(arch, views, X, keep):
    # Tangents T are stored as (3, B, n) so each spatial direction is one matmul.
    omegas = arch.omegas()
    B = X.shape[0]
    d = arch.input_dim
    a = X
    G = None  # da/dx, None means identity
    cache = []
    for (W, b), om in zip(views[:-1], omegas):
        s = om * (a @ W.T + b)
        if G is None:
            T = np.broadcast_to((om * W.T)[:, None, :], (d, B, W.shape[0]))
        else:
            T = _mm(G, om * W.T)
        c = _cos(s)
        a_next = _sin(s)
        G_next = T * c
        if keep:
            cache.append((a, G, a_next, T, c))
        a, G = a_next, G_next
    w_out, b_out = views[-1]
    val = a @ w_out[0] + b_out[0]
    grad = (G @ w_out[0]).T  # (B, d)
    if keep:
        cache.append((a, G))
    return val, np.ascontiguousarray(grad), cache


def _backward(arch, views, X, value_adj, grad_adj, cache=None):
    if cache is None:
        cache = _forward(arch, views, X, keep=True)[2]
    omegas = arch.omegas()
    out = []  # filled in reverse, gradients for (W, b) per layer

    a_L, G_L = cache[-1]
    w_out = views[-1][0][0]
    gw_out = np.zeros_like(w_out)
    if value_adj is not None:
        gw_out += value_adj @ a_L
        a_bar = np.outer(value_adj, w_out)
    else:
        a_bar = None
    if grad_adj is not None:
        # G_L: (d, B, n); grad_adj: (B, d)
        gw_out += np.einsum("dbn,bd->n", G_L, grad_adj)
        G_bar = grad_adj.T[:, :, None] * w_out[None, None, :]
    else:
        G_bar = None
    gb_out = np.array([value_adj.sum() if value_adj is not None else 0.0])
    out.append((gw_out[None, :], gb_out))

    for li in range(len(views) - 2, -1, -1):
        W, _ = views[li]
        om = omegas[li]
        a, G, sn, T, c = cache[li]
        s_bar = np.zeros_like(sn)
        gW = np.zeros_like(W)
        if a_bar is not None:
            s_bar += a_bar * c
        T_bar = None
        if G_bar is not None:
            s_bar -= sn * (G_bar * T).sum(axis=0)
            T_bar = G_bar * c
            if G is None:
                # T = om * W[:, dim] per direction: dW[:, k] = om * sum_b T_bar[k]
                gW += om * T_bar.sum(axis=1).T
            else:
                gW += om * np.tensordot(T_bar, G, axes=([0, 1], [0, 1]))
        gW += om * (s_bar.T @ a)
        gb = om * s_bar.sum(axis=0)
        out.append((gW, gb))
        if li == 0:
            break
        a_bar = om * (s_bar @ W)
        G_bar = _mm(T_bar, om * W) if T_bar is not None else None

    out.reverse()
    return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in out])
