"""Dense tanh networks with exact input derivatives.

Input derivatives are propagated layer by layer in forward mode (one input
coordinate per tangent); parameter gradients are taken by reverse mode
through that computation with ``jax.grad``.  Everything runs in float64.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402

from .velocity import HermiteBasis  # noqa: E402

TRANSFORMS = ("identity", "negexp")
METHODS = ("pinn", "apnn", "bi_explicit", "bi_implicit")


@jax.custom_jvp
def tanh(a):
    # XLA's float64 tanh is an order of magnitude slower on CPU than exp
    return 1.0 - 2.0 / (jnp.exp(2.0 * a) + 1.0)


@tanh.defjvp
def _tanh_jvp(primals, tangents):
    s = tanh(primals[0])
    return s, (1.0 - s * s) * tangents[0]


class ConfigurationError(ValueError):
    """A network required by the selected method is missing."""


@jax.tree_util.register_pytree_node_class
@dataclass(frozen=True)
class DenseNet:
    """Fully connected net: tanh hidden layers, affine output, optional ``exp(-u)``.

    ``weights[l]`` has shape ``(widths[l+1], widths[l])``.  ``bounds`` (one
    ``(lo, hi)`` pair per input) maps the inputs affinely onto ``[-1, 1]``.
    """

    widths: tuple
    weights: tuple
    biases: tuple
    transform: str = "identity"
    seed: int = 0
    bounds: Optional[tuple] = None

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown output transform {self.transform!r}")
        if self.bounds is not None:
            b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
            if len(b) != self.widths[0] or any(not hi > lo for lo, hi in b):
                raise ValueError(f"bounds {self.bounds} need one increasing (lo, hi) pair per input")
            object.__setattr__(self, "bounds", b)
        if len(self.weights) != len(self.widths) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("number of layers does not match widths")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if hasattr(W, "shape") and tuple(W.shape) != (self.widths[l + 1], self.widths[l]):
                raise ValueError(f"layer {l}: weight shape {W.shape} does not chain with widths {self.widths}")
            if hasattr(b, "shape") and tuple(b.shape) != (self.widths[l + 1],):
                raise ValueError(f"layer {l}: bias shape {b.shape} does not match width {self.widths[l + 1]}")

    def tree_flatten(self):
        return (self.weights, self.biases), (self.widths, self.transform, self.seed, self.bounds)

    @classmethod
    def tree_unflatten(cls, aux, children):
        obj = object.__new__(cls)
        object.__setattr__(obj, "weights", tuple(children[0]))
        object.__setattr__(obj, "biases", tuple(children[1]))
        object.__setattr__(obj, "widths", aux[0])
        object.__setattr__(obj, "transform", aux[1])
        object.__setattr__(obj, "seed", aux[2])
        object.__setattr__(obj, "bounds", aux[3])
        return obj

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def input_scaling(self) -> tuple[np.ndarray, np.ndarray]:
        """``(scale, shift)`` with normalized input ``(z - shift) * scale``."""
        if self.bounds is None:
            return np.ones(self.n_in), np.zeros(self.n_in)
        lo, hi = np.array(self.bounds).T
        return 2.0 / (hi - lo), 0.5 * (hi + lo)

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))


def _check_widths(widths) -> tuple:
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ValueError(f"need at least input and output width, all positive; got {widths}")
    return widths


def xavier_init(
    widths: Sequence[int], seed: int = 0, transform: str = "identity", bounds: Optional[tuple] = None
) -> DenseNet:
    """Uniform Xavier weights on ``[-sqrt(6/(fan_in+fan_out)), +...]``, zero biases."""
    widths = _check_widths(widths)
    rng = np.random.default_rng(seed)
    Ws, bs = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        Ws.append(jnp.asarray(rng.uniform(-a, a, size=(fan_out, fan_in))))
        bs.append(jnp.zeros(fan_out))
    return DenseNet(widths, tuple(Ws), tuple(bs), transform, int(seed), bounds)


def zeros_like_net(net: DenseNet) -> DenseNet:
    return jax.tree_util.tree_map(jnp.zeros_like, net)


def _as_inputs(net: DenseNet, inputs) -> jnp.ndarray:
    x = jnp.asarray(inputs, dtype=jnp.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.n_in:
        raise ValueError(f"expected inputs of shape (batch, {net.n_in}), got {tuple(x.shape)}")
    return x


def mlp_forward(net: DenseNet, inputs) -> jnp.ndarray:
    scale, shift = net.input_scaling()
    z = (_as_inputs(net, inputs) - shift) * scale
    n = len(net.weights)
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = z @ W.T + b
        if l < n - 1:
            z = tanh(z)
    if net.transform == "negexp":
        z = jnp.exp(-z)
    return z


class Tangents(NamedTuple):
    value: jnp.ndarray  # (batch, out)
    d1: jnp.ndarray  # (batch, out, k) first derivatives along the k requested inputs
    d2: Optional[jnp.ndarray]  # (batch, out, k) pure second derivatives, if requested


def propagate(net: DenseNet, inputs, directions: Sequence[int], second: bool = False) -> Tangents:
    """Value plus first (and optionally pure second) derivatives along input axes ``directions``."""
    scale, shift = net.input_scaling()
    z = (_as_inputs(net, inputs) - shift) * scale
    directions = tuple(int(d) for d in directions)
    if any(d < 0 or d >= net.n_in for d in directions):
        raise ValueError(f"derivative directions {directions} out of range for {net.n_in} inputs")
    k = len(directions)
    seeds = jnp.asarray(scale[list(directions)])
    dz = jnp.zeros(z.shape + (k,)).at[:, jnp.array(directions), jnp.arange(k)].set(seeds)
    d2z = jnp.zeros_like(dz) if second else None
    n = len(net.weights)
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = z @ W.T + b
        da = jnp.einsum("oi,bik->bok", W, dz)
        d2a = jnp.einsum("oi,bik->bok", W, d2z) if second else None
        if l < n - 1:
            s = tanh(a)
            s1 = (1.0 - s * s)[..., None]
            z = s
            if second:
                d2z = -2.0 * s[..., None] * s1 * da * da + s1 * d2a
            dz = s1 * da
        else:
            z, dz, d2z = a, da, d2a
    if net.transform == "negexp":
        y = jnp.exp(-z)
        if second:
            d2z = y[..., None] * (dz * dz - d2z)
        dz = -y[..., None] * dz
        z = y
    return Tangents(z, dz, d2z)


def forward_with_input_derivs(net: DenseNet, inputs) -> tuple[jnp.ndarray, jnp.ndarray]:
    """Outputs and the full input jacobian ``(batch, out, in)``."""
    tg = propagate(net, inputs, range(net.n_in))
    return tg.value, tg.d1


# ---------------------------------------------------------------------------
# flat parameter vectors and checkpoints

PARAMETER_LAYOUT = "layer-major; per layer the weight matrix (out, in) in row-major order, then the bias"


def parameter_vector(net: DenseNet) -> np.ndarray:
    parts = []
    for W, b in zip(net.weights, net.biases):
        parts.append(np.asarray(W, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def net_from_vector(
    vec, widths: Sequence[int], transform: str = "identity", seed: int = 0, bounds: Optional[tuple] = None
) -> DenseNet:
    widths = _check_widths(widths)
    vec = np.asarray(vec, dtype=np.float64).ravel()
    expected = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    if vec.size != expected:
        raise ValueError(f"vector has {vec.size} entries, widths {widths} need {expected}")
    Ws, bs, pos = [], [], 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        Ws.append(jnp.asarray(vec[pos : pos + fan_in * fan_out].reshape(fan_out, fan_in)))
        pos += fan_in * fan_out
        bs.append(jnp.asarray(vec[pos : pos + fan_out]))
        pos += fan_out
    return DenseNet(widths, tuple(Ws), tuple(bs), transform, seed, bounds)


def save_checkpoint(net: DenseNet, path) -> tuple[Path, Path]:
    """Write ``<path>.npy`` (flat float64 vector) and ``<path>.json`` (widths, transform, seed, layout)."""
    path = Path(path)
    vec_path = path.with_suffix(".npy")
    meta_path = path.with_suffix(".json")
    np.save(vec_path, parameter_vector(net))
    meta = {
        "widths": list(net.widths),
        "transform": net.transform,
        "seed": net.seed,
        "bounds": None if net.bounds is None else [list(b) for b in net.bounds],
        "n_params": net.n_params,
        "dtype": "float64",
        "layout": PARAMETER_LAYOUT,
    }
    meta_path.write_text(json.dumps(meta, indent=2))
    return vec_path, meta_path


def load_checkpoint(path) -> DenseNet:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    vec = np.load(path.with_suffix(".npy"))
    bounds = meta.get("bounds")
    bounds = None if bounds is None else tuple(tuple(b) for b in bounds)
    return net_from_vector(vec, meta["widths"], meta["transform"], meta["seed"], bounds)


# ---------------------------------------------------------------------------
# gradients


def loss_gradient(loss: Callable, params):
    """Value and reverse-mode gradient of a scalar ``loss(params)``.

    ``params`` may be any pytree (a net, a bundle) or a flat vector.  Raises
    ``TypeError`` up front when the loss is not a real scalar.
    """
    out = jax.eval_shape(loss, params)
    if out.shape != () or not jnp.issubdtype(out.dtype, jnp.floating):
        raise TypeError(f"loss must return a real scalar, got shape {out.shape} dtype {out.dtype}")
    return jax.value_and_grad(loss)(params)


def softplus(s):
    return jnp.logaddexp(s, 0.0)


def inverse_softplus(y: float) -> float:
    if not y > 0:
        raise ValueError(f"softplus output must be positive, got {y}")
    return float(y + np.log(-np.expm1(-y)))


# ---------------------------------------------------------------------------
# bundles of networks

NET_FIELDS = ("rho_diff", "rho_corr", "rho_apnn", "g", "phi")


@jax.tree_util.register_pytree_node_class
@dataclass(frozen=True)
class NetworkBundle:
    """The networks of one model; absent ones are ``None``.

    ``frozen`` names members excluded from training.  ``sigma_raw`` is the
    unconstrained scattering parameter, ``sigma = softplus(sigma_raw)``.
    """

    rho_diff: Optional[DenseNet] = None
    rho_corr: Optional[DenseNet] = None
    rho_apnn: Optional[DenseNet] = None
    g: Optional[DenseNet] = None
    phi: Optional[DenseNet] = None
    sigma_raw: Optional[jnp.ndarray] = None
    frozen: frozenset = field(default_factory=frozenset)

    def tree_flatten(self):
        return (self.rho_diff, self.rho_corr, self.rho_apnn, self.g, self.phi, self.sigma_raw), self.frozen

    @classmethod
    def tree_unflatten(cls, frozen, children):
        return cls(*children, frozen=frozen)

    @property
    def sigma(self):
        if self.sigma_raw is None:
            raise ConfigurationError("bundle carries no trainable sigma")
        return softplus(self.sigma_raw)

    def freeze(self, *names: str) -> "NetworkBundle":
        for n in names:
            if n not in NET_FIELDS + ("sigma_raw",):
                raise ValueError(f"unknown member {n!r}")
        return replace(self, frozen=self.frozen | frozenset(names))

    def unfreeze(self, *names: str) -> "NetworkBundle":
        return replace(self, frozen=self.frozen - frozenset(names))

    def members(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "frozen" and getattr(self, f.name) is not None}

    def split(self) -> tuple["NetworkBundle", "NetworkBundle"]:
        """``(trainable, frozen)`` halves; each has ``None`` where the other holds a member."""
        train, fix = {}, {}
        for name, val in self.members().items():
            (fix if name in self.frozen else train)[name] = val
        return NetworkBundle(**train, frozen=self.frozen), NetworkBundle(**fix, frozen=self.frozen)

    @staticmethod
    def merge(trainable: "NetworkBundle", fixed: "NetworkBundle") -> "NetworkBundle":
        kw = fixed.members()
        kw.update(trainable.members())
        return NetworkBundle(**kw, frozen=trainable.frozen | fixed.frozen)

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ConfigurationError(f"bundle is missing {', '.join(missing)}")


def required_nets(method: str, poisson: bool = False) -> tuple:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    nets = ("rho_apnn", "g") if method in ("pinn", "apnn") else ("rho_diff", "rho_corr", "g")
    return nets + (("phi",) if poisson else ())


def build_bundle(
    method: str,
    hidden: Sequence[int] = (128, 128, 128, 128),
    seed: int = 0,
    poisson: bool = False,
    phi_hidden: Sequence[int] = (128,) * 14,
    corr_hidden: Optional[Sequence[int]] = None,
    sigma0: Optional[float] = None,
    domain: Optional[tuple] = None,
    v_max: float = 1.0,
) -> NetworkBundle:
    """Xavier-initialized networks for ``method``; each net gets its own derived seed.

    ``domain = ((t0, t1), (x0, x1))`` normalizes the network inputs; the
    velocity input of ``g`` is then scaled by ``v_max``.
    """
    hidden = list(hidden)
    tx = None if domain is None else tuple(tuple(d) for d in domain)
    txv = None if tx is None else tx + ((-v_max, v_max),)
    corr_hidden = hidden if corr_hidden is None else list(corr_hidden)
    kw = {}
    names = required_nets(method, poisson)
    for i, name in enumerate(names):
        s = seed * 101 + i
        if name == "g":
            kw[name] = xavier_init([3, *hidden, 1], s, bounds=txv)
        elif name == "phi":
            kw[name] = xavier_init([2, *phi_hidden, 1], s, bounds=tx)
        elif name == "rho_corr":
            kw[name] = xavier_init([2, *corr_hidden, 1], s, bounds=tx)
        else:
            kw[name] = xavier_init([2, *hidden, 1], s, transform="negexp", bounds=tx)
    if sigma0 is not None:
        kw["sigma_raw"] = jnp.asarray(inverse_softplus(sigma0))
    return NetworkBundle(**kw)


class RhoEval(NamedTuple):
    rho: jnp.ndarray
    rho_t: jnp.ndarray
    rho_x: jnp.ndarray
    rho_xx: Optional[jnp.ndarray] = None


def _scalar_net(net: DenseNet, points, second: bool) -> RhoEval:
    tg = propagate(net, points, (0, 1), second=second)
    d2 = tg.d2[:, 0, 1] if second else None
    return RhoEval(tg.value[:, 0], tg.d1[:, 0, 0], tg.d1[:, 0, 1], d2)


def rho_from_bundle(bundle: NetworkBundle, method: str, eps: float, points, second: bool = False) -> RhoEval:
    """Density and its ``t``/``x`` derivatives at ``(t, x)`` points (``second`` adds ``rho_xx``)."""
    if method in ("pinn", "apnn"):
        bundle.require("rho_apnn")
        return _scalar_net(bundle.rho_apnn, points, second)
    if method not in ("bi_explicit", "bi_implicit"):
        raise ValueError(f"unknown method {method!r}")
    bundle.require("rho_diff", "rho_corr")
    d = _scalar_net(bundle.rho_diff, points, second)
    c = _scalar_net(bundle.rho_corr, points, second)
    scale = eps if method == "bi_explicit" else 1.0
    xx = d.rho_xx + scale * c.rho_xx if second else None
    return RhoEval(d.rho + scale * c.rho, d.rho_t + scale * c.rho_t, d.rho_x + scale * c.rho_x, xx)


def phi_from_bundle(bundle: NetworkBundle, points) -> RhoEval:
    bundle.require("phi")
    return _scalar_net(bundle.phi, points, second=True)


class GEval(NamedTuple):
    psi: jnp.ndarray  # g/M, (batch, Nv), mean zero
    psi_t: jnp.ndarray
    psi_x: jnp.ndarray
    dv: jnp.ndarray  # (d g/dv) / M at the nodes


def g_inputs(points, basis: HermiteBasis) -> jnp.ndarray:
    """Tensor product of ``(t, x)`` points with the velocity nodes, point-major."""
    p = jnp.asarray(points, dtype=jnp.float64)
    if p.ndim != 2 or p.shape[1] != 2:
        raise ValueError(f"expected (batch, 2) points, got shape {tuple(p.shape)}")
    nv = basis.num_nodes
    v = jnp.asarray(basis.nodes)
    return jnp.concatenate([jnp.repeat(p, nv, axis=0), jnp.tile(v, p.shape[0])[:, None]], axis=1)


def g_from_bundle(bundle: NetworkBundle, basis: HermiteBasis, points) -> GEval:
    """Mean-free ``g/M`` on the nodes with ``t``/``x`` derivatives and the spectral ``v`` derivative."""
    bundle.require("g")
    net = bundle.g
    if net.n_in != 3:
        raise ValueError(f"g network must take (t, x, v), has {net.n_in} inputs")
    nv = basis.num_nodes
    tg = propagate(net, g_inputs(points, basis), (0, 1))
    raw = tg.value[:, 0].reshape(-1, nv)
    raw_t = tg.d1[:, 0, 0].reshape(-1, nv)
    raw_x = tg.d1[:, 0, 1].reshape(-1, nv)
    w = jnp.asarray(basis.weights_maxwellian)
    psi = raw - (raw @ w)[:, None]
    psi_t = raw_t - (raw_t @ w)[:, None]
    psi_x = raw_x - (raw_x @ w)[:, None]
    return GEval(psi, psi_t, psi_x, velocity_derivative(psi, basis))


def velocity_derivative(psi, basis: HermiteBasis):
    """``(d/dv (psi M)) / M`` at the nodes: ``D psi - 2 v psi + 2 v <psi>``."""
    v = jnp.asarray(basis.nodes)
    C = jnp.asarray(basis.deriv_matrix_C)
    mean = psi @ jnp.asarray(basis.weights_maxwellian)
    return psi @ C - 2.0 * v * psi + 2.0 * v * mean[..., None]
