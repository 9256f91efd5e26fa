"""Parametric reference-drift families and their maximum-likelihood fit.

Each family maps a parameter vector to a time-homogeneous drift field. Fits
work on an *internal* unconstrained parameterisation (identical to the
natural one except for the repressilator Hill exponent, which goes through a
softplus), and every family supplies the analytic gradient of
:func:`second_projection_loss` with respect to those internal coordinates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import DivergedFit, InvalidParameterError

__all__ = [
    "ParamVector",
    "ReferenceFamily",
    "Zero",
    "LotkaVolterra",
    "Repressilator",
    "Vortex",
    "GradientField",
    "get_family",
    "eval_drift",
    "second_projection_loss",
    "loss_and_grad",
    "fit_mle",
    "stack_increments",
]


@dataclass(frozen=True)
class ParamVector:
    family: str
    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in np.ravel(self.values))
        if not all(math.isfinite(v) for v in vals):
            raise InvalidParameterError("parameter values must be finite")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def as_array(self):
        return np.array(self.values, dtype=float)

    def to_json(self) -> str:
        return json.dumps({"family": self.family, "values": list(self.values)})

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text) if isinstance(text, str) else text
        return cls(obj["family"], tuple(obj["values"]))


def _softplus(z):
    return np.logaddexp(0.0, z)


def _softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30, y, np.log(np.expm1(np.maximum(y, 1e-300))))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class ReferenceFamily:
    """Base class. Subclasses define ``name``, ``dim``, ``param_names``,
    ``drift`` and ``drift_jac``."""

    name = "base"
    dim: int | None = None
    param_names: tuple = ()

    @property
    def n_params(self):
        return len(self.param_names)

    def check_x(self, x):
        x = np.array(x, dtype=float, ndmin=2)
        if self.dim is not None and x.shape[-1] != self.dim:
            raise InvalidParameterError(
                f"{self.name} drift expects dimension {self.dim}, got {x.shape[-1]}"
            )
        return x

    def params(self, values) -> ParamVector:
        pv = ParamVector(self.name, tuple(np.ravel(values)))
        if len(pv) != self.n_params:
            raise InvalidParameterError(
                f"{self.name} takes {self.n_params} parameters, got {len(pv)}"
            )
        return pv

    def to_internal(self, theta):
        return np.asarray(theta, dtype=float).copy()

    def from_internal(self, z):
        return np.asarray(z, dtype=float).copy()

    def initial_params(self, points=None, seed=0) -> ParamVector:
        return self.params(np.full(self.n_params, 0.1))

    def drift(self, theta, x, t=None):
        raise NotImplementedError

    def drift_jac(self, z, x):
        """Drift and its Jacobian w.r.t. internal parameters, ``(n, d, p)``."""
        raise NotImplementedError

    def bind(self, theta) -> Callable:
        theta = theta.as_array() if isinstance(theta, ParamVector) else np.asarray(theta, float)
        return BoundDrift(self, theta)

    def loss_grad(self, z, x, dx, dt, gamma):
        """Second-projection loss and its gradient at internal parameters ``z``.

        ``x`` are the left states of every step, ``dx`` the increments; the
        loss is ``sum |dx - b(x) dt|^2 / (2 gamma dt)`` divided by the number
        of steps.
        """
        b, jac = self.drift_jac(z, x)
        r = dx - b * dt
        n = x.shape[0]
        loss = float(np.sum(r * r)) / (2 * gamma * dt * n)
        grad = -np.einsum("nd,ndp->p", r, jac) / (gamma * n)
        return loss, grad


class BoundDrift:
    """A family evaluated at fixed parameters, usable as a drift field."""

    def __init__(self, family, theta):
        self.family = family
        self.theta = np.asarray(theta, dtype=float)

    def __call__(self, x, t=None):
        return self.family.drift(self.theta, x, t)

    def __repr__(self):
        return f"BoundDrift({self.family.name}, {self.theta.tolist()})"


class Zero(ReferenceFamily):
    """Brownian reference: no parameters, zero drift."""

    name = "zero"
    param_names = ()

    def __init__(self, dim=None):
        self.dim = dim

    def drift(self, theta, x, t=None):
        return np.zeros_like(self.check_x(x))

    def drift_jac(self, z, x):
        x = self.check_x(x)
        return np.zeros_like(x), np.zeros(x.shape + (0,))


class LotkaVolterra(ReferenceFamily):
    """Predator-prey drift ``(a x - b x y, c x y - d y)``."""

    name = "lotka_volterra"
    dim = 2
    param_names = ("alpha", "beta", "gamma_lv", "delta")

    def drift(self, theta, x, t=None):
        x = self.check_x(x)
        a, b, c, d = theta
        u, v = x[:, 0], x[:, 1]
        return np.stack([a * u - b * u * v, c * u * v - d * v], axis=1)

    def drift_jac(self, z, x):
        x = self.check_x(x)
        u, v = x[:, 0], x[:, 1]
        uv = u * v
        jac = np.zeros((x.shape[0], 2, 4))
        jac[:, 0, 0] = u
        jac[:, 0, 1] = -uv
        jac[:, 1, 2] = uv
        jac[:, 1, 3] = -v
        return self.drift(z, x), jac


class Repressilator(ReferenceFamily):
    """Three-gene cyclic repression with Hill kinetics.

    The Hill exponent is optimised through a softplus so it stays positive,
    and the base of the power is ``|x / k|`` so that states pushed slightly
    below zero by noise do not produce complex values.
    """

    name = "repressilator"
    dim = 3
    param_names = ("beta", "n", "k", "gamma_rep")

    def to_internal(self, theta):
        z = np.asarray(theta, dtype=float).copy()
        z[1] = _softplus_inv(z[1])
        return z

    def from_internal(self, z):
        theta = np.asarray(z, dtype=float).copy()
        theta[1] = _softplus(theta[1])
        return theta

    @staticmethod
    def _hill(x, beta, n, k):
        # repressor of gene i is gene i-1 (cyclic)
        u = np.abs(np.roll(x, 1, axis=1) / k)
        with np.errstate(divide="ignore"):
            logu = np.log(u)
        s = np.where(u > 0, np.exp(n * np.where(u > 0, logu, 0.0)), 0.0)
        return u, logu, s

    def drift(self, theta, x, t=None):
        x = self.check_x(x)
        beta, n, k, g = theta
        _, _, s = self._hill(x, beta, n, k)
        return beta / (1.0 + s) - g * x

    def drift_jac(self, z, x):
        x = self.check_x(x)
        beta, rho, k, g = z
        n = float(_softplus(rho))
        u, logu, s = self._hill(x, beta, n, k)
        h = 1.0 / (1.0 + s)
        b = beta * h - g * x
        jac = np.empty(x.shape + (4,))
        jac[..., 0] = h
        dn = np.where(u > 0, -beta * h * h * s * np.where(u > 0, logu, 0.0), 0.0)
        jac[..., 1] = dn * _sigmoid(rho)
        # ds/dk = -n s / k
        jac[..., 2] = beta * h * h * n * s / k
        jac[..., 3] = -x
        return b, jac


class Vortex(ReferenceFamily):
    """Constant-curl elliptical vortex.

    Drift ``(scale (x2 - c2) exp(-logyscale), -scale (x1 - c1))``; the
    quadratic form ``(x1 - c1)^2 + exp(-logyscale) (x2 - c2)^2`` is conserved
    by the deterministic flow.
    """

    name = "vortex"
    dim = 2
    param_names = ("c1", "c2", "scale", "logyscale")

    def initial_params(self, points=None, seed=0):
        c = np.zeros(2) if points is None else np.mean(np.asarray(points, float), axis=0)
        return self.params([c[0], c[1], 0.0, 0.0])

    def drift(self, theta, x, t=None):
        x = self.check_x(x)
        c1, c2, s, ly = theta
        e = math.exp(-ly)
        return np.stack([s * (x[:, 1] - c2) * e, -s * (x[:, 0] - c1)], axis=1)

    def drift_jac(self, z, x):
        x = self.check_x(x)
        c1, c2, s, ly = z
        e = math.exp(-ly)
        dy = x[:, 1] - c2
        dxx = x[:, 0] - c1
        jac = np.zeros((x.shape[0], 2, 4))
        jac[:, 0, 1] = -s * e
        jac[:, 0, 2] = dy * e
        jac[:, 0, 3] = -s * dy * e
        jac[:, 1, 0] = s
        jac[:, 1, 2] = -dxx
        return self.drift(z, x), jac


class GradientField(ReferenceFamily):
    """Drift ``-grad Phi(x)`` of a ReLU network potential.

    ``Phi`` is a fully connected network ``d -> 128 -> 64 -> 64 -> 1`` with
    ReLU activations. Weights are flattened into one parameter vector in the
    order ``W1, b1, W2, b2, W3, b3, w4, b4`` with ``W`` stored ``(out, in)``.
    """

    name = "gradient_field"
    hidden = (128, 64, 64)
    _chunk = 8192

    def __init__(self, dim, hidden=None):
        self.dim = int(dim)
        if hidden is not None:
            self.hidden = tuple(hidden)
        sizes = (self.dim,) + self.hidden + (1,)
        self.shapes = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.shapes.append((fan_out, fan_in))
            self.shapes.append((fan_out,))
        self.param_names = tuple(f"w{i}" for i in range(sum(int(np.prod(s)) for s in self.shapes)))

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        out, pos = [], 0
        for shp in self.shapes:
            size = int(np.prod(shp))
            out.append(theta[pos : pos + size].reshape(shp))
            pos += size
        return out

    def initial_params(self, points=None, seed=0):
        """Uniform ``+-1/sqrt(fan_in)`` initialisation from a dedicated seed."""
        rng = np.random.default_rng(seed)
        parts = []
        for w_shape, b_shape in zip(self.shapes[::2], self.shapes[1::2]):
            bound = 1.0 / math.sqrt(w_shape[1])
            parts.append(rng.uniform(-bound, bound, size=w_shape).ravel())
            parts.append(rng.uniform(-bound, bound, size=b_shape).ravel())
        return self.params(np.concatenate(parts))

    def _forward(self, params, x):
        layers = params
        masks = []
        a = x
        for i in range(0, len(layers) - 2, 2):
            z = a @ layers[i].T + layers[i + 1]
            m = z > 0
            masks.append(m)
            a = np.where(m, z, 0.0)
        return a, masks

    def potential(self, theta, x):
        x = self.check_x(x)
        p = self.unpack(theta)
        a, _ = self._forward(p, x)
        return (a @ p[-2].T + p[-1])[:, 0]

    def _grad_phi(self, p, x):
        _, masks = self._forward(p, x)
        w_out = p[-2][0]
        g = masks[-1] * w_out
        for li in range(len(masks) - 1, 0, -1):
            g = masks[li - 1] * (g @ p[2 * li])
        return g @ p[0], masks

    def drift(self, theta, x, t=None):
        x = self.check_x(x)
        p = self.unpack(theta)
        out = np.empty_like(x)
        for s in range(0, x.shape[0], self._chunk):
            out[s : s + self._chunk] = -self._grad_phi(p, x[s : s + self._chunk])[0]
        return out

    def drift_jac(self, z, x):
        raise NotImplementedError("GradientField differentiates the loss directly")

    def loss_grad(self, z, x, dx, dt, gamma):
        """Loss and gradient by reverse accumulation through the tangent pass.

        With ReLU masks fixed, ``grad Phi = W1^T m1 W2^T m2 W3^T m3 w4`` is
        multilinear in the weights and independent of the biases, so bias
        gradients vanish almost everywhere.
        """
        p = self.unpack(z)
        n = x.shape[0]
        grads = [np.zeros_like(w) for w in p]
        loss = 0.0
        nl = len(self.hidden)
        for s in range(0, n, self._chunk):
            xs, dxs = x[s : s + self._chunk], dx[s : s + self._chunk]
            gphi, masks = self._grad_phi(p, xs)
            r = dxs + gphi * dt  # dx - b dt with b = -grad Phi
            loss += float(np.sum(r * r))
            # d loss / d gphi = 2 r dt / (2 gamma dt n) = r / (gamma n)
            u = r / (gamma * n)
            # rebuild the per-layer backward signals g_l of grad Phi
            gs = [None] * nl
            g = masks[-1] * p[-2][0]
            gs[-1] = g
            for li in range(nl - 1, 0, -1):
                g = masks[li - 1] * (g @ p[2 * li])
                gs[li - 1] = g
            # reverse accumulation of u . (W1^T g1)
            grads[0] += gs[0].T @ u
            v = u @ p[0].T
            for li in range(1, nl):
                a = masks[li - 1] * v
                grads[2 * li] += gs[li].T @ a
                v = a @ p[2 * li].T
            grads[-2] += (masks[-1] * v).sum(axis=0)[None, :]
        loss /= 2 * gamma * dt * n
        return loss, np.concatenate([g.ravel() for g in grads])


_FAMILIES = {
    "zero": Zero,
    "lotka_volterra": LotkaVolterra,
    "repressilator": Repressilator,
    "vortex": Vortex,
    "gradient_field": GradientField,
}


def get_family(name, dim=None) -> ReferenceFamily:
    try:
        cls = _FAMILIES[name]
    except KeyError:
        raise InvalidParameterError(f"unknown reference family {name!r}") from None
    if cls in (Zero, GradientField):
        if cls is GradientField and dim is None:
            raise InvalidParameterError("gradient_field needs a dimension")
        return cls(dim)
    fam = cls()
    if dim is not None and fam.dim != dim:
        raise InvalidParameterError(f"{name} has dimension {fam.dim}, data has {dim}")
    return fam


def eval_drift(family: ReferenceFamily, theta, x, t=None):
    """Evaluate ``family`` at parameters ``theta`` for one state or a batch."""
    theta = theta.as_array() if isinstance(theta, ParamVector) else np.asarray(theta, float)
    x = np.asarray(x, dtype=float)
    out = family.drift(theta, x.reshape(-1, x.shape[-1]), t)
    return out.reshape(x.shape)


def stack_increments(trajs):
    """Left states, increments and shared ``dt`` of every step of every path."""
    if len(trajs) == 0:
        raise InvalidParameterError("need at least one trajectory")
    dts = {round(tr.dt, 15) for tr in trajs}
    if len(dts) != 1:
        raise InvalidParameterError("trajectories must share one time step")
    x = np.concatenate([tr.states[:-1] for tr in trajs])
    dx = np.concatenate([np.diff(tr.states, axis=0) for tr in trajs])
    return x, dx, trajs[0].dt


def _as_theta(family, theta):
    if isinstance(theta, ParamVector):
        if theta.family != family.name:
            raise InvalidParameterError(f"parameters for {theta.family!r}, family is {family.name!r}")
        return theta.as_array()
    return np.asarray(theta, dtype=float)


def second_projection_loss(family, theta, trajs, gamma) -> float:
    """Mean over all steps of ``|dx - b(x) dt|^2 / (2 gamma dt)``.

    This is the negated Gaussian path log-likelihood with the constant
    ``log(gamma dt)`` terms dropped, normalised by the number of trajectories
    times the number of steps per trajectory.
    """
    if not gamma > 0:
        raise InvalidParameterError("gamma must be positive")
    x, dx, dt = stack_increments(trajs)
    b = family.drift(_as_theta(family, theta), x)
    r = dx - b * dt
    return float(np.sum(r * r)) / (2 * gamma * dt * x.shape[0])


def loss_and_grad(family, theta, trajs, gamma):
    """Loss and gradient w.r.t. *internal* parameters (see module docstring)."""
    x, dx, dt = stack_increments(trajs)
    z = family.to_internal(_as_theta(family, theta))
    return family.loss_grad(z, x, dx, dt, gamma)


def fit_mle(
    family,
    theta_init,
    trajs,
    gamma,
    lr=0.01,
    epochs=50,
    method="gd",
    max_halvings=10,
    callback=None,
) -> ParamVector:
    """Maximum-likelihood reference parameters for a set of trajectories.

    Parameters
    ----------
    method : {"gd", "lbfgs"}
        ``"gd"`` is full-batch gradient descent with step ``lr`` for
        ``epochs`` epochs; an epoch that would increase the loss halves the
        step and retries, up to ``max_halvings`` times, so the loss trace is
        non-increasing. ``"lbfgs"`` runs L-BFGS for at most ``epochs``
        iterations (``lr`` unused).
    callback : callable, optional
        Called as ``callback(epoch, loss)`` after every accepted epoch
        (``epoch=0`` reports the initial loss).

    Raises
    ------
    DivergedFit
        If the loss is non-finite at the start or along the way.
    """
    theta0 = _as_theta(family, theta_init)
    if family.n_params == 0:
        return family.params(theta0)
    x, dx, dt = stack_increments(trajs)
    z = family.to_internal(theta0)

    def fg(zz):
        return family.loss_grad(zz, x, dx, dt, gamma)

    loss, grad = fg(z)
    if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
        raise DivergedFit(0)
    if callback is not None:
        callback(0, loss)

    if method == "gd":
        for epoch in range(1, epochs + 1):
            step = lr
            for _ in range(max_halvings + 1):
                z_new = z - step * grad
                loss_new, grad_new = fg(z_new)
                if math.isfinite(loss_new) and loss_new <= loss:
                    break
                step *= 0.5
            else:
                if not math.isfinite(loss_new):
                    raise DivergedFit(epoch)
                continue  # no descent found: keep the current iterate
            if not np.all(np.isfinite(grad_new)):
                raise DivergedFit(epoch)
            z, loss, grad = z_new, loss_new, grad_new
            if callback is not None:
                callback(epoch, loss)
    elif method == "lbfgs":
        best = {"z": z.copy(), "loss": loss}

        def fun(zz):
            val, g = fg(zz)
            if not math.isfinite(val):
                return np.inf, np.zeros_like(zz)
            if val < best["loss"]:
                best["z"], best["loss"] = zz.copy(), val
            return val, g

        it = [0]

        def cb(zk):
            it[0] += 1
            if callback is not None:
                callback(it[0], fg(zk)[0])

        minimize(fun, z, jac=True, method="L-BFGS-B", callback=cb, options={"maxiter": int(epochs)})
        z = best["z"]
    else:
        raise InvalidParameterError(f"unknown fit method {method!r}")
    return family.params(family.from_internal(z))
