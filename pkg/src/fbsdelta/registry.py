"""Built-in model registry, addressed by name plus a parameter block."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ConfigError
from .model import ModelSpec, _diag, _eye


def _gain(value, n: int, m: int) -> np.ndarray:
    """Scalar gains become ``value * ones(n, m) / m``; matrices pass through."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.ones((n, m)) / m
    arr = np.atleast_2d(arr)
    if arr.shape != (n, m):
        raise ConfigError(f"gain of shape {arr.shape}, expected {(n, m)}")
    return arr


class ZeroModel(ModelSpec):
    """All dynamics zero. Optional constant running cost and quadratic / constant costs."""

    name = "zero"

    def __init__(self, n=1, m=1, running_const=0.0, quad_weight=0.0, gamma_const=0.0, horizon=None):
        super().__init__(n, m, horizon)
        self.running_const = float(running_const)
        self.quad_weight = float(quad_weight)
        self.gamma_const = float(gamma_const)

    def l(self, k, nodes, x, yp, zp, u):
        w = self.quad_weight
        return self.running_const + 0.5 * w * (np.sum(x * x + yp * yp + zp * zp, -1) + np.sum(u * u, -1))

    def l_grad(self, k, nodes, x, yp, zp, u):
        w = self.quad_weight
        return w * x, w * yp, w * zp, w * u

    def phi(self, nodes, x):
        return 0.5 * self.quad_weight * np.sum(x * x, -1)

    def phi_grad(self, nodes, x):
        return self.quad_weight * x

    def gamma(self, y):
        return self.gamma_const + 0.5 * self.quad_weight * np.sum(y * y, -1)

    def gamma_grad(self, y):
        return self.quad_weight * y


class _QuadraticCosts(ModelSpec):
    """Shared quadratic cost terms ``0.5*(qx|x|^2 + ry|y'|^2 + sz|z'|^2 + wu|u|^2)``."""

    def _set_costs(self, qx, ry, sz, wu, mN, m0):
        self.qx, self.ry, self.sz, self.wu = map(float, (qx, ry, sz, wu))
        self.mN, self.m0 = float(mN), float(m0)

    def _quad(self, x, yp, zp, u):
        return 0.5 * (self.qx * np.sum(x * x, -1) + self.ry * np.sum(yp * yp, -1)
                      + self.sz * np.sum(zp * zp, -1) + self.wu * np.sum(u * u, -1))

    def _quad_grad(self, x, yp, zp, u):
        return self.qx * x, self.ry * yp, self.sz * zp, self.wu * u

    def phi(self, nodes, x):
        return 0.5 * self.mN * np.sum(x * x, -1)

    def phi_grad(self, nodes, x):
        return self.mN * x

    def gamma(self, y):
        return 0.5 * self.m0 * np.sum(y * y, -1)

    def gamma_grad(self, y):
        return self.m0 * y


class TanhDrift(_QuadraticCosts):
    """Bounded smooth nonlinear family built on componentwise tanh.

    ``b = a x + c tanh(x + kappa y') + D u``,
    ``sigma = s tanh(x + e z') + G u``,
    ``y_k = alpha y' + beta z' + H u - rho tanh(x)``,
    ``Lambda(y) = -lam y``, ``Phi(x) = phi_gain tanh(x)``; costs are quadratic
    plus ``c_l * sum(log cosh x)``. A negative ``wu`` makes the running cost concave in u.
    """

    name = "tanh_drift"
    lambda_kind = "linear"

    def __init__(self, n=1, m=1, a=0.5, c=0.3, kappa=0.4, d=1.0, s=0.2, e=0.3, g=0.2,
                 alpha=0.4, beta=0.2, h=0.3, rho=0.3, lam=0.3, phi_gain=0.4,
                 qx=1.0, ry=0.5, sz=0.5, wu=1.0, c_l=0.2, mN=1.0, m0=1.0, horizon=None):
        super().__init__(n, m, horizon)
        self.a, self.c, self.kappa, self.s, self.e = map(float, (a, c, kappa, s, e))
        self.alpha, self.beta, self.rho = map(float, (alpha, beta, rho))
        self.D, self.G, self.H = _gain(d, n, m), _gain(g, n, m), _gain(h, n, m)
        self.lam, self.phi_gain, self.c_l = float(lam), float(phi_gain), float(c_l)
        self._set_costs(qx, ry, sz, wu, mN, m0)
        self.phi_kind = "constant" if self.phi_gain == 0 else "nonlinear"
        self.lambda_kind = "constant" if self.lam == 0 else "linear"

    def b(self, k, nodes, x, yp, zp, u):
        return self.a * x + self.c * np.tanh(x + self.kappa * yp) + u @ self.D.T

    def b_jac(self, k, nodes, x, yp, zp, u):
        sech2 = 1.0 - np.tanh(x + self.kappa * yp) ** 2
        M = x.shape[0]
        return (_diag(self.a + self.c * sech2), _diag(self.c * self.kappa * sech2),
                np.zeros((M, self.n, self.n)), np.broadcast_to(self.D, (M,) + self.D.shape).copy())

    def sigma(self, k, nodes, x, yp, zp, u):
        return self.s * np.tanh(x + self.e * zp) + u @ self.G.T

    def sigma_jac(self, k, nodes, x, yp, zp, u):
        sech2 = 1.0 - np.tanh(x + self.e * zp) ** 2
        M = x.shape[0]
        return (_diag(self.s * sech2), np.zeros((M, self.n, self.n)), _diag(self.s * self.e * sech2),
                np.broadcast_to(self.G, (M,) + self.G.shape).copy())

    def f(self, k, nodes, x, yp, zp, u):
        return -(self.alpha * yp + self.beta * zp + u @ self.H.T - self.rho * np.tanh(x))

    def f_jac(self, k, nodes, x, yp, zp, u):
        M = x.shape[0]
        return (_diag(self.rho * (1.0 - np.tanh(x) ** 2)), _eye(M, self.n, -self.alpha),
                _eye(M, self.n, -self.beta), -np.broadcast_to(self.H, (M,) + self.H.shape))

    def l(self, k, nodes, x, yp, zp, u):
        return self._quad(x, yp, zp, u) + self.c_l * np.sum(np.log(np.cosh(x)), -1)

    def l_grad(self, k, nodes, x, yp, zp, u):
        gx, gy, gz, gu = self._quad_grad(x, yp, zp, u)
        return gx + self.c_l * np.tanh(x), gy, gz, gu

    def Lambda(self, y):
        return -self.lam * y

    def Lambda_jac(self, y):
        return _eye(y.shape[0], self.n, -self.lam)

    def Phi(self, nodes, x):
        return self.phi_gain * np.tanh(x)

    def Phi_jac(self, nodes, x):
        return _diag(self.phi_gain * (1.0 - np.tanh(x) ** 2))


class SineCoupled(_QuadraticCosts):
    """Nonlinear family with sine couplings and a constant terminal map.

    ``b = a x + c sin(y') + D u``,
    ``sigma = s sin(z') + g_x (1 - cos x) + G u``,
    ``y_k = alpha y' + beta sin(z') + H u + rho sin(x)``,
    ``Lambda(y) = -lam y``, ``Phi = eta``; the running cost adds ``c_l * sum(1 - cos u)``.
    """

    name = "sine_coupled"
    phi_kind = "constant"
    lambda_kind = "linear"

    def __init__(self, n=1, m=1, a=0.6, c=0.3, d=1.0, s=0.3, g_x=0.2, g=0.3,
                 alpha=0.5, beta=0.3, h=0.2, rho=0.2, lam=0.4, eta=0.5,
                 qx=1.0, ry=0.3, sz=0.3, wu=1.0, c_l=0.3, mN=1.0, m0=0.5, horizon=None):
        super().__init__(n, m, horizon)
        self.a, self.c, self.s, self.g_x = map(float, (a, c, s, g_x))
        self.alpha, self.beta, self.rho = map(float, (alpha, beta, rho))
        self.D, self.G, self.H = _gain(d, n, m), _gain(g, n, m), _gain(h, n, m)
        self.lam, self.c_l = float(lam), float(c_l)
        self.eta = np.broadcast_to(np.asarray(eta, dtype=float), (n,)).copy()
        self._set_costs(qx, ry, sz, wu, mN, m0)

    def b(self, k, nodes, x, yp, zp, u):
        return self.a * x + self.c * np.sin(yp) + u @ self.D.T

    def b_jac(self, k, nodes, x, yp, zp, u):
        M = x.shape[0]
        return (_eye(M, self.n, self.a), _diag(self.c * np.cos(yp)), np.zeros((M, self.n, self.n)),
                np.broadcast_to(self.D, (M,) + self.D.shape).copy())

    def sigma(self, k, nodes, x, yp, zp, u):
        return self.s * np.sin(zp) + self.g_x * (1.0 - np.cos(x)) + u @ self.G.T

    def sigma_jac(self, k, nodes, x, yp, zp, u):
        M = x.shape[0]
        return (_diag(self.g_x * np.sin(x)), np.zeros((M, self.n, self.n)), _diag(self.s * np.cos(zp)),
                np.broadcast_to(self.G, (M,) + self.G.shape).copy())

    def f(self, k, nodes, x, yp, zp, u):
        return -(self.alpha * yp + self.beta * np.sin(zp) + u @ self.H.T + self.rho * np.sin(x))

    def f_jac(self, k, nodes, x, yp, zp, u):
        M = x.shape[0]
        return (_diag(-self.rho * np.cos(x)), _eye(M, self.n, -self.alpha), _diag(-self.beta * np.cos(zp)),
                -np.broadcast_to(self.H, (M,) + self.H.shape))

    def l(self, k, nodes, x, yp, zp, u):
        return self._quad(x, yp, zp, u) + self.c_l * np.sum(1.0 - np.cos(u), -1)

    def l_grad(self, k, nodes, x, yp, zp, u):
        gx, gy, gz, gu = self._quad_grad(x, yp, zp, u)
        return gx, gy, gz, gu + self.c_l * np.sin(u)

    def Lambda(self, y):
        return -self.lam * y

    def Lambda_jac(self, y):
        return _eye(y.shape[0], self.n, -self.lam)

    def Phi(self, nodes, x):
        return np.broadcast_to(self.eta, x.shape).copy()

    def Phi_jac(self, nodes, x):
        return np.zeros((x.shape[0], self.n, self.n))


class LinearMonotone(_QuadraticCosts):
    """Linear family ``b = cb y' + D u``, ``sigma = cs z'``, ``f = cf x``, ``Lambda = lam0``, ``Phi(x) = slope x``."""

    name = "linear_monotone"
    lambda_kind = "constant"

    def __init__(self, n=1, m=1, cb=-1.0, cs=-1.0, cf=-1.0, d=1.0, lam0=0.0, slope=1.0,
                 qx=1.0, ry=0.0, sz=0.0, wu=1.0, mN=1.0, m0=0.0, horizon=None):
        super().__init__(n, m, horizon)
        self.cb, self.cs, self.cf, self.slope = map(float, (cb, cs, cf, slope))
        self.D = _gain(d, n, m)
        self.lam0 = np.broadcast_to(np.asarray(lam0, dtype=float), (n,)).copy()
        self._set_costs(qx, ry, sz, wu, mN, m0)
        self.phi_kind = "constant" if self.slope == 0 else "linear"

    def b(self, k, nodes, x, yp, zp, u):
        return self.cb * yp + u @ self.D.T

    def b_jac(self, k, nodes, x, yp, zp, u):
        M = x.shape[0]
        return (np.zeros((M, self.n, self.n)), _eye(M, self.n, self.cb), np.zeros((M, self.n, self.n)),
                np.broadcast_to(self.D, (M,) + self.D.shape).copy())

    def sigma(self, k, nodes, x, yp, zp, u):
        return self.cs * zp

    def sigma_jac(self, k, nodes, x, yp, zp, u):
        M = x.shape[0]
        z = np.zeros((M, self.n, self.n))
        return z, z.copy(), _eye(M, self.n, self.cs), np.zeros((M, self.n, self.m))

    def f(self, k, nodes, x, yp, zp, u):
        return self.cf * x

    def f_jac(self, k, nodes, x, yp, zp, u):
        M = x.shape[0]
        z = np.zeros((M, self.n, self.n))
        return _eye(M, self.n, self.cf), z, z.copy(), np.zeros((M, self.n, self.m))

    def l(self, k, nodes, x, yp, zp, u):
        return self._quad(x, yp, zp, u)

    def l_grad(self, k, nodes, x, yp, zp, u):
        return self._quad_grad(x, yp, zp, u)

    def Lambda(self, y):
        return np.broadcast_to(self.lam0, y.shape).copy()

    def Phi(self, nodes, x):
        return self.slope * x

    def Phi_jac(self, nodes, x):
        return _eye(x.shape[0], self.n, self.slope)


def _lq_factory(params: dict) -> ModelSpec:
    from .lq import LQCoefficients, as_model
    return as_model(LQCoefficients.from_params(params))


def _lq_random_factory(params: dict) -> ModelSpec:
    from .lq import as_model, random_lq
    return as_model(random_lq(**params))


def _storage_factory(params: dict) -> ModelSpec:
    from .lq import as_model, storage_preset
    return as_model(storage_preset(params))


REGISTRY: dict[str, Callable[[dict], ModelSpec]] = {
    "zero": lambda p: ZeroModel(**p),
    "tanh_drift": lambda p: TanhDrift(**p),
    "sine_coupled": lambda p: SineCoupled(**p),
    "linear_monotone": lambda p: LinearMonotone(**p),
    "lq": _lq_factory,
    "lq_random": _lq_random_factory,
    "storage": _storage_factory,
}


def make_model(name: str, params: dict | None = None) -> ModelSpec:
    if name not in REGISTRY:
        raise ConfigError(f"unknown model {name!r}; known: {sorted(REGISTRY)}", path="model.name")
    try:
        return REGISTRY[name](dict(params or {}))
    except TypeError as exc:
        raise ConfigError(str(exc), path="model.params") from exc
