"""Oracles shared by the unit and acceptance suites."""

import numpy as np

from pemix.dynamics import B
from pemix.spectral import basis_matrix, basis_modes, eigenvalue, sobolev_norm
from pemix.timestep import StepperConfig, solve

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def report(number, name, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {name}  ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


class Manufactured:
    """v*(t) = sum_i c_i sin(w_i t + p_i) e_i and the forcing that makes it exact.

    f = dv*/dt - Laplacian v* + B(v*, v*), evaluated exactly at every call.
    """

    def __init__(self, g, n_modes=10, seed=3):
        rng = np.random.default_rng(seed)
        self.g = g
        self.E = basis_matrix(g, n_modes)
        self.lam = np.array([eigenvalue(m, g) for m in basis_modes(g)[:n_modes]])
        self.c = rng.uniform(0.5, 1.5, n_modes)
        self.w = rng.uniform(1.0, 3.0, n_modes)
        self.p = rng.uniform(0.0, 2 * np.pi, n_modes)

    def amp(self, t):
        return self.c * np.sin(self.w * t + self.p)

    def damp(self, t):
        return self.c * self.w * np.cos(self.w * t + self.p)

    def exact(self, t):
        return np.tensordot(self.amp(t), self.E, axes=(0, 0))

    def __call__(self, t, left=False):
        v = self.exact(t)
        lin = np.tensordot(self.damp(t) + self.lam * self.amp(t), self.E, axes=(0, 0))
        return lin + B(v, v, self.g)

    def error(self, p):
        cfg = StepperConfig(2.0**-p)
        end = solve(self.exact(0.0), self, cfg, self.g, keep_stages=False, record=False).endpoint
        return sobolev_norm(end - self.exact(1.0), 0, self.g) / sobolev_norm(self.exact(1.0), 0, self.g)


def observed_order(exponents, errors):
    """Least-squares slope of log(error) against log(dt) for dt = 2^-p."""
    dts = 2.0 ** -np.asarray(exponents, dtype=float)
    return float(np.polyfit(np.log(dts), np.log(errors), 1)[0])


def low_mode_fields(g, count, norm=2.0, n_modes=6, seed=0):
    """Random combinations of the lowest modes scaled to ||u||_{V^m} = norm."""
    rng = np.random.default_rng(seed)
    E = basis_matrix(g, n_modes)
    out = []
    for _ in range(count):
        u = np.tensordot(rng.standard_normal(n_modes), E, axes=(0, 0))
        out.append(u * (norm / sobolev_norm(u, g.m_sobolev, g)))
    return out
