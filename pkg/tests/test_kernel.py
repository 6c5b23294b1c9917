"""The compact band kernel must reproduce the FFT-based operators to round-off."""

import numpy as np
import pytest

from pemix.dynamics import B, adjoint_rhs, advect, tangent_rhs
from pemix.kernel import get_kernel
from pemix.spectral import GridSpec, inner, random_field, sobolev_norm


@pytest.fixture(params=[GridSpec(), GridSpec(L=3.0, h=1.5, Nx=12, Ny=8, Nz=6)])
def grid(request):
    return request.param


def test_pack_unpack_roundtrip(grid, rng):
    K = get_kernel(grid)
    u = random_field(grid, rng, batch=(3,))
    # m < 0 is rebuilt from m > 0, so only Hermitian round-off of the input remains
    assert np.max(np.abs(K.unpack(K.pack(u)) - u)) <= 1e-14 * np.max(np.abs(u))


def test_operators_match_fft_path(grid, rng):
    K = get_kernel(grid)
    u = random_field(grid, rng, batch=(4,))
    w = random_field(grid, rng, batch=(4,))
    cu, cw = K.pack(u), K.pack(w)
    scale = np.max(np.abs(B(u, u, grid)))
    assert np.max(np.abs(K.unpack(K.b(cu, cw)) - advect(u, w, grid))) <= 1e-13 * scale
    assert np.max(np.abs(K.unpack(K.B_self(cu)) - B(u, u, grid))) <= 1e-13 * scale
    assert np.max(np.abs(K.unpack(K.tangent(cu, cw)) - tangent_rhs(u, w, grid))) <= 1e-13 * scale
    assert np.max(np.abs(K.unpack(K.adjoint(cu, cw)) - adjoint_rhs(u, w, grid))) <= 1e-13 * scale


def test_norms_and_inner_match(grid, rng):
    K = get_kernel(grid)
    u, w = random_field(grid, rng), random_field(grid, rng)
    for j in (0, 1, 2):
        assert K.sobolev_norm(K.pack(u), j) == pytest.approx(sobolev_norm(u, j, grid), rel=1e-13)
    assert K.inner(K.pack(u), K.pack(w)) == pytest.approx(inner(u, w, grid), rel=1e-12)


def test_kernel_is_cached(grid):
    assert get_kernel(grid) is get_kernel(grid)
