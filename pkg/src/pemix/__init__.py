"""Stochastically forced primitive equations on a periodic box: spectral solver,
red-noise forcing, tangent and adjoint propagators, and mixing diagnostics."""

__version__ = "0.1.0"

from .spectral import (  # noqa: E402
    GridSpec,
    SpectralField,
    basis_field,
    basis_modes,
    inner,
    primed_norm,
    project,
    random_field,
    sobolev_norm,
)
from .rednoise import NoiseSegment, RedNoiseSpec, draw_segment  # noqa: E402
from .timestep import (  # noqa: E402
    StepperConfig,
    Trajectory,
    adjoint_propagate,
    solve,
    tangent_propagate,
    time_one_map,
)
from .mixing import (  # noqa: E402
    TestFunctionalDictionary,
    dual_lipschitz,
    gramian_nondegeneracy,
    mixing_experiment,
    run_chain,
    run_coupled,
)
from .snapshot import read_snapshot, write_snapshot  # noqa: E402

__all__ = [
    "GridSpec",
    "NoiseSegment",
    "RedNoiseSpec",
    "SpectralField",
    "StepperConfig",
    "TestFunctionalDictionary",
    "Trajectory",
    "adjoint_propagate",
    "basis_field",
    "basis_modes",
    "draw_segment",
    "dual_lipschitz",
    "gramian_nondegeneracy",
    "inner",
    "mixing_experiment",
    "primed_norm",
    "project",
    "random_field",
    "read_snapshot",
    "run_chain",
    "run_coupled",
    "solve",
    "sobolev_norm",
    "tangent_propagate",
    "time_one_map",
    "write_snapshot",
]
