"""Non-Hermitian dynamics of laser-driven, lossy bosonic atom pairs."""

from __future__ import annotations

__version__ = "0.1.0"

from .hamiltonian import (  # noqa: E402
    EffectiveTwoLevel,
    PairParams,
    build_coupling,
    build_effective_two_level,
    build_h0,
    build_heff,
    build_hermitian_part,
    derive_pq,
    hz,
    lambda12_approx,
    to_hz,
    zeno_shift,
)
from .spectrum import (  # noqa: E402
    BranchTrackingError,
    DressedState,
    Eigensystem,
    NearExceptionalPointWarning,
    SpectralSweep,
    diagonalize,
    perturbative_decay_rates,
    resonances,
    sweep_spectrum,
    zeno_crossover_report,
)
from .dynamics import (  # noqa: E402
    EvolutionResult,
    IntegrationError,
    LindbladResult,
    RampProtocol,
    TrajectoryResult,
    evolve_lindblad,
    evolve_nonhermitian,
    evolve_trajectories,
    prepared_state_lifetime,
)
from .adiabatic import (  # noqa: E402
    AdiabaticComparison,
    TransportReport,
    adiabatic_vs_exact,
    adiabaticity_criterion,
    berry_connection,
    transport_integrals,
)
from .experiment import (  # noqa: E402
    DecayFit,
    EnsembleModel,
    FitError,
    figure1_pipeline,
    figure3_pipeline,
    figure4_pipeline,
    fit_decay,
    observables,
    transfer_probability,
    two_level_evolve,
)
