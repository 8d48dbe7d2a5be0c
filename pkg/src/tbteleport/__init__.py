"""Models, exact oracle, simulations and fits for NV-to-telecom time-bin teleportation."""

from .analytics import (
    TeleportModelParams,
    VisibilityParams,
    classical_bound,
    fidelity_eq,
    fidelity_model,
    fidelity_pole,
    readout_fidelity,
    visibility_model,
)
from .errors import DomainError, NoHeraldError, TruncationError, UndefinedVisibilityError
from .fock import NoiseParams, teleport_oracle, teleport_state_oracle, tpqi_oracle
from .sources import CARDINAL_STATES, InputQubit, NvParams, WcsParams

__version__ = "0.1.0"
