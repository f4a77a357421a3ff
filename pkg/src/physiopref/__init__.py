"""Energy-gap weighted preference optimization on exactly solvable lattice proteins."""

__version__ = "0.1.0"

from .seqcore import Alphabet, CapabilityError, Sequence, UsageError, get_alphabet  # noqa: E402
from .oracle import FoldReport, LatticeOracle, SurrogateOracle, fold, is_foldable  # noqa: E402
from .policy import PolicyConfig, PolicyModel  # noqa: E402
from .objectives import PhysioParams, dpo_loss, physio_loss, psi  # noqa: E402
from .trainer import TrainConfig, train  # noqa: E402

__all__ = [
    "Alphabet", "CapabilityError", "FoldReport", "LatticeOracle", "PhysioParams", "PolicyConfig",
    "PolicyModel", "Sequence", "SurrogateOracle", "TrainConfig", "UsageError", "__version__",
    "dpo_loss", "fold", "get_alphabet", "is_foldable", "physio_loss", "psi", "train",
]
