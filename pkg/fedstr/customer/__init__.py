"""Customer side: provider discovery, job orchestration and the training graph."""

from fedstr.customer.config import CustomerConfig, OuterMode, ValidationPolicy
from fedstr.customer.graph import TrainingResult, build_training_graph, run_training
from fedstr.customer.orchestrator import Customer, Reassignment, discover_providers
from fedstr.customer.state import Assignment, Phase, RoundState, TrainingState, can_transition

__all__ = [
    "Assignment",
    "Customer",
    "CustomerConfig",
    "OuterMode",
    "Phase",
    "Reassignment",
    "RoundState",
    "TrainingResult",
    "TrainingState",
    "ValidationPolicy",
    "build_training_graph",
    "can_transition",
    "discover_providers",
    "run_training",
]
