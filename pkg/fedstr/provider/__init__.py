"""Service-provider side: configuration and the job-serving daemon."""

from fedstr.provider.config import FaultInjection, ProviderConfig
from fedstr.provider.daemon import JobSession, ProviderDaemon, SessionPhase

__all__ = ["FaultInjection", "JobSession", "ProviderConfig", "ProviderDaemon", "SessionPhase"]
