"""Logging and tracing setup.

Logging uses the same pipe-separated format in every process. Tracing is
OpenTelemetry; spans go nowhere (no-op provider) unless
``FEDSTR_OTEL_CONSOLE_EXPORT`` is set, in which case they are printed by
the SDK console exporter.
"""

import logging

from opentelemetry import trace

from fedstr.config import settings

LOG_FORMAT = "%(asctime)s | %(name)s | %(levelname)s | %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"

_tracing_configured = False


def configure_logging(level: str | None = None) -> None:
    """Configure root logging once per process."""
    level_name = (level or settings.log_level).upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format=LOG_FORMAT,
        datefmt=LOG_DATEFMT,
    )
    # websockets logs every frame at DEBUG
    logging.getLogger("websockets").setLevel(logging.WARNING)


def configure_tracing() -> bool:
    """Install the SDK tracer provider when console export is enabled.

    Returns:
        True if spans are being exported.
    """
    global _tracing_configured
    if _tracing_configured:
        return True
    if not settings.otel_console_export:
        return False
    try:
        from opentelemetry.sdk.resources import Resource
        from opentelemetry.sdk.trace import TracerProvider
        from opentelemetry.sdk.trace.export import ConsoleSpanExporter, SimpleSpanProcessor

        provider = TracerProvider(resource=Resource.create({"service.name": "fedstr"}))
        provider.add_span_processor(SimpleSpanProcessor(ConsoleSpanExporter()))
        trace.set_tracer_provider(provider)
        _tracing_configured = True
        logging.getLogger(__name__).info("✅ OpenTelemetry console exporter enabled")
    except Exception as e:
        logging.getLogger(__name__).error("❌ Failed to initialize OpenTelemetry: %s", e)
    return _tracing_configured


def get_tracer(name: str) -> trace.Tracer:
    """Return a tracer; a no-op one unless tracing was configured."""
    return trace.get_tracer(name)
