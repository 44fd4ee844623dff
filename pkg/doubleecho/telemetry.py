"""Tracing setup for the CLI and the library's span helper."""

from __future__ import annotations

import logging

from opentelemetry import trace
from opentelemetry.sdk.resources import Resource
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import BatchSpanProcessor, ConsoleSpanExporter

from doubleecho import __version__
from doubleecho.config import Settings
from utils.otel_exporter import FilteringSpanExporter, StageSpanProcessor

logger = logging.getLogger(__name__)

TRACER_NAME = "doubleecho"


def get_tracer() -> trace.Tracer:
    return trace.get_tracer(TRACER_NAME, __version__)


def configure_tracing(settings: Settings, service_name: str = "doubleecho") -> TracerProvider:
    """Install a global tracer provider built from ``settings``.

    The stage processor is added first so attributes are on the span before any
    exporter sees it. Exporters are only attached when configured.
    """
    tracer_provider = TracerProvider(resource=Resource.create({"service.name": service_name}))
    tracer_provider.add_span_processor(StageSpanProcessor(service_version=__version__))

    if settings.otlp_endpoint:
        from opentelemetry.exporter.otlp.proto.http.trace_exporter import OTLPSpanExporter

        logger.info(f"Exporting spans to {settings.otlp_endpoint}")
        for key in settings.otlp_headers:
            logger.debug(f"  Header: {key}=***")
        otlp_exporter = OTLPSpanExporter(
            endpoint=settings.otlp_endpoint,
            headers=settings.otlp_headers or None,
            timeout=10,
        )
        tracer_provider.add_span_processor(
            BatchSpanProcessor(FilteringSpanExporter(otlp_exporter, settings.span_filter_patterns))
        )

    if settings.trace_console:
        tracer_provider.add_span_processor(
            BatchSpanProcessor(FilteringSpanExporter(ConsoleSpanExporter(), settings.span_filter_patterns))
        )

    trace.set_tracer_provider(tracer_provider)
    return tracer_provider
