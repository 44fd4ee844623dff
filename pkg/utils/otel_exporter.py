"""OpenTelemetry span processor and exporter used by the DoubleEcho pipeline.

This module provides:
- A span processor that stamps every pipeline span with its stage and
  deployment metadata
- Filtering of spans by regex patterns on their names
- Removal of whole subtrees below a filtered span before export
"""

import os
import re
import logging
from typing import Sequence, Dict

from opentelemetry.context import Context
from opentelemetry.sdk.trace import ReadableSpan, Span
from opentelemetry.sdk.trace.export import SpanExporter, SpanExportResult
from opentelemetry.sdk.trace import SpanProcessor

logger = logging.getLogger(__name__)


class StageSpanProcessor(SpanProcessor):
    """Span processor that annotates spans when they start.

    Span names follow ``<module>.<operation>`` (``pipeline.analyze``,
    ``protocol.decide``); the module part becomes the
    ``doubleecho.stage`` attribute so traces can be grouped by pipeline stage.
    """

    def __init__(self, service_version: str = "0.1.0"):
        self.service_version = service_version

    def on_start(self, span: Span, parent_context: Context | None = None):
        span.set_attribute("deployment.environment", os.getenv("ENVIRONMENT", "development"))
        span.set_attribute("service.version", self.service_version)
        span.set_attribute("doubleecho.stage", span.name.split(".", 1)[0])

    def on_end(self, span: ReadableSpan):
        if span.end_time and span.start_time:
            logger.debug(f"Span '{span.name}' took {(span.end_time - span.start_time) / 1_000_000:.1f} ms")

    def shutdown(self):
        pass

    def force_flush(self, timeout_millis: int = 30000):
        return True


def compile_filter_patterns(pattern_strings: list[str]) -> list[re.Pattern]:
    """Compile regex patterns, skipping (and logging) invalid ones."""
    patterns = []
    for pattern_str in pattern_strings:
        try:
            patterns.append(re.compile(pattern_str))
        except re.error as e:
            logger.warning(f"Invalid regex pattern '{pattern_str}': {e}. Skipping.")
    return patterns


def should_filter_span(span: ReadableSpan, filter_patterns: list[re.Pattern]) -> bool:
    """Check if a span should be filtered out based on regex patterns.

    Args:
        span: The span to check
        filter_patterns: List of compiled regex patterns to match against span names

    Returns:
        True if the span should be filtered out (not exported), False otherwise
    """
    for pattern in filter_patterns:
        if pattern.search(span.name):
            logger.debug(f"Filtering out span '{span.name}' (matched pattern: {pattern.pattern})")
            return True
    return False


def drop_filtered_subtrees(
    spans: Sequence[ReadableSpan],
    filtered_span_ids: set[int],
) -> list[ReadableSpan]:
    """Remove filtered spans and every descendant of them.

    Only parent links inside ``spans`` are followed; a child whose parent is in
    another export batch is kept.
    """
    if not filtered_span_ids:
        return list(spans)

    children: Dict[int, list[int]] = {}
    for span in spans:
        parent_context = span.parent
        if parent_context and parent_context.span_id:
            children.setdefault(parent_context.span_id, []).append(span.context.span_id)

    dropped = set(filtered_span_ids)
    stack = list(filtered_span_ids)
    while stack:
        current_id = stack.pop()
        for child_id in children.get(current_id, []):
            if child_id not in dropped:
                dropped.add(child_id)
                stack.append(child_id)

    return [span for span in spans if span.context.span_id not in dropped]


class FilteringSpanExporter(SpanExporter):
    """Wrapper exporter that drops filtered spans (and their subtrees) before export."""

    def __init__(self, base_exporter: SpanExporter, filter_patterns: list[str] | None = None):
        self.base_exporter = base_exporter
        self.filter_patterns = compile_filter_patterns(filter_patterns or [])

    def export(self, spans: Sequence[ReadableSpan]) -> SpanExportResult:
        filtered_span_ids = {
            span.context.span_id for span in spans if should_filter_span(span, self.filter_patterns)
        }
        kept = drop_filtered_subtrees(spans, filtered_span_ids)
        if filtered_span_ids:
            logger.debug(f"Filtered {len(spans) - len(kept)} of {len(spans)} span(s) before export")
        try:
            result = self.base_exporter.export(kept)
            if result == SpanExportResult.FAILURE:
                logger.error("Failed to export spans")
            return result
        except Exception as e:
            logger.error(f"Exception during span export: {e}", exc_info=True)
            return SpanExportResult.FAILURE

    def shutdown(self):
        return self.base_exporter.shutdown()

    def force_flush(self, timeout_millis: int = 30000):
        return self.base_exporter.force_flush(timeout_millis)
