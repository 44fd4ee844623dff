from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import SimpleSpanProcessor, SpanExportResult
from opentelemetry.sdk.trace.export.in_memory_span_exporter import InMemorySpanExporter

from utils.otel_exporter import (
    FilteringSpanExporter,
    StageSpanProcessor,
    compile_filter_patterns,
    drop_filtered_subtrees,
    should_filter_span,
)


def _provider(*processors) -> TracerProvider:
    provider = TracerProvider()
    for processor in processors:
        provider.add_span_processor(processor)
    return provider


def _record_session_spans(provider: TracerProvider) -> None:
    tracer = provider.get_tracer("test")
    with tracer.start_as_current_span("protocol.measure"):
        with tracer.start_as_current_span("simulator.simulate_recording"):
            with tracer.start_as_current_span("pipeline.analyze"):
                pass
        with tracer.start_as_current_span("pipeline.analyze"):
            pass


def test_stage_processor_stamps_stage_and_version(monkeypatch):
    monkeypatch.setenv("ENVIRONMENT", "ci")
    memory = InMemorySpanExporter()
    provider = _provider(StageSpanProcessor(service_version="9.9.9"), SimpleSpanProcessor(memory))
    with provider.get_tracer("test").start_as_current_span("classifier.cross_validate"):
        pass
    (span,) = memory.get_finished_spans()
    assert span.attributes["doubleecho.stage"] == "classifier"
    assert span.attributes["service.version"] == "9.9.9"
    assert span.attributes["deployment.environment"] == "ci"


def test_invalid_patterns_are_skipped():
    patterns = compile_filter_patterns(["^pipeline\\.", "(unclosed"])
    assert [p.pattern for p in patterns] == ["^pipeline\\."]


def test_filtered_span_takes_its_subtree_with_it():
    memory = InMemorySpanExporter()
    _record_session_spans(_provider(SimpleSpanProcessor(memory)))
    spans = memory.get_finished_spans()
    patterns = compile_filter_patterns(["^simulator\\."])
    filtered = {s.context.span_id for s in spans if should_filter_span(s, patterns)}
    kept = drop_filtered_subtrees(spans, filtered)
    assert sorted(s.name for s in kept) == ["pipeline.analyze", "protocol.measure"]


def test_nothing_filtered_keeps_every_span():
    memory = InMemorySpanExporter()
    _record_session_spans(_provider(SimpleSpanProcessor(memory)))
    spans = memory.get_finished_spans()
    assert len(drop_filtered_subtrees(spans, set())) == 4


def test_filtering_exporter_forwards_kept_spans():
    memory = InMemorySpanExporter()
    source = InMemorySpanExporter()
    _record_session_spans(_provider(SimpleSpanProcessor(source)))
    exporter = FilteringSpanExporter(memory, ["^protocol\\."])
    assert exporter.export(source.get_finished_spans()) == SpanExportResult.SUCCESS
    assert memory.get_finished_spans() == ()


class _BrokenExporter(InMemorySpanExporter):
    def export(self, spans):
        raise RuntimeError("collector unreachable")


def test_filtering_exporter_reports_failure_instead_of_raising():
    source = InMemorySpanExporter()
    _record_session_spans(_provider(SimpleSpanProcessor(source)))
    exporter = FilteringSpanExporter(_BrokenExporter())
    assert exporter.export(source.get_finished_spans()) == SpanExportResult.FAILURE
