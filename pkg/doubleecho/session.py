"""One verification session as a LangGraph workflow.

start → measure → respond → decide, with an edge to END as soon as a step
aborts. Testbed scenarios (benign, relay, context manipulation) are wired
here for the demo command and the scenario tests.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Literal

from typing_extensions import TypedDict

from langgraph.graph import END, StateGraph
from langgraph.runtime import Runtime

from doubleecho.classifier import ForestHyperparameters, ForestModel, fit_model
from doubleecho.config import SESSION_KEY_BYTES, derive_seed
from doubleecho.errors import MeasurementError, ProtocolAbort, ReplayAbort
from doubleecho.pipeline import dataset_samples
from doubleecho.protocol import (
    AcousticEnvironment,
    InProcessTransport,
    ProverState,
    TranscriptEntry,
    VerifierPhase,
    VerifierState,
    abort_state,
    manipulate_context,
    prover_receive_decision,
    prover_receive_start,
    prover_respond,
    run_measurement,
    start_session,
    verifier_decide,
    verifier_record,
)
from doubleecho.signal import AudioSignal, SweepSpec
from doubleecho.simulator import (
    COPRESENT,
    NON_COPRESENT,
    DatasetConfig,
    RoomModel,
    default_room_corpus,
    device_pool,
    generate_dataset,
    room_layout,
)
from doubleecho.telemetry import get_tracer

logger = logging.getLogger(__name__)

Scenario = Literal["benign", "relay", "manipulate"]
SCENARIOS: tuple[Scenario, ...] = ("benign", "relay", "manipulate")
DISSIMILAR_VOLUME_RATIO = 1.5


class SessionContext(TypedDict):
    """Fixed inputs of a session."""
    model: ForestModel
    spec: SweepSpec
    verifier_env: AcousticEnvironment | None
    prover_env: AcousticEnvironment | None
    transport: InProcessTransport
    entropy_seed: int | None


@dataclass
class SessionState:
    """Both parties' protocol states plus what is in flight between the steps."""
    verifier: VerifierState
    prover: ProverState
    prover_recording: AudioSignal | None = None
    report: bytes | None = None
    abort_reason: str | None = None
    abort_kind: str | None = None


def _aborted(error: Exception, kind: str, **states: Any) -> Dict[str, Any]:
    logger.info(f"Session aborted ({kind}): {error}")
    return {"abort_reason": str(error), "abort_kind": kind, **states}


def _abort_kind(error: ProtocolAbort) -> str:
    return "replay" if isinstance(error, ReplayAbort) else "authentication"


def _measurement_failed(state: SessionState, error: MeasurementError) -> Dict[str, Any]:
    reason = str(error)
    return _aborted(
        error,
        "measurement",
        verifier=abort_state(state.verifier, reason),
        prover=abort_state(state.prover, reason),
        prover_recording=None,
    )


def start(state: SessionState, runtime: Runtime[SessionContext]) -> Dict[str, Any]:
    with get_tracer().start_as_current_span("protocol.start"):
        ctx = runtime.context
        verifier, message = start_session(state.verifier, ctx["entropy_seed"], ctx["spec"])
        delivered = ctx["transport"].send("verifier", "prover", message)
        try:
            prover = prover_receive_start(state.prover, delivered)
        except ProtocolAbort as e:
            return _aborted(e, _abort_kind(e), verifier=abort_state(verifier, str(e)), prover=e.state)
        return {"verifier": verifier, "prover": prover}


def measure(state: SessionState, runtime: Runtime[SessionContext]) -> Dict[str, Any]:
    with get_tracer().start_as_current_span("protocol.measure"):
        ctx = runtime.context
        try:
            verifier_recording = run_measurement("verifier", ctx["verifier_env"], state.verifier.spec)
            verifier = verifier_record(state.verifier, verifier_recording)
            prover_recording = run_measurement("prover", ctx["prover_env"], state.prover.spec)
        except MeasurementError as e:
            return _measurement_failed(state, e)
        return {"verifier": verifier, "prover_recording": prover_recording}


def respond(state: SessionState, runtime: Runtime[SessionContext]) -> Dict[str, Any]:
    with get_tracer().start_as_current_span("protocol.respond"):
        try:
            prover, message = prover_respond(state.prover, state.prover_recording)
        except MeasurementError as e:
            return _measurement_failed(state, e)
        delivered = runtime.context["transport"].send("prover", "verifier", message)
        return {"prover": prover, "report": delivered, "prover_recording": None}


def decide(state: SessionState, runtime: Runtime[SessionContext]) -> Dict[str, Any]:
    with get_tracer().start_as_current_span("protocol.decide"):
        ctx = runtime.context
        try:
            verifier, message = verifier_decide(state.verifier, state.report, ctx["model"])
        except ProtocolAbort as e:
            return _aborted(e, _abort_kind(e), verifier=e.state)
        delivered = ctx["transport"].send("verifier", "prover", message)
        try:
            prover = prover_receive_decision(state.prover, delivered)
        except ProtocolAbort as e:
            return _aborted(e, _abort_kind(e), verifier=verifier, prover=e.state)
        return {"verifier": verifier, "prover": prover}


def _continue_unless_aborted(next_node: str):
    def route(state: SessionState) -> str:
        return END if state.abort_reason else next_node
    return route


# Define the graph
graph = (
    StateGraph(SessionState, context_schema=SessionContext)
    .add_node(start)
    .add_node(measure)
    .add_node(respond)
    .add_node(decide)
    .add_edge("__start__", "start")
    .add_conditional_edges("start", _continue_unless_aborted("measure"), ["measure", END])
    .add_conditional_edges("measure", _continue_unless_aborted("respond"), ["respond", END])
    .add_conditional_edges("respond", _continue_unless_aborted("decide"), ["decide", END])
    .add_edge("decide", END)
    .compile()
)


@dataclass(frozen=True)
class SessionOutcome:
    verifier: VerifierState
    prover: ProverState
    transcript: List[TranscriptEntry]
    abort_reason: str | None = None
    abort_kind: str | None = None

    @property
    def copresent(self) -> bool | None:
        return self.verifier.copresent

    @property
    def score(self) -> float | None:
        return self.verifier.score

    @property
    def aborted(self) -> bool:
        return self.verifier.phase == VerifierPhase.ABORTED

    def to_dict(self) -> Dict[str, Any]:
        verdict = None
        if self.copresent is not None:
            verdict = COPRESENT if self.copresent else NON_COPRESENT
        return {
            "verdict": verdict,
            "score": self.score,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "abort_kind": self.abort_kind,
            "verifier_phase": str(self.verifier.phase),
            "prover_phase": str(self.prover.phase),
            "prover_verdict_received": self.prover.copresent is not None,
            "transcript": [asdict(entry) for entry in self.transcript],
        }


def run_session(
    key: bytes,
    model: ForestModel,
    verifier_env: AcousticEnvironment | None,
    prover_env: AcousticEnvironment | None,
    spec: SweepSpec | None = None,
    transport: InProcessTransport | None = None,
    entropy_seed: int | None = None,
) -> SessionOutcome:
    """Run one session to a verdict or an abort."""
    transport = transport or InProcessTransport()
    context: SessionContext = {
        "model": model,
        "spec": spec or SweepSpec(),
        "verifier_env": verifier_env,
        "prover_env": prover_env,
        "transport": transport,
        "entropy_seed": entropy_seed,
    }
    result = graph.invoke(
        {
            "verifier": VerifierState(key),
            "prover": ProverState(key),
            "prover_recording": None,
            "report": None,
            "abort_reason": None,
            "abort_kind": None,
        },
        context=context,
    )
    return SessionOutcome(
        verifier=result["verifier"],
        prover=result["prover"],
        transcript=list(transport.transcript),
        abort_reason=result.get("abort_reason"),
        abort_kind=result.get("abort_kind"),
    )


def demo_key(seed: int) -> bytes:
    """Deterministic pre-shared key for testbed runs without a configured key."""
    return hashlib.sha256(f"doubleecho-demo-key-{seed}".encode()).digest()[:SESSION_KEY_BYTES]


def demo_rooms(seed: int, corpus_size: int = 20) -> tuple[RoomModel, RoomModel]:
    """Two seeded rooms whose volumes differ by at least 1.5x."""
    corpus = default_room_corpus(corpus_size, derive_seed(seed, 7))
    home = corpus[0]
    for room in corpus[1:]:
        ratio = max(room.volume, home.volume) / min(room.volume, home.volume)
        if ratio >= DISSIMILAR_VOLUME_RATIO:
            return home, room
    return home, max(corpus[1:], key=lambda room: abs(room.volume - home.volume))


def scenario_environments(scenario: Scenario, seed: int) -> tuple[AcousticEnvironment, AcousticEnvironment]:
    """Verifier and prover surroundings for one testbed scenario.

    benign: both parties in one room within half a meter of the speaker.
    relay: the prover sits in a quiet far room; messages are only relayed.
    manipulate: the prover sits in a far room where an adversary plays the clip.
    """
    home, far = demo_rooms(seed)
    config = DatasetConfig(rooms=(home, far), devices_per_room=2, seed=seed)
    home_layout = room_layout(home, config, 0, 0)
    far_layout = room_layout(far, config, 1, 0)
    pool = device_pool(config.device_pool, seed)

    verifier = AcousticEnvironment(home, home_layout[0], pool[0], seed=derive_seed(seed, 0))
    if scenario == "benign":
        return verifier, AcousticEnvironment(home, home_layout[1], pool[1], seed=derive_seed(seed, 1))
    prover = AcousticEnvironment(far, far_layout[1], pool[1], seed=derive_seed(seed, 1), emits=False)
    if scenario == "relay":
        return verifier, prover
    if scenario == "manipulate":
        return manipulate_context(verifier, prover)
    raise ValueError(f"unknown scenario {scenario!r}")


def demo_model(
    seed: int,
    room_count: int = 8,
    sessions_per_room: int = 2,
    hp: ForestHyperparameters = ForestHyperparameters(),
    n_jobs: int = 1,
) -> ForestModel:
    """A model trained on a small seeded corpus, for demos run without a model file."""
    config = DatasetConfig(
        rooms=tuple(default_room_corpus(room_count, seed)),
        sessions_per_room=sessions_per_room,
        seed=seed,
    )
    samples, _ = dataset_samples(generate_dataset(config, n_jobs), n_jobs=n_jobs)
    logger.info(f"Training demo model on {len(samples)} pairs")
    return fit_model(samples, hp, seed, n_jobs)
