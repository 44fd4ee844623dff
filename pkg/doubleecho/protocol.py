"""Two-party copresence verification protocol.

Step 1: the verifier sends Start (nonce + sweep spec). Step 2: both parties
play/record. Step 3: the prover returns Report (echoed nonce + its feature
vector). Step 4: the verifier checks MAC and nonce, classifies the pair and
sends Decision. Every message carries an HMAC-SHA256 tag over its bytes.

State machines are immutable dataclasses; each step returns a new state. A
failed check raises a ``ProtocolAbort`` whose ``state`` is the Aborted state.
"""

from __future__ import annotations

import dataclasses
import hashlib
import hmac
import logging
import math
import secrets
import struct
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import IntEnum, StrEnum
from typing import Literal, Union

import numpy as np

from doubleecho.classifier import FEATURE_COUNT, ForestModel, pair_features, predict
from doubleecho.config import SESSION_KEY_BYTES
from doubleecho.errors import (
    AuthenticationAbort,
    DegenerateSignalError,
    MeasurementError,
    ParameterError,
    ProtocolAbort,
    ProtocolOrderError,
    ReplayAbort,
    TruncationError,
)
from doubleecho.pipeline import analyze_recording
from doubleecho.signal import AudioSignal, SweepSpec, generate_sweep
from doubleecho.simulator import DeviceProfile, Placement, RoomModel, simulate_recording

logger = logging.getLogger(__name__)

MAGIC = b"DE"
VERSION = 0x01
NONCE_BYTES = 16
MAC_BYTES = 32
HEADER = struct.Struct(">2sBBI")

# RMS below which a recording is taken to contain no emission.
MIN_RECORDING_RMS = 1e-3
AMBIENT_NOISE_RMS = 1e-4

Role = Literal["verifier", "prover"]


class MessageType(IntEnum):
    START = 1
    REPORT = 2
    DECISION = 3


@dataclass(frozen=True)
class Start:
    nonce: bytes
    sweep: SweepSpec


@dataclass(frozen=True)
class Report:
    nonce: bytes
    features: tuple[float, ...]


@dataclass(frozen=True)
class Decision:
    copresent: bool


Message = Union[Start, Report, Decision]


def _check_key(key: bytes) -> None:
    if len(key) != SESSION_KEY_BYTES:
        raise ParameterError(f"session key must be {SESSION_KEY_BYTES} bytes, got {len(key)}")


def _payload(message: Message) -> tuple[MessageType, bytes]:
    if isinstance(message, Start):
        return MessageType.START, message.nonce + struct.pack(">7d", *message.sweep.as_tuple())
    if isinstance(message, Report):
        return MessageType.REPORT, message.nonce + struct.pack(f">{FEATURE_COUNT}d", *message.features)
    if isinstance(message, Decision):
        return MessageType.DECISION, bytes([1 if message.copresent else 0])
    raise ParameterError(f"not a protocol message: {message!r}")


def encode(message: Message, key: bytes) -> bytes:
    """Canonical wire bytes: magic, version, type, length, payload, MAC over all of it."""
    _check_key(key)
    msg_type, payload = _payload(message)
    body = HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload
    return body + hmac.new(key, body, hashlib.sha256).digest()


def decode(data: bytes, key: bytes) -> Message:
    """Verify the MAC, then parse. Any failure is an authentication abort."""
    _check_key(key)
    if len(data) < HEADER.size + MAC_BYTES:
        raise AuthenticationAbort("message too short")
    body, tag = data[:-MAC_BYTES], data[-MAC_BYTES:]
    if not hmac.compare_digest(tag, hmac.new(key, body, hashlib.sha256).digest()):
        raise AuthenticationAbort("MAC verification failed")

    magic, version, msg_type, length = HEADER.unpack_from(body)
    payload = body[HEADER.size:]
    if magic != MAGIC or version != VERSION or length != len(payload):
        raise AuthenticationAbort("malformed message header")
    try:
        if msg_type == MessageType.START and length == NONCE_BYTES + 7 * 8:
            values = struct.unpack(">7d", payload[NONCE_BYTES:])
            return Start(payload[:NONCE_BYTES], SweepSpec.from_tuple(values))
        if msg_type == MessageType.REPORT and length == NONCE_BYTES + FEATURE_COUNT * 8:
            values = struct.unpack(f">{FEATURE_COUNT}d", payload[NONCE_BYTES:])
            if not all(math.isfinite(v) for v in values):
                raise ParameterError("non-finite feature value")
            return Report(payload[:NONCE_BYTES], values)
        if msg_type == MessageType.DECISION and length == 1 and payload[0] in (0, 1):
            return Decision(payload[0] == 1)
    except (ParameterError, struct.error) as e:
        raise AuthenticationAbort(f"undecodable payload: {e}") from e
    raise AuthenticationAbort(f"undecodable message of type {msg_type}")


def message_kind(data: bytes) -> str:
    """Name of the message type in the header, without verifying anything."""
    try:
        return MessageType(data[3]).name.capitalize()
    except (IndexError, ValueError):
        return "Unknown"


def new_nonce(entropy_seed: int | None = None) -> bytes:
    if entropy_seed is None:
        return secrets.token_bytes(NONCE_BYTES)
    return np.random.default_rng(entropy_seed).bytes(NONCE_BYTES)


class VerifierPhase(StrEnum):
    IDLE = "idle"
    AWAITING_REPORT = "awaiting_report"
    DONE = "done"
    ABORTED = "aborted"


class ProverPhase(StrEnum):
    AWAITING_START = "awaiting_start"
    RECORDING = "recording"
    DONE = "done"
    ABORTED = "aborted"


@dataclass(frozen=True)
class VerifierState:
    key: bytes = field(repr=False)
    phase: VerifierPhase = VerifierPhase.IDLE
    nonce: bytes | None = None
    spec: SweepSpec | None = None
    local_features: tuple[float, ...] | None = None
    copresent: bool | None = None
    score: float | None = None
    abort_reason: str | None = None

    def __post_init__(self):
        _check_key(self.key)


@dataclass(frozen=True)
class ProverState:
    key: bytes = field(repr=False)
    phase: ProverPhase = ProverPhase.AWAITING_START
    nonce: bytes | None = None
    spec: SweepSpec | None = None
    copresent: bool | None = None
    abort_reason: str | None = None

    def __post_init__(self):
        _check_key(self.key)


def abort_state(state: VerifierState | ProverState, reason: str) -> VerifierState | ProverState:
    """The terminal Aborted state for ``state``. Aborted stays aborted."""
    if state.phase == "aborted":
        return state
    logger.warning(f"{type(state).__name__} aborted: {reason}")
    return dataclasses.replace(state, phase=type(state.phase)("aborted"), abort_reason=reason)


def _abort(state, error_type: type[ProtocolAbort], reason: str) -> ProtocolAbort:
    return error_type(reason, state=abort_state(state, reason))


def start_session(
    state: VerifierState,
    entropy_seed: int | None = None,
    spec: SweepSpec | None = None,
) -> tuple[VerifierState, bytes]:
    """Step 1: fresh nonce, Start message, Idle → AwaitingReport."""
    if state.phase != VerifierPhase.IDLE:
        raise ProtocolOrderError(f"start_session needs an idle verifier, state is {state.phase}")
    spec = spec or SweepSpec()
    nonce = new_nonce(entropy_seed)
    message = encode(Start(nonce, spec), state.key)
    logger.info("Verifier started a session")
    return dataclasses.replace(state, phase=VerifierPhase.AWAITING_REPORT, nonce=nonce, spec=spec), message


def prover_receive_start(state: ProverState, data: bytes) -> ProverState:
    if state.phase != ProverPhase.AWAITING_START:
        raise ProtocolOrderError(f"prover is not awaiting Start, state is {state.phase}")
    try:
        message = decode(data, state.key)
    except AuthenticationAbort as e:
        raise _abort(state, AuthenticationAbort, str(e)) from e
    if not isinstance(message, Start):
        raise _abort(state, AuthenticationAbort, f"expected Start, got {type(message).__name__}")
    return dataclasses.replace(state, phase=ProverPhase.RECORDING, nonce=message.nonce, spec=message.sweep)


@dataclass(frozen=True, eq=False)
class AcousticEnvironment:
    """One party's surroundings in the testbed.

    ``emits`` says whether the clip is audible there; ``clip`` replaces the
    session excitation with whatever an adversary plays.
    """

    room: RoomModel
    placement: Placement
    device: DeviceProfile
    seed: int = 0
    emits: bool = True
    clip: AudioSignal | None = None

    def record(self, excitation: AudioSignal) -> AudioSignal:
        if not self.emits:
            rng = np.random.default_rng(self.seed)
            return AudioSignal(rng.normal(0.0, AMBIENT_NOISE_RMS, len(excitation)), excitation.sample_rate)
        played = self.clip if self.clip is not None else excitation
        return simulate_recording(self.room, self.placement, played, self.device, self.seed)


def run_measurement(role: Role, environment: AcousticEnvironment | None, spec: SweepSpec) -> AudioSignal:
    """Step 2 for one party: the recording its environment yields while the sweep plays."""
    if environment is None:
        raise MeasurementError(f"{role} has no acoustic environment")
    recording = environment.record(generate_sweep(spec))
    rms = float(np.sqrt(np.mean(recording.samples**2))) if len(recording) else 0.0
    if rms < MIN_RECORDING_RMS:
        raise MeasurementError(f"{role} recording RMS {rms:.2e} is below {MIN_RECORDING_RMS:.0e}; no emission heard")
    logger.debug(f"{role} recorded {len(recording)} samples at RMS {rms:.3e}")
    return recording


def _features_of(recording: AudioSignal, spec: SweepSpec, role: Role) -> tuple[float, ...]:
    try:
        analysis = analyze_recording(recording, generate_sweep(spec), spec)
    except (DegenerateSignalError, TruncationError) as e:
        raise MeasurementError(f"{role} measurement failed: {e}") from e
    return tuple(analysis.features.to_list())


def verifier_record(state: VerifierState, recording: AudioSignal) -> VerifierState:
    """Step 2, verifier side: keep the local feature vector for the decision."""
    if state.phase != VerifierPhase.AWAITING_REPORT:
        raise ProtocolOrderError(f"verifier is not measuring, state is {state.phase}")
    return dataclasses.replace(state, local_features=_features_of(recording, state.spec, "verifier"))


def prover_respond(state: ProverState, recording: AudioSignal) -> tuple[ProverState, bytes]:
    """Step 3: features of the prover's recording with the echoed nonce."""
    if state.phase != ProverPhase.RECORDING:
        raise ProtocolOrderError(f"prover holds no Start, state is {state.phase}")
    features = _features_of(recording, state.spec, "prover")
    message = encode(Report(state.nonce, features), state.key)
    return dataclasses.replace(state, phase=ProverPhase.DONE), message


def verifier_decide(state: VerifierState, data: bytes, model: ForestModel) -> tuple[VerifierState, bytes]:
    """Step 4: MAC check, nonce check, then classification."""
    if state.phase != VerifierPhase.AWAITING_REPORT or state.local_features is None:
        raise ProtocolOrderError(f"verifier cannot decide in state {state.phase} without a local measurement")
    try:
        message = decode(data, state.key)
    except AuthenticationAbort as e:
        raise _abort(state, AuthenticationAbort, str(e)) from e
    if not isinstance(message, Report):
        raise _abort(state, AuthenticationAbort, f"expected Report, got {type(message).__name__}")
    if not hmac.compare_digest(message.nonce, state.nonce):
        raise _abort(state, ReplayAbort, "Report nonce does not match the session nonce")

    prediction = predict(model, pair_features(state.local_features, message.features))
    logger.info(f"Verifier decided {prediction.verdict} (score {prediction.score:.3f})")
    decided = dataclasses.replace(
        state, phase=VerifierPhase.DONE, copresent=prediction.copresent, score=prediction.score
    )
    return decided, encode(Decision(prediction.copresent), state.key)


def prover_receive_decision(state: ProverState, data: bytes) -> ProverState:
    if state.phase != ProverPhase.DONE or state.copresent is not None:
        raise ProtocolOrderError(f"prover is not awaiting a Decision, state is {state.phase}")
    try:
        message = decode(data, state.key)
    except AuthenticationAbort as e:
        raise _abort(state, AuthenticationAbort, str(e)) from e
    if not isinstance(message, Decision):
        raise _abort(state, AuthenticationAbort, f"expected Decision, got {type(message).__name__}")
    return dataclasses.replace(state, copresent=message.copresent)


Hook = Callable[[bytes], bytes]


def relay(msg: bytes) -> bytes:
    """Forward a message unchanged between parties that are far apart."""
    return msg


def manipulate_context(
    room_a: AcousticEnvironment,
    room_b: AcousticEnvironment,
    clip: AudioSignal | None = None,
) -> tuple[AcousticEnvironment, AcousticEnvironment]:
    """Make the identical clip audible in both environments."""
    return (
        dataclasses.replace(room_a, emits=True, clip=clip),
        dataclasses.replace(room_b, emits=True, clip=clip),
    )


@dataclass(frozen=True)
class TranscriptEntry:
    sender: Role
    receiver: Role
    kind: str
    hex: str


class InProcessTransport:
    """Delivers messages through a chain of hooks and logs what was delivered."""

    def __init__(self, hooks: list[Hook] | None = None):
        self.hooks = list(hooks or [])
        self.transcript: list[TranscriptEntry] = []

    def send(self, sender: Role, receiver: Role, data: bytes) -> bytes:
        for hook in self.hooks:
            data = hook(data)
        self.transcript.append(TranscriptEntry(sender, receiver, message_kind(data), data.hex()))
        logger.debug(f"{sender} -> {receiver}: {message_kind(data)} ({len(data)} bytes)")
        return data
