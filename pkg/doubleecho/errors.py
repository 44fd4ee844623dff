"""Exception hierarchy shared by every DoubleEcho module."""

from __future__ import annotations

from typing import Any


class DoubleEchoError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(DoubleEchoError, ValueError):
    """An argument is out of range, or two inputs disagree (e.g. sample rates)."""


class DegenerateSignalError(DoubleEchoError):
    """A signal carries no usable energy (all zeros, silent window)."""


class TruncationError(DoubleEchoError):
    """A signal is shorter than the operation requires."""


class WavFormatError(DoubleEchoError):
    """A WAV file is malformed or uses an unsupported encoding."""


class DecayRangeError(DoubleEchoError):
    """A decay curve does not span the dB range a fit needs."""


class ClassError(DoubleEchoError):
    """A labeled set is missing one of the two classes."""


class ConfigError(DoubleEchoError):
    """A configuration document or environment value is invalid."""


class MeasurementError(DoubleEchoError):
    """The acoustic measurement of one party could not be completed."""


class ProtocolError(DoubleEchoError):
    """Base class for verification protocol failures."""


class ProtocolOrderError(ProtocolError):
    """An operation was attempted in a state that does not allow it."""


class ProtocolAbort(ProtocolError):
    """A check failed and the session moved to its terminal Aborted state.

    ``state`` holds the aborted state machine so callers can keep it.
    """

    def __init__(self, message: str, state: Any = None):
        super().__init__(message)
        self.state = state


class AuthenticationAbort(ProtocolAbort):
    """A message failed MAC verification or could not be decoded."""


class ReplayAbort(ProtocolAbort):
    """A Report echoed a nonce that is not the live session nonce."""
