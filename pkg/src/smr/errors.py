"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SmrError(Exception):
    """Base class for every error this package raises on purpose."""


class CorpusError(SmrError):
    """Corpus or embedding input could not be loaded or indexed."""


class UnknownDocumentError(SmrError):
    """A doc_id was referenced that the corpus does not contain."""


class TransportError(SmrError):
    """Network-level failure talking to an endpoint, after retries."""


class EndpointConfigError(SmrError):
    """The endpoint rejected the request (4xx): bad key, model, or URL."""


class ScriptExhaustedError(SmrError):
    """A scripted backend ran out of canned responses."""


class DecisionParseError(SmrError):
    """Backend output could not be interpreted as a valid decision."""


class TraceFormatError(SmrError):
    """A trace file line did not match the expected record shapes."""


class AlignmentError(SmrError):
    """The alignment judge never produced a parseable score."""


class ConfigError(SmrError):
    """A run configuration file is missing, malformed, or inconsistent."""
