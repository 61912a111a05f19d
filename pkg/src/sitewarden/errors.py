"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class SitewardenError(Exception):
    """Base class for all errors raised by this package."""


# ingest
class UnreadableVideo(SitewardenError):
    pass


class InvalidRate(SitewardenError):
    pass


class TimeOutOfRange(SitewardenError):
    pass


class FrameNameError(SitewardenError):
    """Raised when a frame directory holds files whose names do not parse."""

    def __init__(self, bad_names: list[str]):
        self.bad_names = list(bad_names)
        listing = ", ".join(self.bad_names)
        super().__init__(f"{len(self.bad_names)} frame file(s) have unparseable names: {listing}")


# inference
class BackendError(SitewardenError):
    pass


class BackendUnreachable(BackendError):
    pass


class ModelNotFound(BackendError):
    pass


class CassetteMiss(BackendError):
    pass


class ScriptExhausted(BackendError):
    pass


class ImageNotFound(SitewardenError):
    pass


class InvalidRequest(SitewardenError):
    pass


# regstore
class InvalidCorpus(SitewardenError):
    pass


class InvalidParams(SitewardenError):
    pass


class EmptyText(SitewardenError):
    pass


class DimensionMismatch(SitewardenError):
    pass


# perception
class EmptyTemplate(SitewardenError):
    pass


class EmptyReply(SitewardenError):
    pass


# rulegen
class EmptyDescription(SitewardenError):
    pass


class RuleParseError(SitewardenError):
    """The rule-generation reply did not follow the required format.

    ``raw_text`` keeps the unparsed reply so it can be written to the ledger.
    """

    def __init__(self, message: str, raw_text: str | None = None):
        super().__init__(message)
        self.raw_text = raw_text


class MissingHeader(RuleParseError):
    def __init__(self, which: str, raw_text: str | None = None):
        super().__init__(f"missing header for {which} rules", raw_text)
        self.which = which


class WrongRuleCount(RuleParseError):
    def __init__(self, polarity: str, found: int, raw_text: str | None = None):
        super().__init__(f"expected 2 {polarity} rules, found {found}", raw_text)
        self.polarity = polarity
        self.found = found


# assess
class VerdictParseError(SitewardenError):
    """``kind`` is ``"missing-line"`` or ``"bad-label"``."""

    def __init__(self, kind: str, message: str, raw_text: str | None = None):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.raw_text = raw_text


# report
class InvalidStage(SitewardenError):
    pass


class InvalidLabel(SitewardenError):
    pass


class UnsortedTimeline(SitewardenError):
    pass


class TemplateInvalid(SitewardenError):
    pass


# evalkit
class KeyMismatch(SitewardenError):
    def __init__(self, missing_in_predictions: list, missing_in_truth: list):
        self.missing_in_predictions = list(missing_in_predictions)
        self.missing_in_truth = list(missing_in_truth)
        super().__init__(
            f"frame ids differ: {len(self.missing_in_predictions)} missing from predictions "
            f"{self.missing_in_predictions[:10]}, {len(self.missing_in_truth)} missing from truth "
            f"{self.missing_in_truth[:10]}"
        )


class EmptyMatrix(SitewardenError):
    pass


# orchestrator
class ConfigError(SitewardenError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid run config: " + "; ".join(self.violations))
