"""Exception hierarchy. Names match the error vocabulary used in logs and CLI output."""


class NyoforgeError(Exception):
    """Base class for every error raised by the package."""


# tokenizer
class EmptyCorpus(NyoforgeError):
    pass


class TargetTooSmall(NyoforgeError):
    pass


class IdOutOfRange(NyoforgeError):
    pass


class TokenizerFormatError(NyoforgeError):
    pass


# corpus / scheduler
class NoFilesMatched(NyoforgeError):
    def __init__(self, dataset: str):
        super().__init__(f"no files matched for dataset {dataset!r}")
        self.dataset = dataset


class RankOutOfRange(NyoforgeError):
    pass


class IoFailure(NyoforgeError):
    def __init__(self, path, reason: str = ""):
        super().__init__(f"cannot read {path}: {reason}" if reason else f"cannot read {path}")
        self.path = path


class MalformedRecord(NyoforgeError):
    def __init__(self, path, line: int, reason: str = ""):
        super().__init__(f"{path}:{line}: malformed record {reason}".rstrip())
        self.path = path
        self.line = line


class AllExhausted(NyoforgeError):
    pass


class StreamStopped(NyoforgeError):
    pass


class SchemaMismatch(NyoforgeError):
    pass


class PlanMismatch(NyoforgeError):
    pass


# model
class BadConfig(NyoforgeError):
    pass


class OddHeadDim(NyoforgeError):
    pass


class LengthExceedsContext(NyoforgeError):
    pass


class AllMasked(NyoforgeError):
    pass


class TraceMismatch(NyoforgeError):
    pass


class TraceMissing(NyoforgeError):
    pass


# trainer / sft
class NonFiniteGradient(NyoforgeError):
    pass


class ShapeMismatch(NyoforgeError):
    pass


class VocabMismatch(NyoforgeError):
    pass


class CheckpointCorrupt(NyoforgeError):
    pass


class CheckpointIncompatible(NyoforgeError):
    pass


class TooLong(NyoforgeError):
    pass


class ConfigError(NyoforgeError):
    pass
