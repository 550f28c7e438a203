"""Exception hierarchy shared by every stage of the pipeline.

Each family carries the exit code the command line reports for it.
"""


class FlowSemError(Exception):
    exit_code = 1


# Configuration
class ConfigError(FlowSemError):
    exit_code = 2


# Parsing of captures, headers and spec files
class ParseError(FlowSemError):
    exit_code = 2


class UnsupportedMagic(ParseError):
    pass


class TruncatedRecord(ParseError):
    pass


class UnsupportedLinkType(ParseError):
    pass


class MalformedHeader(ParseError):
    pass


class BadSpec(ParseError):
    pass


# Data contracts
class DataError(FlowSemError):
    exit_code = 2


class EmptyFlow(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class ClassTooSmall(DataError):
    pass


class EmptyMaskSet(DataError):
    pass


class EmptyMatrix(DataError):
    pass


class UnlabeledData(DataError):
    pass


class InsufficientSamples(DataError):
    pass


class LengthMismatch(DataError):
    pass


class BadHyper(DataError):
    pass


class NonFiniteDetected(DataError):
    pass


class AnonymizationCollision(DataError):
    pass


# Persisted artifacts
class StorageError(FlowSemError):
    exit_code = 3


class BadMagic(StorageError):
    pass


class Corrupt(StorageError):
    pass


class SchemaMismatch(FlowSemError):
    exit_code = 4
