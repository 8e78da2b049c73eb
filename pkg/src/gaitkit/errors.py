"""Exception hierarchy. Every domain failure derives from GaitError so the CLI
can map it to exit code 1; anything else is a bug."""


class GaitError(Exception):
    """Base class for all domain errors raised by gaitkit."""


# --- core / manifest ---------------------------------------------------------

class MalformedKey(GaitError):
    pass


class InvalidCondition(GaitError):
    pass


class InvalidView(GaitError):
    pass


class InvalidTrial(GaitError):
    pass


class UnknownModality(GaitError):
    pass


class RootNotFound(GaitError):
    pass


class DuplicateKey(GaitError):
    pass


# --- synthgen ----------------------------------------------------------------

class EmptyRender(GaitError):
    pass


class DiskWriteError(GaitError):
    pass


# --- preprocess --------------------------------------------------------------

class EmptyCloud(GaitError):
    pass


class AllFramesEmpty(GaitError):
    pass


# --- model -------------------------------------------------------------------

class ShapeMismatch(GaitError):
    pass


class UnsupportedModality(GaitError):
    pass


class EmptyInput(GaitError):
    pass


class IndivisibleHeight(GaitError):
    pass


class WrongVariant(GaitError):
    pass


class SameModalityPair(GaitError):
    pass


# --- losses ------------------------------------------------------------------

class LabelOutOfRange(GaitError):
    pass


# --- trainer -----------------------------------------------------------------

class TooFewIdentities(GaitError):
    pass


class MissingModality(GaitError):
    pass


class NonFiniteLoss(GaitError):
    pass


class CorruptCheckpoint(GaitError):
    pass


class ConfigMismatch(GaitError):
    pass


# --- evalproto ---------------------------------------------------------------

class EmptyGallery(GaitError):
    pass


class AllPairsMissing(GaitError):
    pass


class ProtocolError(GaitError):
    pass


# --- cli ---------------------------------------------------------------------

class ConfigKeyError(GaitError):
    """Unknown or ill-typed config key; mapped to a usage error (exit 2)."""


class OutputDirLocked(GaitError):
    pass
