"""Exception types raised across the pipeline."""


class AcctIdError(Exception):
    """Base class; ``code`` is the machine-readable name used by the CLI."""

    code = "error"

    def __init__(self, message, row=None, path=None):
        super().__init__(message)
        self.row = row
        self.path = path

    def report(self):
        out = {"error": self.code, "message": str(self)}
        if self.row is not None:
            out["row"] = self.row
        if self.path is not None:
            out["path"] = str(self.path)
        return out


class RecordError(AcctIdError):
    code = "record_error"


class MissingColumn(RecordError):
    code = "missing_column"


class NonNumericValue(RecordError):
    code = "non_numeric_value"


class NegativeAmount(NonNumericValue):
    code = "negative_amount"


class EmptyAccountId(RecordError):
    code = "empty_account_id"


class DuplicateConflictingLabel(AcctIdError):
    code = "duplicate_conflicting_label"


class SnapshotFormatError(AcctIdError):
    code = "snapshot_format"


class UnknownNode(AcctIdError):
    code = "unknown_node"


class InsufficientNegatives(AcctIdError):
    code = "insufficient_negatives"


class ResampleWithoutGraph(AcctIdError):
    code = "resample_without_graph"


class ShapeMismatch(AcctIdError):
    code = "shape_mismatch"


class NonFiniteValue(AcctIdError):
    code = "non_finite_value"


class EmptySegment(AcctIdError):
    code = "empty_segment"


class ZeroVector(AcctIdError):
    code = "zero_vector"


class EmptySplit(AcctIdError):
    code = "empty_split"


class NonFiniteLoss(AcctIdError):
    code = "non_finite_loss"


class SingleClassFold(AcctIdError):
    code = "single_class_fold"


class DegenerateLabels(AcctIdError):
    code = "degenerate_labels"


class ConfigError(AcctIdError):
    code = "config_error"
