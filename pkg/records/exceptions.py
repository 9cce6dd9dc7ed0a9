class RecordsError(ValueError):
    """Base class for ingestion and normalization failures."""


class SchemaError(RecordsError):
    """State schema is malformed or references columns the source lacks."""


class UnreadableSourceError(RecordsError):
    """Source file cannot be opened or decoded."""


class RecordRejected(RecordsError):
    """A row that cannot be normalized and goes to the error sink."""


class AmbiguousDateError(RecordRejected):
    """Date with a two-digit year."""


class SurnameTableMissing(RecordsError):
    """Surname reclassification requested without a surname table."""
