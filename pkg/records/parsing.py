"""
Delimited-text parsing with an error sink.

Every data line of a source either becomes a RawRow or lands in the sink
with its line number; nothing is dropped silently.
"""

import csv
import io
import logging
from dataclasses import dataclass, field

from .exceptions import SchemaError, UnreadableSourceError
from .types import RawRow

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SinkEntry:
    state: str
    line_number: int
    reason: str
    raw: str = ''


@dataclass
class ErrorSink:
    """Collects rejected lines across parsing and normalization."""

    entries: list = field(default_factory=list)

    def add(self, state, line_number, reason, raw=''):
        self.entries.append(SinkEntry(state, line_number, reason, raw))
        logger.debug(f"{state} line {line_number} rejected: {reason}")

    def __len__(self):
        return len(self.entries)

    def count(self, state=None):
        return sum(1 for e in self.entries if state is None or e.state == state)

    def write_csv(self, handle):
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(['state', 'line_number', 'reason', 'raw'])
        for entry in self.entries:
            writer.writerow([entry.state, entry.line_number, entry.reason, entry.raw])


def _text_stream(source, encoding):
    if isinstance(source, (str, bytes)) or hasattr(source, '__fspath__'):
        try:
            source = open(source, 'rb')
        except OSError as exc:
            raise UnreadableSourceError(f"cannot open {source}: {exc}") from exc
    if isinstance(source, io.TextIOBase):
        return source
    # surrogateescape keeps undecodable bytes intact in the values
    return io.TextIOWrapper(source, encoding=encoding, errors='surrogateescape', newline='')


def parse_source(source, schema, sink):
    """
    Yield one RawRow per data line of a delimited export.

    Args:
        source: Path, binary stream or text stream.
        schema (StateSchema): Supplies delimiter, quoting, encoding and the
            raw columns that must be present in the header.
        sink (ErrorSink): Receives malformed lines with their line numbers.

    Raises:
        SchemaError: Header lacks a column the schema references, or repeats
            a column name. Raised before any row is yielded.
        UnreadableSourceError: Source cannot be opened.
    """
    stream = _text_stream(source, schema.encoding)
    reader = csv.reader(stream, delimiter=schema.delimiter, quotechar=schema.quotechar, strict=True)
    try:
        header = next(reader)
    except StopIteration:
        return
    except csv.Error as exc:
        raise UnreadableSourceError(f"{schema.state}: unreadable header: {exc}") from exc

    if len(set(header)) != len(header):
        duplicated = sorted({c for c in header if header.count(c) > 1})
        raise SchemaError(f"{schema.state}: duplicate column names {duplicated}")
    schema.validate_header(header)

    rows = errors = 0
    while True:
        try:
            values = next(reader)
        except StopIteration:
            break
        except csv.Error as exc:
            sink.add(schema.state, reader.line_num, f"malformed line: {exc}")
            errors += 1
            continue
        if not values:
            continue
        if len(values) != len(header):
            sink.add(
                schema.state, reader.line_num,
                f"expected {len(header)} fields, found {len(values)}",
                schema.delimiter.join(values),
            )
            errors += 1
            continue
        rows += 1
        yield RawRow(schema.state, dict(zip(header, values)), reader.line_num)
    logger.info(f"Parsed {schema.state}: {rows} rows, {errors} malformed lines")
