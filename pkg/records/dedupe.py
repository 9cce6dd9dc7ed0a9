"""
Duplicate detection and reconciliation.

Records equal on every key field are merged into one. The merged record is a
field-wise union taken in source order: scalars keep the first non-missing
value, lists keep every distinct entry, search and contraband flags are true
if any duplicate says so, and the outcome is the most severe one recorded.
Records with a missing key field are never merged.
"""

import logging
from dataclasses import dataclass, fields

from .types import Gender, Outcome, Race

logger = logging.getLogger(__name__)

_FLAGS = ('search_conducted', 'contraband_found')
_LISTS = ('violations', 'search_types')
_UNKNOWN = {'driver_race': Race.UNKNOWN, 'driver_gender': Gender.UNKNOWN}


@dataclass
class DedupResult:
    records: list
    removed: int


def _missing(name, value):
    return value is None or value == () or _UNKNOWN.get(name) == value


def merge(records):
    """Field-wise union of duplicate records (order = source order)."""
    records = sorted(records, key=lambda r: r.source_line)
    changes = {}
    for f in fields(records[0]):
        name = f.name
        values = [getattr(r, name) for r in records]
        if name in _FLAGS:
            known = [v for v in values if v is not None]
            changes[name] = any(known) if known else None
        elif name in _LISTS:
            merged = []
            for value in values:
                merged.extend(v for v in value if v not in merged)
            changes[name] = tuple(merged)
        elif name == 'outcome':
            changes[name] = Outcome.most_severe(values)
        elif name == 'identifiers':
            union = {}
            for value in values:
                for key, item in value.items():
                    if item and not union.get(key):
                        union[key] = item
            changes[name] = union
        else:
            changes[name] = next((v for v in values if not _missing(name, v)), values[0])
    if changes['contraband_found']:
        changes['search_conducted'] = True
    return records[0].with_changes(**changes)


def dedupe(records, key):
    """
    Collapse records that agree on every field of ``key``.

    Args:
        records: Iterable of StopRecord.
        key (DedupKey): Standardized field or identifier names.

    Returns:
        DedupResult: Retained records in order of first appearance and the
        number of rows removed.
    """
    groups = {}
    order = []
    total = 0
    for record in records:
        total += 1
        group_key = key.of(record)
        if group_key is None:
            group_key = ('__unkeyed__', total)
        if group_key not in groups:
            groups[group_key] = []
            order.append(group_key)
        groups[group_key].append(record)

    retained = [groups[k][0] if len(groups[k]) == 1 else merge(groups[k]) for k in order]
    removed = total - len(retained)
    logger.info(f"Dedup on {list(key.column_names)}: {total} in, {removed} duplicates removed")
    return DedupResult(retained, removed)
