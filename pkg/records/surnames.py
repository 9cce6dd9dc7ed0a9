"""
Surname-based Hispanic reclassification.
"""

import csv
import io
import logging
import re

from .exceptions import RecordsError, SurnameTableMissing
from .types import Race, SurnameEntry

logger = logging.getLogger(__name__)

SUFFIXES = frozenset({'JR', 'SR', 'II', 'III', 'IV'})
DEFAULT_CUTOFF = 0.75
_NON_LETTERS = re.compile(r"[^A-Z\s]")


def clean_surname(raw):
    """
    Uppercase, strip punctuation and generational suffixes, keep the longest word.

    >>> clean_surname('Garcia Jr.')
    'GARCIA'
    >>> clean_surname('de la Fuente-Martinez')
    'MARTINEZ'
    """
    if not raw:
        return None
    text = _NON_LETTERS.sub(' ', raw.upper().replace('-', ' '))
    words = [w for w in text.split() if w not in SUFFIXES]
    if not words:
        return None
    return max(words, key=len)


def load_surnames(source):
    """
    Read a Census-style surname file into ``{name: SurnameEntry}``.

    The file needs ``name`` and ``pcthispanic`` columns, the latter as a
    percentage; suppressed cells such as ``(S)`` are skipped.
    """
    if isinstance(source, bytes):
        source = source.decode('utf-8')
    handle = io.StringIO(source) if isinstance(source, str) else source
    reader = csv.DictReader(handle)
    fieldnames = [c.strip().lower() for c in reader.fieldnames or []]
    if 'name' not in fieldnames or 'pcthispanic' not in fieldnames:
        raise RecordsError("surname file needs 'name' and 'pcthispanic' columns")
    table = {}
    skipped = 0
    for row in reader:
        row = {k.strip().lower(): (v or '').strip() for k, v in row.items()}
        try:
            pct = float(row['pcthispanic']) / 100.0
        except ValueError:
            skipped += 1
            continue
        name = row['name'].upper()
        table[name] = SurnameEntry(name, min(max(pct, 0.0), 1.0))
    logger.info(f"Loaded {len(table)} surnames ({skipped} suppressed rows skipped)")
    return table


def reclassify_hispanic(records, surnames, states, cutoff=DEFAULT_CUTOFF):
    """
    Relabel White or Unknown drivers with Hispanic-affiliated surnames.

    Args:
        records: Iterable of StopRecord.
        surnames (dict): ``{name: SurnameEntry}`` from ``load_surnames``.
        states: States where the rule applies.
        cutoff (float): Minimum share Hispanic for a surname to count.

    Returns:
        tuple(list, int): Records (relabeled copies where the rule fired)
        and the relabel count.

    Raises:
        SurnameTableMissing: ``states`` is non-empty but no table was given.
    """
    states = set(states or ())
    records = list(records)
    if not states:
        return records, 0
    if surnames is None:
        raise SurnameTableMissing(f"surname table required for reclassification in {sorted(states)}")

    out = []
    relabeled = 0
    for record in records:
        if record.state in states and record.driver_race in (Race.WHITE, Race.UNKNOWN):
            entry = surnames.get(clean_surname(record.driver_surname))
            if entry is not None and entry.pct_hispanic >= cutoff:
                record = record.with_changes(driver_race=Race.HISPANIC)
                relabeled += 1
        out.append(record)
    logger.info(f"Surname reclassification in {sorted(states)}: {relabeled} drivers relabeled Hispanic")
    return out, relabeled
