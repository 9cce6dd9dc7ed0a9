import hashlib
import logging

from django.conf import settings
from django.core.cache import cache

from .schemas import ReferenceTables
from .surnames import load_surnames

logger = logging.getLogger(__name__)


def git_blob_hash(data):
    """Git-style blob hash (sha1 over ``blob <size>\\0`` + content)."""
    header = f"blob {len(data)}\0".encode()
    return hashlib.sha1(header + data).hexdigest()


def _read_bytes(path):
    with open(path, 'rb') as handle:
        return handle.read()


def cached_reference(prefix, path, build):
    """
    Load an immutable reference file through the cache, keyed by content hash.

    Returns:
        tuple: (loaded object, content hash)
    """
    data = _read_bytes(path)
    digest = git_blob_hash(data)
    cache_key = f"{prefix}:{digest}"

    value = cache.get(cache_key)
    if value is not None:
        logger.info(f"Cache HIT for key: {cache_key}")
        return value, digest

    logger.info(f"Cache MISS for key: {cache_key}")
    value = build(data)
    cache.set(cache_key, value, settings.CACHE_TTL)
    logger.info(f"Cached {prefix} from {path} with key: {cache_key}")
    return value, digest


def get_reference_tables(path=None):
    """Built-in vocabularies, extended from ``path`` when given."""
    if path is None:
        return ReferenceTables(), None
    return cached_reference(
        'reference_tables', path, lambda data: ReferenceTables().extend_from_csv(data.decode('utf-8'))
    )


def get_surname_table(path):
    return cached_reference('surnames', path, lambda data: load_surnames(data.decode('utf-8')))
