import json
import logging
import os

from django.conf import settings
from django.core.cache import cache
from django_redis import get_redis_connection
from redis.exceptions import RedisError

from records.utils import git_blob_hash

from .exceptions import ManifestError
from .models import OutputArtifact, PipelineRun
from .signals import manifest_cache_key

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'


def hash_file(path):
    with open(path, 'rb') as handle:
        data = handle.read()
    return git_blob_hash(data), len(data)


def list_files(directory):
    """Every file under ``directory`` as sorted POSIX-style relative paths, the manifest excluded."""
    found = []
    for root, _, names in os.walk(directory):
        for name in names:
            relative = os.path.relpath(os.path.join(root, name), directory).replace(os.sep, '/')
            if relative != MANIFEST_NAME:
                found.append(relative)
    return sorted(found)


def compare_hashes(listed, directory):
    """{relative path: 'missing' | 'changed'} for listed files that no longer match their hash."""
    problems = {}
    for relative, digest in listed.items():
        target = os.path.join(directory, relative)
        if not os.path.isfile(target):
            problems[relative] = 'missing'
        elif hash_file(target)[0] != digest:
            problems[relative] = 'changed'
    return problems


def write_manifest(directory):
    """
    Hash every file in the output directory and write ``manifest.json``.

    Returns:
        dict: {relative path: blob hash}
    """
    files = {path: hash_file(os.path.join(directory, path))[0] for path in list_files(directory)}
    with open(os.path.join(directory, MANIFEST_NAME), 'w', encoding='utf-8') as handle:
        json.dump({'files': files}, handle, indent=2, sort_keys=True)
        handle.write('\n')
    logger.info(f"Manifest for {directory}: {len(files)} files")
    return files


def validate_manifest(directory):
    """
    Re-hash the files a manifest lists.

    Returns:
        dict: {relative path: 'missing' | 'changed' | 'unlisted'}; empty when
        the directory matches its manifest.
    """
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, encoding='utf-8') as handle:
            listed = json.load(handle)['files']
    except (OSError, ValueError, KeyError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc

    problems = compare_hashes(listed, directory)
    for relative in list_files(directory):
        if relative not in listed:
            problems[relative] = 'unlisted'
    if problems:
        logger.warning(f"Manifest mismatches in {directory}: {problems}")
    return dict(sorted(problems.items()))


def record_artifacts(run, paths, kind):
    """Store an OutputArtifact row per written file (directories are expanded)."""
    files = []
    for path in paths:
        path = str(path)
        if os.path.isdir(path):
            files.extend(os.path.join(path, name) for name in list_files(path))
        else:
            files.append(path)
    for path in files:
        digest, size = hash_file(path)
        relative = os.path.relpath(path, run.output_dir).replace(os.sep, '/')
        OutputArtifact.objects.update_or_create(
            run=run, path=relative, defaults={'kind': kind, 'blob_hash': digest, 'size': size},
        )
    logger.info(f"Recorded {len(files)} {kind} artifacts for run {run.id}")
    return len(files)


def get_run_manifest(run_id):
    """
    {path: blob hash} of a run's artifacts, from cache or database.

    Cached for an hour; the artifact signals drop the entry on any change.
    """
    cache_key = manifest_cache_key(run_id)
    manifest = cache.get(cache_key)
    if manifest is not None:
        logger.info(f"Cache HIT for key: {cache_key}")
        return manifest

    logger.info(f"Cache MISS for key: {cache_key}")
    manifest = dict(OutputArtifact.objects.filter(run_id=run_id).order_by('path').values_list('path', 'blob_hash'))
    cache.set(cache_key, manifest, getattr(settings, 'MANIFEST_CACHE_TTL', 3600))
    return manifest


def latest_recorded_run(command, output_dir):
    """Most recent run of ``command`` into ``output_dir`` that recorded any artifacts, or None."""
    runs = PipelineRun.objects.filter(command=command, output_dir=output_dir, artifacts__isnull=False)
    return runs.distinct().first()


def ledger_mismatches(run_id, directory):
    """
    Re-hash the files a run recorded.

    Returns:
        dict: {relative path: 'missing' | 'changed'}; empty when every
        recorded artifact is still on disk unchanged.
    """
    return compare_hashes(get_run_manifest(run_id), directory)


def get_redis_cache_metrics():
    """
    Keyspace hit/miss counts of the Redis cache behind the reference tables.

    Returns:
        dict: Hits, misses and the hit ratio; an ``error`` entry when no Redis
        backend is configured or reachable.
    """
    try:
        info = get_redis_connection("default").info()
    except (NotImplementedError, RedisError) as exc:
        logger.info(f"Redis cache metrics unavailable: {exc}")
        return {'error': str(exc), 'keyspace_hits': 0, 'keyspace_misses': 0, 'total_requests': 0, 'hit_ratio': 0}

    keyspace_hits = info.get('keyspace_hits', 0)
    keyspace_misses = info.get('keyspace_misses', 0)
    total_requests = keyspace_hits + keyspace_misses
    hit_ratio = (keyspace_hits / total_requests * 100) if total_requests > 0 else 0
    metrics = {
        'keyspace_hits': keyspace_hits,
        'keyspace_misses': keyspace_misses,
        'total_requests': total_requests,
        'hit_ratio': round(hit_ratio, 2),
    }
    logger.info(f"Redis Cache Metrics: {metrics}")
    return metrics
