import logging

from django.core.cache import cache
from django.db.models.signals import post_delete, post_save
from django.dispatch import receiver

from .models import OutputArtifact

logger = logging.getLogger(__name__)


def manifest_cache_key(run_id):
    return f"manifest_{run_id}"


@receiver(post_save, sender=OutputArtifact)
def invalidate_manifest_on_artifact_save(sender, instance, created, **kwargs):
    """
    Drop the cached manifest of the artifact's run when an artifact is
    recorded or re-hashed.
    """
    cache.delete(manifest_cache_key(instance.run_id))
    action = "recorded" if created else "updated"
    logger.info(f"Artifact {instance.path} {action}. Cache invalidated for '{manifest_cache_key(instance.run_id)}'")


@receiver(post_delete, sender=OutputArtifact)
def invalidate_manifest_on_artifact_delete(sender, instance, **kwargs):
    cache.delete(manifest_cache_key(instance.run_id))
    logger.info(f"Artifact {instance.path} deleted. Cache invalidated for '{manifest_cache_key(instance.run_id)}'")
