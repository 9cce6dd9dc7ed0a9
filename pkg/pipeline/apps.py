from django.apps import AppConfig


class PipelineAppConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'pipeline'
    verbose_name = 'Batch pipeline'

    def ready(self):
        """
        Import signals when Django starts.
        This ensures that manifest cache invalidation is connected.
        """
        import pipeline.signals  # noqa: F401
