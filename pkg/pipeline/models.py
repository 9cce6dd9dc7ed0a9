from django.db import models


class PipelineRun(models.Model):
    """
    One invocation of a pipeline command.
    """
    STATUS_RUNNING = 'running'
    STATUS_OK = 'ok'
    STATUS_FAILED = 'failed'
    STATUS_CHOICES = (
        (STATUS_RUNNING, 'Running'),
        (STATUS_OK, 'Finished'),
        (STATUS_FAILED, 'Failed'),
    )

    command = models.CharField(max_length=32, help_text="Management command name")
    config_path = models.CharField(max_length=500, blank=True, help_text="Pipeline config file")
    config_hash = models.CharField(max_length=40, blank=True, help_text="Blob hash of the config file")
    output_dir = models.CharField(max_length=500, help_text="Directory the run writes into")
    seed = models.BigIntegerField(help_text="Base random seed")
    status = models.CharField(max_length=16, choices=STATUS_CHOICES, default=STATUS_RUNNING)
    exit_code = models.PositiveSmallIntegerField(null=True, blank=True)
    message = models.TextField(blank=True)
    started_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ['-started_at', '-id']
        verbose_name = "Pipeline run"
        verbose_name_plural = "Pipeline runs"

    def __str__(self):
        return f"{self.command} #{self.id} ({self.status})"


class OutputArtifact(models.Model):
    """
    A file written by a run, with its git-style blob hash.
    """
    run = models.ForeignKey(PipelineRun, on_delete=models.CASCADE, related_name='artifacts')
    path = models.CharField(max_length=500, help_text="Path relative to the run's output directory")
    kind = models.CharField(max_length=32, help_text="Stage that wrote the file")
    blob_hash = models.CharField(max_length=40)
    size = models.BigIntegerField()
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['path']
        constraints = [
            models.UniqueConstraint(fields=['run', 'path'], name='unique_artifact_path_per_run'),
        ]

    def __str__(self):
        return f"{self.path} {self.blob_hash[:10]}"
