from django.apps import AppConfig


class ThresholdConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'threshold'
    verbose_name = 'Threshold test'
