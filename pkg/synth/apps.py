from django.apps import AppConfig


class SyntheticDataConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'synth'
    verbose_name = 'Synthetic data generators'
