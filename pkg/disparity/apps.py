from django.apps import AppConfig


class DisparityConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'disparity'
    verbose_name = 'Disparity analyses'
