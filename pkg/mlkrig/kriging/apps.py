from django.apps import AppConfig


class KrigingConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "kriging"
    verbose_name = "Multilevel Kriging"
