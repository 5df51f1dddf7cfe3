from django.apps import AppConfig


class KoopmanConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'koopman'
    verbose_name = 'Kalman-implicit Koopman operator learning'
