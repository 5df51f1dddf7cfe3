"""
Django settings for the kaliko project.

The project has no web surface: Django provides the settings layer, the
management-command CLI and the test runner. Numeric and runtime knobs are
read from the environment (optionally a .env file, see env.example.txt).
"""

from pathlib import Path
import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv('SECRET_KEY', 'django-insecure-kaliko-local-only')

DEBUG = os.getenv('DEBUG', 'True') == 'True'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'koopman.apps.KoopmanConfig',
]

# No ORM models; the test runner never creates a database.
DATABASES = {}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# KALIKO runtime configuration

# Worker cap for thread pools (dataset generation, grid analyses, per-trajectory evaluation)
KALIKO_THREADS = int(os.getenv('KALIKO_THREADS', os.cpu_count() or 1))

# Check every forward op of the autodiff engine for non-finite output
KALIKO_AUTODIFF_DEBUG = os.getenv('KALIKO_AUTODIFF_DEBUG', 'False') == 'True'

# Long-running acceptance suites (model training on the toy systems)
KALIKO_SLOW_TESTS = os.getenv('KALIKO_SLOW_TESTS', 'False') == 'True'

KALIKO_LOG_LEVEL = os.getenv('KALIKO_LOG_LEVEL', 'INFO')

# Checkpoint file written by `train` inside its output directory
KALIKO_CHECKPOINT_NAME = 'checkpoint.klko'


# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'koopman': {
            'handlers': ['console'],
            'level': KALIKO_LOG_LEVEL,
            'propagate': False,
        },
    },
}
