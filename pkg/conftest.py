# Lets pytest collect the Django SimpleTestCase suites without the Django runner.
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'kaliko.settings')
django.setup()
