"""
Django settings for the traffic_stops project.

Infrastructure (database, cache, logging) is configured from the environment;
analysis defaults live in ``TRAFFIC_STOPS`` and can be overridden per run by
the pipeline config file (see ``pipeline.config``).
"""

import logging
import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get(
    'DJANGO_SECRET_KEY',
    'django-insecure-traffic-stops-batch-only-no-web-surface',
)

DEBUG = os.environ.get('DJANGO_DEBUG', '0') == '1'

ALLOWED_HOSTS = []

# Application definition

INSTALLED_APPS = [
    'django_redis',
    'records',
    'numerics',
    'glm',
    'disparity',
    'inference',
    'threshold',
    'policy',
    'synth',
    'pipeline',
]

MIDDLEWARE = []

# Database
# PostgreSQL when POSTGRES_DB is set (see docker-compose.yml), SQLite otherwise.

if os.environ.get('POSTGRES_DB'):
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.postgresql',
            'NAME': os.environ['POSTGRES_DB'],
            'USER': os.environ.get('POSTGRES_USER', 'stops_user'),
            'PASSWORD': os.environ.get('POSTGRES_PASSWORD', 'stops_password'),
            'HOST': os.environ.get('POSTGRES_HOST', 'localhost'),
            'PORT': os.environ.get('POSTGRES_PORT', '5432'),
        }
    }
else:
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.sqlite3',
            'NAME': BASE_DIR / 'traffic_stops.sqlite3',
        }
    }

# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Redis Cache Configuration
# Reference tables (surnames, census populations, lookups) are cached here.
REDIS_URL = os.environ.get('REDIS_URL')

if REDIS_URL:
    CACHES = {
        'default': {
            'BACKEND': 'django_redis.cache.RedisCache',
            'LOCATION': REDIS_URL,
            'OPTIONS': {
                'CLIENT_CLASS': 'django_redis.client.DefaultClient',
            }
        }
    }
else:
    CACHES = {
        'default': {
            'BACKEND': 'django.core.cache.backends.locmem.LocMemCache',
            'LOCATION': 'traffic-stops',
        }
    }

# Reference tables are immutable once hashed, so they can live for a day
CACHE_TTL = int(os.environ.get('CACHE_TTL', 60 * 60 * 24))

# Analysis defaults. Every value here can be overridden in a pipeline config.
TRAFFIC_STOPS = {
    'ANALYSIS_YEARS': (2011, 2015),
    'ANALYSIS_RACES': ('White', 'Black', 'Hispanic'),
    'DISTRICT_STATES': ('NC', 'IL', 'RI'),
    'SURNAME_STATES': ('TX',),
    'HISPANIC_SURNAME_CUTOFF': 0.75,
    'FIELD_AVAILABILITY_CUTOFF': 0.70,
    'MAX_ERROR_RATE': 0.05,
    'THRESHOLD_MIN_STOPS': 1000,
    'THRESHOLD_MAX_LOCATIONS': 100,
    'SAMPLER_CHAINS': 5,
    'SAMPLER_WARMUP': 2500,
    'SAMPLER_DRAWS': 2500,
    'SAMPLER_MAX_DEPTH': 10,
    'SAMPLER_TARGET_ACCEPT': 0.8,
    'RHAT_CUTOFF': 1.05,
    'LEGALIZATION_DATE': '2012-12-31',
    'TREATED_STATES': ('CO', 'WA'),
    'PROCEDURAL_SEARCH_TYPES': ('IncidentToArrest', 'Inventory', 'Warrant'),
    'PLOT_MIN_STOPS': 0,
    'SEED': 20170601,
}

# Logging configuration for pipeline runs
LOG_FILE = os.environ.get('TRAFFIC_STOPS_LOG_FILE', 'traffic_stops.log')

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.FileHandler(LOG_FILE),
        logging.StreamHandler()
    ]
)
