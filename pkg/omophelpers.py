"""Shared configuration and utility functions for the OMOP concept mapping tools."""

__author__ = 'OMOP MCP contributors'
__copyright__ = 'Copyright (c) 2026 OMOP MCP contributors'
__license__ = 'Apache 2.0'
__version__ = '2026-10-17'  # ISO 8601 (YYYY-MM-DD)

import configparser
import csv
import os
import sys
import time

import openpyxl
import requests
import requests.structures


class OmopMcpError(Exception):
    """Root of every error raised by the mapping tools. Callers that only care whether something went wrong (e.g., the
    command line entry point) can catch this; everything else should catch the specific subclass"""


class ConfigError(OmopMcpError):
    pass


class PreconditionError(OmopMcpError):
    pass


class Config:
    FILE_PATH = os.path.join(os.path.dirname(os.path.realpath(__file__)), 'omophelpers.config')
    SECTION = 'omop-mcp'

    # used when the configuration file is missing or does not set a value
    DEFAULTS = {
        'athena_base_url': 'https://athena.ohdsi.org',
        'athena_web_base': 'https://athena.ohdsi.org',
        'athena_rate_limit_rps': '5',
        'athena_cache_ttl_secs': '86400',
        'athena_cache_capacity': '10000',
        'athena_page_size': '20',
        'athena_timeout_secs': '30',
        'fixture': '',
        'llm_api_base': '',
        'llm_api_key': '',
        'llm_model': '',
        'llm_temperature': '0',
        'max_attempts': '3',
        'candidate_limit': '20',
        'preference_file': ''
    }

    # environment variable names that differ from the generic OMOP_MCP_[KEY] pattern
    ENVIRONMENT_NAMES = {
        'athena_base_url': 'ATHENA_BASE_URL',
        'athena_rate_limit_rps': 'ATHENA_RATE_LIMIT_RPS',
        'athena_cache_ttl_secs': 'ATHENA_CACHE_TTL_SECS',
        'fixture': 'OMOP_MCP_FIXTURE',
        'llm_api_base': 'LLM_API_BASE',
        'llm_api_key': 'LLM_API_KEY',
        'llm_model': 'LLM_MODEL',
        'max_attempts': 'OMOP_MCP_MAX_ATTEMPTS'
    }

    _settings = None

    @staticmethod
    def get_settings():
        if Config._settings is None:
            parser = configparser.ConfigParser()
            parser.read_dict({Config.SECTION: Config.DEFAULTS})
            parser.read(Config.FILE_PATH, encoding='utf-8')
            Config._settings = parser[Config.SECTION]

            api_key = Config._settings.get('llm_api_key', '')
            if api_key.startswith('*** your'):
                Utils.report('WARNING: llm_api_key in', Config.FILE_PATH, 'seems to contain the example value - please',
                             'make sure you have added your own key (or set LLM_API_KEY)')
        return Config._settings

    @staticmethod
    def reload(file_path=None):
        """Discard cached settings (and optionally point at a different file). Mainly useful in tests"""
        if file_path:
            Config.FILE_PATH = file_path
        Config._settings = None

    @staticmethod
    def environment_name(key):
        return Config.ENVIRONMENT_NAMES.get(key, 'OMOP_MCP_%s' % key.upper())

    @staticmethod
    def is_set_in_environment(key):
        return bool(os.environ.get(Config.environment_name(key), '').strip())

    @staticmethod
    def get(key, default=None):
        # environment first, then the configuration file, then built-in defaults
        environment_value = os.environ.get(Config.environment_name(key))
        if environment_value is not None and environment_value.strip():
            return environment_value.strip()
        value = Config.get_settings().get(key, fallback=None)
        if value is None or value.strip() == '':
            return default
        return value.strip()

    @staticmethod
    def get_int(key, default=None):
        value = Config.get(key)
        if value is None:
            return default
        try:
            return int(value)
        except ValueError:
            raise ConfigError('%s must be an integer (found %r)' % (key, value)) from None

    @staticmethod
    def get_float(key, default=None):
        value = Config.get(key)
        if value is None:
            return default
        try:
            return float(value)
        except ValueError:
            raise ConfigError('%s must be a number (found %r)' % (key, value)) from None


class Utils:
    @staticmethod
    def report(*message):
        # stdout is reserved for MCP frames and result files, so all progress and error messages go to stderr
        print(*message, file=sys.stderr)

    @staticmethod
    def api_headers(token=None, content_type=None):
        api_headers = requests.structures.CaseInsensitiveDict()
        api_headers['accept'] = 'application/json'
        if content_type:
            api_headers['content-type'] = content_type
        if token:
            # in case the heading 'Bearer ' is copied as well as the token itself
            api_headers['authorization'] = ('%s' if token.startswith('Bearer ') else 'Bearer %s') % token
        return api_headers

    @staticmethod
    def request_with_retry(session, method, url, attempts=3, backoff=0.25, sleep=time.sleep, type_hint='API',
                           before_attempt=None, **kwargs):
        """Make an HTTP request, retrying transport errors and 5xx responses with exponential backoff (`backoff`,
        then double that, and so on). Any other response is returned as-is so that callers can interpret 404 and
        similar. Returns None if every attempt failed; for (slightly) more specific error messages, set type_hint to a
        string describing the API call that is being made. If given, `before_attempt` is called before every attempt,
        retries included (e.g., to take a rate limiter token)"""
        for attempt in range(1, attempts + 1):
            if before_attempt:
                before_attempt()
            try:
                response = session.request(method, url, **kwargs)
                if response.status_code < 500:
                    return response
                Utils.report('WARNING: %s request to' % type_hint, url, 'failed with status code',
                             response.status_code, '(attempt %d of %d)' % (attempt, attempts))
            except requests.RequestException as e:
                Utils.report('WARNING: %s request to' % type_hint, url, 'failed:', e,
                             '(attempt %d of %d)' % (attempt, attempts))
            if attempt < attempts:
                sleep(backoff * (2 ** (attempt - 1)))
        Utils.report('ERROR: unable to complete', type_hint, 'request after', attempts, 'attempts')
        return None

    @staticmethod
    def read_table_rows(table_file):
        """Read every row of an XLSX or CSV file as a list of strings (empty cells become ''). XLSX files are read
        from their first sheet only"""
        rows = []
        if table_file.lower().endswith('.xlsx'):
            workbook = openpyxl.load_workbook(table_file, read_only=True, data_only=True)
            sheet = workbook[workbook.sheetnames[0]]
            for row in sheet.iter_rows(values_only=True):
                rows.append(['' if value is None else str(value) for value in row])
            workbook.close()
        else:
            with open(table_file, newline='', encoding='utf-8-sig') as table_csv:
                for row in csv.reader(table_csv):
                    rows.append(row)
        return rows

    @staticmethod
    def write_table(table_file, headers, rows, title='Results'):
        if table_file.lower().endswith('.xlsx'):
            workbook = openpyxl.Workbook()
            spreadsheet = workbook.active
            spreadsheet.title = title[:31]  # Excel's sheet name limit
            spreadsheet.freeze_panes = 'A2'  # set the first row as a header
            spreadsheet.append(headers)
            for row in rows:
                spreadsheet.append(row)
            workbook.save(table_file)
        else:
            with open(table_file, 'w', newline='', encoding='utf-8') as f:
                writer = csv.writer(f)
                writer.writerow(headers)
                writer.writerows(rows)
