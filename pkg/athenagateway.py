"""Client for the OHDSI Athena concept search service, which is the external reference source that grounds every
mapping. A store either queries the live Athena API (rate limited, with retries and a response cache) or serves a
fixed snapshot of concepts loaded from a newline-delimited JSON file, ranked deterministically so that runs can be
repeated exactly without network access."""

__author__ = 'OMOP MCP contributors'
__copyright__ = 'Copyright (c) 2026 OMOP MCP contributors'
__license__ = 'Apache 2.0'
__version__ = '2026-10-17'  # ISO 8601 (YYYY-MM-DD)

import collections
import dataclasses
import json
import re
import threading
import time

import requests

from omophelpers import Config, OmopMcpError, Utils
from vocabularycore import CandidateSet, Concept, InvalidId, StandardFlag, Validity, normalize_name

DEFAULT_PAGE_SIZE = 20
MAX_PAGE_SIZE = 100
TOKEN_REGEX = re.compile(r'\w+')


class InvalidQuery(OmopMcpError):
    pass


class UpstreamUnavailable(OmopMcpError):
    pass


class RateLimited(OmopMcpError):
    pass


class FixtureParseError(OmopMcpError):
    def __init__(self, line_number, detail):
        super().__init__('line %d: %s' % (line_number, detail))
        self.line_number = line_number


class DuplicateConceptId(OmopMcpError):
    def __init__(self, concept_id, line_number=None):
        super().__init__('duplicate concept_id %d%s' % (concept_id, ' (line %d)' % line_number if line_number else ''))
        self.concept_id = concept_id
        self.line_number = line_number


@dataclasses.dataclass(frozen=True)
class SearchFilters:
    domain: str = None
    vocabulary: tuple = ()
    standard_only: bool = False
    page: int = 1
    page_size: int = DEFAULT_PAGE_SIZE

    def __post_init__(self):
        if isinstance(self.vocabulary, str):
            object.__setattr__(self, 'vocabulary', (self.vocabulary,))
        else:
            object.__setattr__(self, 'vocabulary', tuple(self.vocabulary or ()))
        if self.page < 1:
            raise ValueError('page must be >= 1')
        if not 1 <= self.page_size <= MAX_PAGE_SIZE:
            raise ValueError('page_size must be between 1 and %d' % MAX_PAGE_SIZE)

    def cache_key(self):
        return (normalize_name(self.domain) if self.domain else None,
                tuple(sorted(normalize_name(v) for v in self.vocabulary)), bool(self.standard_only), self.page,
                self.page_size)

    def accepts(self, concept):
        if self.domain and normalize_name(concept.domain_id) != normalize_name(self.domain):
            return False
        if self.vocabulary and normalize_name(concept.vocabulary_id) not in [normalize_name(v) for v in
                                                                              self.vocabulary]:
            return False
        if self.standard_only and concept.standard is not StandardFlag.STANDARD:
            return False
        return True


class RateLimiter:
    """Sliding one-second window shared by every caller of a store: no window of one second ever contains more than
    `requests_per_second` upstream calls. The clock and sleep functions can be replaced (e.g., in tests)"""

    def __init__(self, requests_per_second, clock=time.monotonic, sleep=time.sleep):
        if requests_per_second < 1:
            raise ValueError('rate limit must allow at least one request per second')
        self.requests_per_second = int(requests_per_second)
        self.clock = clock
        self.sleep = sleep
        self.recent_calls = collections.deque()
        self.lock = threading.Lock()

    def acquire(self, wait=True):
        with self.lock:
            while True:
                now = self.clock()
                while self.recent_calls and self.recent_calls[0] <= now - 1.0:
                    self.recent_calls.popleft()
                if len(self.recent_calls) < self.requests_per_second:
                    self.recent_calls.append(now)
                    return now
                if not wait:
                    raise RateLimited('Athena request budget of %d per second exhausted' % self.requests_per_second)
                self.sleep(max(self.recent_calls[0] + 1.0 - now, 1e-6))


class ResponseCache:
    """Bounded least-recently-used map whose entries expire `ttl` seconds after insertion (a TTL of zero disables
    caching altogether)"""

    def __init__(self, ttl, capacity, clock=time.monotonic):
        self.ttl = ttl
        self.capacity = capacity
        self.clock = clock
        self.entries = collections.OrderedDict()
        self.lock = threading.Lock()

    def get(self, key):
        with self.lock:
            entry = self.entries.get(key)
            if entry is None:
                return None
            inserted_at, value = entry
            if self.clock() - inserted_at >= self.ttl:
                del self.entries[key]
                return None
            self.entries.move_to_end(key)
            return value

    def put(self, key, value):
        if self.ttl <= 0 or self.capacity <= 0:
            return
        with self.lock:
            self.entries[key] = (self.clock(), value)
            self.entries.move_to_end(key)
            while len(self.entries) > self.capacity:
                self.entries.popitem(last=False)

    def __len__(self):
        return len(self.entries)


def concept_from_athena(record):
    """Map one concept from an Athena API response. The search endpoint and the concept detail endpoint use slightly
    different field names, so both are accepted"""
    concept_id = record.get('id', record.get('conceptId'))
    try:
        concept_id = int(concept_id)
    except (TypeError, ValueError):
        raise UpstreamUnavailable('Athena returned a concept without a usable ID: %r' % (record,)) from None
    return Concept(concept_id=concept_id,
                   concept_name=str(record.get('name') or record.get('conceptName') or '').strip() or '(unnamed)',
                   domain_id=str(record.get('domain') or record.get('domainId') or ''),
                   vocabulary_id=str(record.get('vocabulary') or record.get('vocabularyId') or ''),
                   concept_class=str(record.get('className') or record.get('conceptClassId') or ''),
                   standard=StandardFlag.parse(record.get('standardConcept')),
                   validity=Validity.from_invalid_reason(record.get('invalidReason')))


def rank_fixture_matches(query, concepts):
    """Exact normalised-name matches first, then substring matches, then descending token overlap; ties are broken by
    ascending concept ID. Concepts sharing no token with the query are not matches at all"""
    normalized_query = normalize_name(query)
    query_tokens = set(TOKEN_REGEX.findall(normalized_query))
    ranked = []
    for concept in concepts:
        normalized_name = normalize_name(concept.concept_name)
        overlap = len(query_tokens & set(TOKEN_REGEX.findall(normalized_name)))
        if normalized_name == normalized_query:
            tier = 0
        elif normalized_query in normalized_name:
            tier = 1
        elif overlap > 0:
            tier = 2
        else:
            continue
        ranked.append(((tier, -overlap, concept.concept_id), concept))
    ranked.sort(key=lambda entry: entry[0])
    return [concept for _, concept in ranked]


class VocabularyStore:
    def __init__(self, concepts=None, base_url=None, session=None, rate_limit_rps=None, cache_ttl=None,
                 cache_capacity=None, clock=time.monotonic, sleep=time.sleep, wait_for_budget=True, attempts=3,
                 backoff=0.25, timeout=None):
        """Use VocabularyStore.fixture(...) or VocabularyStore.live(...) rather than constructing directly. Exactly
        one of `concepts` (fixture snapshot) or `base_url` (live Athena API) must be given"""
        if (concepts is None) == (base_url is None):
            raise ValueError('a store needs exactly one backend: a fixture snapshot or a live base URL')

        self.concepts_by_id = None
        self.base_url = None
        self.limiter = None
        if concepts is not None:
            self.concepts_by_id = {}
            for concept in concepts:
                if concept.concept_id in self.concepts_by_id:
                    raise DuplicateConceptId(concept.concept_id)
                self.concepts_by_id[concept.concept_id] = concept
            self.sorted_concepts = sorted(self.concepts_by_id.values(), key=lambda c: c.concept_id)
        else:
            self.base_url = base_url.rstrip('/')
            self.session = session or requests.Session()
            if rate_limit_rps is None:
                rate_limit_rps = Config.get_int('athena_rate_limit_rps', 5)
            self.limiter = RateLimiter(rate_limit_rps, clock=clock, sleep=sleep)

        if cache_ttl is None:
            cache_ttl = Config.get_float('athena_cache_ttl_secs', 86400)
        if cache_capacity is None:
            cache_capacity = Config.get_int('athena_cache_capacity', 10000)
        self.cache = ResponseCache(cache_ttl, cache_capacity, clock=clock)
        self.sleep = sleep
        self.wait_for_budget = wait_for_budget
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout if timeout is not None else Config.get_float('athena_timeout_secs', 30)

    @staticmethod
    def fixture(concepts, **kwargs):
        return VocabularyStore(concepts=list(concepts), **kwargs)

    @staticmethod
    def live(base_url=None, **kwargs):
        return VocabularyStore(base_url=base_url or Config.get('athena_base_url'), **kwargs)

    @property
    def is_fixture(self):
        return self.concepts_by_id is not None

    @property
    def backend_description(self):
        if self.is_fixture:
            return 'fixture snapshot (%d concepts)' % len(self.concepts_by_id)
        return 'live Athena API at %s' % self.base_url

    def concepts(self):
        """All concepts of a fixture snapshot in ascending ID order (empty for a live store)"""
        return list(self.sorted_concepts) if self.is_fixture else []

    def search_concepts(self, query, filters=None):
        if not (query or '').strip():
            raise InvalidQuery('search query must not be empty')
        filters = filters or SearchFilters()
        cache_key = ('search', normalize_name(query), filters.cache_key())
        cached = self.cache.get(cache_key)
        if cached is not None:
            # cache entries are shared between spellings of the same query; report the caller's own spelling
            return cached if cached.query == query else dataclasses.replace(cached, query=query)

        if self.is_fixture:
            matches = rank_fixture_matches(query, [c for c in self.sorted_concepts if filters.accepts(c)])
            start = (filters.page - 1) * filters.page_size
            result = CandidateSet(query=query, candidates=tuple(matches[start:start + filters.page_size]),
                                  total_available=len(matches), page=filters.page, page_size=filters.page_size)
        else:
            result = self._search_live(query, filters)
        self.cache.put(cache_key, result)
        return result

    def get_concept(self, concept_id):
        """Returns the Concept with this ID, or None if the vocabulary has no such concept"""
        if isinstance(concept_id, bool) or not isinstance(concept_id, int) or concept_id < 1:
            raise InvalidId(concept_id)
        if self.is_fixture:
            return self.concepts_by_id.get(concept_id)

        cache_key = ('concept', concept_id)
        cached = self.cache.get(cache_key)
        if cached is not None:
            return cached
        concept = self._get_live(concept_id)
        if concept is not None:
            self.cache.put(cache_key, concept)
        return concept

    def _upstream_get(self, url, params=None, type_hint='Athena'):
        response = Utils.request_with_retry(self.session, 'GET', url, attempts=self.attempts, backoff=self.backoff,
                                            sleep=self.sleep, type_hint=type_hint,
                                            before_attempt=lambda: self.limiter.acquire(wait=self.wait_for_budget),
                                            params=params, headers=Utils.api_headers(), timeout=self.timeout)
        if response is None:
            raise UpstreamUnavailable('%s request to %s failed after %d attempts' % (type_hint, url, self.attempts))
        return response

    def _search_live(self, query, filters):
        # see: https://athena.ohdsi.org/api/v1/concepts?query=chest%20pain&pageSize=20&page=1
        params = {'query': query.strip(), 'page': filters.page, 'pageSize': filters.page_size}
        if filters.domain:
            params['domain'] = filters.domain
        if filters.vocabulary:
            params['vocabulary'] = ','.join(filters.vocabulary)
        if filters.standard_only:
            params['standardConcept'] = 'Standard'

        response = self._upstream_get('%s/api/v1/concepts' % self.base_url, params=params, type_hint='Athena search')
        if response.status_code != 200:
            raise UpstreamUnavailable('Athena search returned status code %d' % response.status_code)
        try:
            response_json = response.json()
        except ValueError:
            raise UpstreamUnavailable('Athena search returned a response that is not JSON') from None

        records = response_json.get('content', []) if isinstance(response_json, dict) else response_json
        candidates = tuple(concept_from_athena(record) for record in records[:filters.page_size])
        total_available = len(candidates)
        if isinstance(response_json, dict):
            total_available = max(int(response_json.get('totalElements', total_available)), total_available)
        return CandidateSet(query=query, candidates=candidates, total_available=total_available, page=filters.page,
                            page_size=filters.page_size)

    def _get_live(self, concept_id):
        response = self._upstream_get('%s/api/v1/concepts/%d' % (self.base_url, concept_id),
                                      type_hint='Athena concept lookup')
        if response.status_code == 404:
            return None
        if response.status_code != 200:
            raise UpstreamUnavailable('Athena concept lookup returned status code %d' % response.status_code)
        try:
            return concept_from_athena(response.json())
        except ValueError:
            raise UpstreamUnavailable('Athena concept lookup returned a response that is not JSON') from None


def validate_fixture(path):
    """Parse a newline-delimited JSON concept snapshot, collecting every problem rather than stopping at the first.
    Returns a tuple of (concepts, errors); blank lines are ignored"""
    concepts = []
    errors = []
    seen_ids = {}
    with open(path, 'rb') as fixture_file:
        for line_number, raw_line in enumerate(fixture_file, start=1):
            try:
                line = raw_line.decode('utf-8-sig' if line_number == 1 else 'utf-8')
            except UnicodeDecodeError as e:
                errors.append(FixtureParseError(line_number, 'not valid UTF-8 (%s)' % e.reason))
                continue
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                if not isinstance(record, dict):
                    raise ValueError('expected a JSON object')
                concept = Concept.from_dict(record)
            except (ValueError, KeyError, TypeError, InvalidId) as e:
                detail = 'missing field %s' % e if isinstance(e, KeyError) else str(e)
                errors.append(FixtureParseError(line_number, detail))
                continue

            if concept.concept_id in seen_ids:
                errors.append(DuplicateConceptId(concept.concept_id, line_number))
                continue
            seen_ids[concept.concept_id] = line_number
            concepts.append(concept)
    return concepts, errors


def load_fixture(path, **store_kwargs):
    concepts, errors = validate_fixture(path)
    if errors:
        raise errors[0]
    return VocabularyStore.fixture(concepts, **store_kwargs)
