import json

import pytest
import requests

from athenagateway import (DuplicateConceptId, FixtureParseError, InvalidQuery, RateLimited, RateLimiter,
                           ResponseCache, SearchFilters, UpstreamUnavailable, VocabularyStore, concept_from_athena,
                           load_fixture, validate_fixture)
from vocabularycore import InvalidId, StandardFlag, Validity


class FakeResponse:
    def __init__(self, status_code=200, payload=None):
        self.status_code = status_code
        self.payload = payload
        self.text = json.dumps(payload) if payload is not None else ''

    def json(self):
        if self.payload is None:
            raise ValueError('no JSON body')
        return self.payload


class FakeSession:
    """Answers Athena API requests from a fixed list of concepts, optionally failing the first few requests"""

    def __init__(self, records=(), clock=None, failures=()):
        self.records = list(records)
        self.clock = clock
        self.failures = list(failures)
        self.calls = []

    def request(self, method, url, params=None, **kwargs):
        self.calls.append((self.clock() if self.clock else None, method, url, dict(params or {})))
        if self.failures:
            failure = self.failures.pop(0)
            if isinstance(failure, Exception):
                raise failure
            return FakeResponse(failure)
        if '/api/v1/concepts/' in url:
            concept_id = int(url.rsplit('/', 1)[1])
            for record in self.records:
                if record['id'] == concept_id:
                    return FakeResponse(200, record)
            return FakeResponse(404)
        matches = [r for r in self.records if params['query'].lower() in r['name'].lower()]
        return FakeResponse(200, {'content': matches[:params['pageSize']], 'totalElements': len(matches)})


ATHENA_RECORDS = [
    {'id': 77670, 'name': 'Chest pain', 'domain': 'Condition', 'vocabulary': 'SNOMED', 'className': 'Clinical Finding',
     'standardConcept': 'Standard', 'invalidReason': 'Valid'},
    {'id': 35211388, 'name': 'Chest pain, unspecified', 'domain': 'Condition', 'vocabulary': 'ICD10CM',
     'className': '5-char billing code', 'standardConcept': 'Non-standard', 'invalidReason': 'Valid'}
]


def live_store(session, clock, **kwargs):
    return VocabularyStore.live('https://athena.example.org/', session=session, clock=clock, sleep=clock.sleep,
                                cache_ttl=kwargs.pop('cache_ttl', 60), cache_capacity=100, **kwargs)


def test_fixture_search_ranks_exact_match_first(store):
    candidates = store.search_concepts('chest pain')
    assert candidates.concept_ids() == [77670, 4038385, 35211388, 44821751, 4127089, 4329041]
    assert candidates.total_available == 6


def test_fixture_search_rejects_empty_query(store):
    with pytest.raises(InvalidQuery):
        store.search_concepts('')
    with pytest.raises(InvalidQuery):
        store.search_concepts('   ')


def test_fixture_search_without_match_is_empty(store):
    candidates = store.search_concepts('qqqqzzzz')
    assert len(candidates) == 0
    assert candidates.total_available == 0


def test_fixture_search_filters(store):
    assert store.search_concepts('chest pain', SearchFilters(standard_only=True)).concept_ids() == [
        77670, 4038385, 4127089, 4329041]
    assert store.search_concepts('chest pain', SearchFilters(vocabulary='ICD9CM')).concept_ids() == [44821751]
    assert store.search_concepts('heart rate', SearchFilters(domain='measurement')).concept_ids() == [3027018]


def test_fixture_search_is_deterministic(store, chest_pain_path):
    uncached = load_fixture(chest_pain_path, cache_ttl=0)
    for query in ('chest pain', 'pain', 'Chest  PAIN', 'acetaminophen'):
        assert store.search_concepts(query) == store.search_concepts(query)
        assert uncached.search_concepts(query).candidates == store.search_concepts(query).candidates


def test_fixture_pagination_is_consistent(store):
    seen = []
    for page in range(1, 5):
        candidates = store.search_concepts('chest pain', SearchFilters(page=page, page_size=2))
        assert candidates.total_available == 6
        seen.extend(candidates.concept_ids())
    assert len(seen) == len(set(seen)) == 6
    assert seen == store.search_concepts('chest pain').concept_ids()


def test_search_filters_validation():
    with pytest.raises(ValueError):
        SearchFilters(page=0)
    with pytest.raises(ValueError):
        SearchFilters(page_size=101)
    assert SearchFilters(vocabulary=['SNOMED', 'LOINC']).cache_key() == SearchFilters(
        vocabulary=['loinc', 'snomed']).cache_key()


def test_get_concept(store):
    concept = store.get_concept(77670)
    assert concept.concept_name == 'Chest pain'
    assert concept.domain_id == 'Condition'
    assert concept.vocabulary_id == 'SNOMED'
    assert store.get_concept(999999999) is None
    with pytest.raises(InvalidId):
        store.get_concept(0)


def test_validate_fixture_counts(tmp_path, chest_pain_path):
    lines = open(chest_pain_path, encoding='utf-8').read().splitlines()[:3]
    fixture_path = tmp_path / 'three.jsonl'
    fixture_path.write_text('\n'.join(lines) + '\n\n', encoding='utf-8')
    concepts, errors = validate_fixture(str(fixture_path))
    assert len(concepts) == 3
    assert errors == []
    assert len(load_fixture(str(fixture_path)).concepts()) == 3


def test_fixture_duplicate_id(tmp_path, chest_pain_path):
    first_line = open(chest_pain_path, encoding='utf-8').readline()
    fixture_path = tmp_path / 'duplicate.jsonl'
    fixture_path.write_text(first_line + first_line, encoding='utf-8')
    with pytest.raises(DuplicateConceptId) as error:
        load_fixture(str(fixture_path))
    assert error.value.concept_id == 77670
    assert error.value.line_number == 2


def test_fixture_non_integer_id(tmp_path, chest_pain_path):
    first_line = open(chest_pain_path, encoding='utf-8').readline()
    fixture_path = tmp_path / 'bad.jsonl'
    fixture_path.write_text(first_line + first_line.replace('77670', '"abc"') + 'not json\n', encoding='utf-8')
    concepts, errors = validate_fixture(str(fixture_path))
    assert len(concepts) == 1
    assert [type(e) for e in errors] == [FixtureParseError, FixtureParseError]
    assert [e.line_number for e in errors] == [2, 3]


def test_concept_from_athena_record():
    concept = concept_from_athena(ATHENA_RECORDS[1])
    assert concept.concept_id == 35211388
    assert concept.standard is StandardFlag.NON_STANDARD
    assert concept.validity is Validity.VALID
    detail = concept_from_athena({'id': 4038385, 'name': 'Anginal chest pain', 'domainId': 'Condition',
                                  'vocabularyId': 'SNOMED', 'conceptClassId': 'Clinical Finding',
                                  'standardConcept': 'S', 'invalidReason': 'Deprecated'})
    assert detail.validity is Validity.INVALID
    assert detail.vocabulary_id == 'SNOMED'
    with pytest.raises(UpstreamUnavailable):
        concept_from_athena({'name': 'no id'})


def test_live_search_request_shape(clock):
    session = FakeSession(ATHENA_RECORDS, clock)
    store = live_store(session, clock)
    candidates = store.search_concepts('chest pain', SearchFilters(domain='Condition', vocabulary=('SNOMED',),
                                                                   standard_only=True))
    assert candidates.concept_ids() == [77670, 35211388]
    assert candidates.total_available == 2
    _, method, url, params = session.calls[0]
    assert method == 'GET'
    assert url == 'https://athena.example.org/api/v1/concepts'
    assert params == {'query': 'chest pain', 'page': 1, 'pageSize': 20, 'domain': 'Condition',
                      'vocabulary': 'SNOMED', 'standardConcept': 'Standard'}


def test_live_get_concept(clock):
    session = FakeSession(ATHENA_RECORDS, clock)
    store = live_store(session, clock)
    assert store.get_concept(77670).concept_name == 'Chest pain'
    assert store.get_concept(123) is None
    assert store.get_concept(77670).concept_name == 'Chest pain'
    assert len(session.calls) == 2  # the second lookup of 77670 is served from the cache


def test_live_search_is_cached_until_expiry(clock):
    session = FakeSession(ATHENA_RECORDS, clock)
    store = live_store(session, clock, cache_ttl=60)
    store.search_concepts('chest pain')
    store.search_concepts('  Chest   Pain ')
    assert len(session.calls) == 1
    clock.now += 61
    store.search_concepts('chest pain')
    assert len(session.calls) == 2


def test_live_retries_server_errors(clock):
    session = FakeSession(ATHENA_RECORDS, clock, failures=[503, requests.ConnectionError('reset')])
    store = live_store(session, clock)
    assert store.search_concepts('chest pain').concept_ids()[0] == 77670
    assert len(session.calls) == 3
    assert clock.sleeps[-2:] == [0.25, 0.5]


def test_live_does_not_retry_client_errors(clock):
    session = FakeSession(ATHENA_RECORDS, clock, failures=[400])
    store = live_store(session, clock)
    with pytest.raises(UpstreamUnavailable):
        store.search_concepts('chest pain')
    assert len(session.calls) == 1


def test_live_gives_up_after_three_attempts(clock):
    session = FakeSession(ATHENA_RECORDS, clock, failures=[500, 502, 503, 504])
    store = live_store(session, clock)
    with pytest.raises(UpstreamUnavailable):
        store.get_concept(77670)
    assert len(session.calls) == 3


def test_rate_limit_burst(clock):
    session = FakeSession(ATHENA_RECORDS, clock)
    store = live_store(session, clock, rate_limit_rps=5)
    for number in range(100):
        store.search_concepts('chest pain %d' % number)
    times = [call[0] for call in session.calls]
    assert len(times) == 100
    for index, start in enumerate(times):
        assert sum(1 for t in times[index:] if t < start + 1.0) <= 5
    assert times[-1] - times[0] >= 19.0


def test_rate_limiter_without_waiting(clock):
    limiter = RateLimiter(2, clock=clock, sleep=clock.sleep)
    limiter.acquire(wait=False)
    limiter.acquire(wait=False)
    with pytest.raises(RateLimited):
        limiter.acquire(wait=False)
    clock.now += 1.0
    limiter.acquire(wait=False)


def test_response_cache_evicts_least_recently_used(clock):
    cache = ResponseCache(ttl=100, capacity=2, clock=clock)
    cache.put('a', 1)
    cache.put('b', 2)
    assert cache.get('a') == 1
    cache.put('c', 3)
    assert cache.get('b') is None
    assert cache.get('a') == 1
    assert cache.get('c') == 3
    assert len(cache) == 2


def test_response_cache_disabled_with_zero_ttl(clock):
    cache = ResponseCache(ttl=0, capacity=10, clock=clock)
    cache.put('a', 1)
    assert cache.get('a') is None


def test_store_needs_exactly_one_backend():
    with pytest.raises(ValueError):
        VocabularyStore()
    with pytest.raises(ValueError):
        VocabularyStore(concepts=[], base_url='https://athena.example.org')


class FlakySession(FakeSession):
    """Fails the first request for every distinct query with a 503, then answers normally"""

    def __init__(self, records, clock):
        super().__init__(records, clock)
        self.seen_queries = set()

    def request(self, method, url, params=None, **kwargs):
        query = (params or {}).get('query')
        if query not in self.seen_queries:
            self.seen_queries.add(query)
            self.calls.append((self.clock(), method, url, dict(params or {})))
            return FakeResponse(503)
        return super().request(method, url, params=params, **kwargs)


def test_rate_limit_covers_retries(clock):
    session = FlakySession(ATHENA_RECORDS, clock)
    store = live_store(session, clock, rate_limit_rps=5)
    for number in range(20):
        assert store.search_concepts('chest pain %d' % number).total_available == 0
    times = [call[0] for call in session.calls]
    assert len(times) == 40
    for index, start in enumerate(times):
        assert sum(1 for t in times[index:] if t < start + 1.0) <= 5


def test_cached_search_keeps_caller_spelling(store):
    assert store.search_concepts('chest pain').query == 'chest pain'
    cached = store.search_concepts('Chest  PAIN')
    assert cached.query == 'Chest  PAIN'
    assert cached.concept_ids() == store.search_concepts('chest pain').concept_ids()


def test_fixture_invalid_utf8(tmp_path, chest_pain_path):
    lines = open(chest_pain_path, encoding='utf-8').read().splitlines()
    fixture_path = tmp_path / 'latin1.jsonl'
    fixture_path.write_bytes((lines[0] + '\n').encode('utf-8') + lines[1].replace('Pain', 'Pa\xefn').encode('latin-1')
                             + b'\n' + (lines[2] + '\n').encode('utf-8'))
    concepts, errors = validate_fixture(str(fixture_path))
    assert [c.concept_id for c in concepts] == [77670, 35211388]
    assert [type(e) for e in errors] == [FixtureParseError]
    assert errors[0].line_number == 2
    assert 'UTF-8' in str(errors[0])
    with pytest.raises(FixtureParseError):
        load_fixture(str(fixture_path))
