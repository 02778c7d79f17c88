"""Shared test fixtures: the chest pain vocabulary snapshot, an injectable clock, and builders for scripted model
transcripts."""

import json
import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from athenagateway import load_fixture  # noqa: E402
from omophelpers import Config  # noqa: E402
from vocabularycore import MappingResult  # noqa: E402

DATA_DIRECTORY = os.path.join(os.path.dirname(__file__), 'data')
ENVIRONMENT_KEYS = ['ATHENA_BASE_URL', 'ATHENA_RATE_LIMIT_RPS', 'ATHENA_CACHE_TTL_SECS', 'OMOP_MCP_FIXTURE',
                    'LLM_API_BASE', 'LLM_API_KEY', 'LLM_MODEL', 'OMOP_MCP_MAX_ATTEMPTS', 'OMOP_MCP_CANDIDATE_LIMIT',
                    'OMOP_MCP_PREFERENCE_FILE', 'OMOP_MCP_ATHENA_WEB_BASE']


class FakeClock:
    """A monotonic clock that only moves when something sleeps on it"""

    def __init__(self, start=1000.0):
        self.now = start
        self.sleeps = []

    def __call__(self):
        return self.now

    def sleep(self, seconds):
        self.sleeps.append(seconds)
        self.now += seconds


@pytest.fixture(autouse=True)
def isolated_config(monkeypatch):
    for key in ENVIRONMENT_KEYS:
        monkeypatch.delenv(key, raising=False)
    Config.reload()
    yield
    Config.reload()


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def chest_pain_path():
    return os.path.join(DATA_DIRECTORY, 'chest_pain.jsonl')


@pytest.fixture
def store(chest_pain_path):
    return load_fixture(chest_pain_path, cache_ttl=60, cache_capacity=100)


@pytest.fixture
def answer_for():
    """Build the JSON answer a well-behaved model gives for a concept (optionally with a different name)"""

    def build(concept, concept_name=None, concept_id=None, reasoning='Best semantic match among the candidates'):
        result = MappingResult.from_concept(concept, reasoning)
        answer = result.to_dict()
        if concept_name is not None:
            answer['concept_name'] = concept_name
        if concept_id is not None:
            answer['concept_id'] = concept_id
        answer.pop('inferred_keyword')
        return json.dumps(answer)

    return build


@pytest.fixture
def cooperative_steps(answer_for):
    """Transcript steps for one term: the keyword is inferred via a search tool call, then `concept` is selected"""

    def build(term, keyword, concept):
        return [{'expect_substring': 'keyword inference for "%s"' % term,
                 'respond': {'tool_call': {'name': 'search_athena', 'arguments': {'keyword': keyword}}}},
                {'expect_substring': 'concept selection for "%s"' % term, 'respond': answer_for(concept)}]

    return build


@pytest.fixture
def write_transcript(tmp_path):
    def write(steps, name='transcript.json'):
        path = tmp_path / name
        path.write_text(json.dumps(steps), encoding='utf-8')
        return str(path)

    return write
