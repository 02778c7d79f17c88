"""The two-step mapping loop around a chat language model: infer a search keyword from the source term, retrieve
candidates from the vocabulary store, let the model select one of them, then verify the selection before it is
emitted. Rejected answers are sent back to the model with the reason, up to a fixed number of attempts.

Models are reached through an LlmPort: LiveChatEndpoint talks to any chat-completions style HTTP API with tool
calling; ScriptedMock replays a transcript of expected prompts and canned responses for offline, repeatable runs."""

__author__ = 'OMOP MCP contributors'
__copyright__ = 'Copyright (c) 2026 OMOP MCP contributors'
__license__ = 'Apache 2.0'
__version__ = '2026-10-17'  # ISO 8601 (YYYY-MM-DD)

import abc
import concurrent.futures
import dataclasses
import json
import threading
import time

import requests

import mcpserver
from athenagateway import SearchFilters
from groundingguard import NoAnswer, RetrievalFailure, VerifiedMapping, verify_mapping
from omophelpers import Config, OmopMcpError, PreconditionError, Utils
from preferenceengine import PreferenceProfile, rank_candidates, render_preferences
from vocabularycore import (OMOP_TABLES, FailureKind, MAPPING_FIELDS, ParseError, extract_json_text,
                            normalize_name, parse_mapping_output)

NO_MATCH = 'NO_MATCH'
DEFAULT_MAX_ATTEMPTS = 3
DEFAULT_CANDIDATE_LIMIT = 20

# the first line of every prompt sent for a term, which scripted transcripts match against
PHASE_KEYWORD = 'keyword inference'
PHASE_SELECTION = 'concept selection'
PHASE_CORRECTION = 'correction'
PHASE_MEMORY = 'memory mapping'


class LlmUnavailable(OmopMcpError):
    pass


class UnexpectedPrompt(OmopMcpError):
    pass


class EmptyInference(OmopMcpError):
    pass


def prompt_tag(phase, term):
    return '%s for "%s"' % (phase, term)


@dataclasses.dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict


class LlmPort(abc.ABC):
    """Send a conversation (a list of {'role', 'content'} dicts) and receive either the assistant's text or a ToolCall.
    Implementations must be safe to call from several threads at once"""

    @abc.abstractmethod
    def send(self, messages, tool_schemas=None):
        pass


class LiveChatEndpoint(LlmPort):
    def __init__(self, base_url=None, model=None, api_key=None, temperature=None, session=None, attempts=3,
                 backoff=0.25, timeout=120, sleep=time.sleep):
        self.base_url = (base_url or Config.get('llm_api_base') or '').rstrip('/')
        self.model = model or Config.get('llm_model')
        if not self.base_url or not self.model:
            raise LlmUnavailable('a live model needs both an API base URL (LLM_API_BASE) and a model name (LLM_MODEL)')
        api_key = api_key if api_key is not None else Config.get('llm_api_key', '')
        self.api_key = '' if api_key.startswith('*** your') else api_key
        self.temperature = temperature if temperature is not None else Config.get_float('llm_temperature', 0.0)
        self.session = session or requests.Session()
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout
        self.sleep = sleep

    def send(self, messages, tool_schemas=None):
        payload = {'model': self.model, 'messages': messages, 'temperature': self.temperature}
        if tool_schemas:
            payload['tools'] = [{'type': 'function', 'function': {'name': tool.name, 'description': tool.description,
                                                                   'parameters': tool.input_schema}}
                                for tool in tool_schemas]
        response = Utils.request_with_retry(self.session, 'POST', '%s/chat/completions' % self.base_url,
                                            attempts=self.attempts, backoff=self.backoff, sleep=self.sleep,
                                            type_hint='chat completion', json=payload, timeout=self.timeout,
                                            headers=Utils.api_headers(self.api_key, 'application/json'))
        if response is None:
            raise LlmUnavailable('chat completion endpoint %s is unreachable' % self.base_url)
        if response.status_code != 200:
            raise LlmUnavailable('chat completion request failed with status code %d: %s' % (
                response.status_code, response.text[:200]))

        try:
            message = response.json()['choices'][0]['message']
        except (ValueError, KeyError, IndexError, TypeError):
            raise LlmUnavailable('chat completion response is not in the expected format') from None
        tool_calls = message.get('tool_calls') or []
        if tool_calls:
            function = tool_calls[0].get('function', {})
            try:
                arguments = json.loads(function.get('arguments') or '{}')
            except ValueError:
                arguments = {}
            return ToolCall(name=function.get('name', ''), arguments=arguments if isinstance(arguments, dict) else {})
        return message.get('content') or ''


class ScriptedMock(LlmPort):
    """Replays a transcript of {'expect_substring': ..., 'respond': ...} steps. Each prompt consumes the first unused
    step whose expect_substring occurs in the newest message, so concurrent terms never steal each other's steps as
    long as every step names its term (see prompt_tag). A `respond` value of {'tool_call': {'name': ...,
    'arguments': {...}}} is returned as a ToolCall; anything else is returned as text. Prompts that match no step
    raise UnexpectedPrompt"""

    def __init__(self, steps):
        self.steps = []
        for index, step in enumerate(steps):
            if not isinstance(step, dict) or 'expect_substring' not in step or 'respond' not in step:
                raise ValueError('transcript step %d needs both expect_substring and respond' % (index + 1))
            self.steps.append(step)
        self.used = [False] * len(self.steps)
        self.lock = threading.Lock()

    @staticmethod
    def from_file(path):
        with open(path, encoding='utf-8') as transcript_file:
            steps = json.load(transcript_file)
        if not isinstance(steps, list):
            raise ValueError('mock transcript %s must contain a JSON list' % path)
        return ScriptedMock(steps)

    def send(self, messages, tool_schemas=None):
        prompt = messages[-1]['content'] if messages else ''
        with self.lock:
            for index, step in enumerate(self.steps):
                if not self.used[index] and step['expect_substring'] in prompt:
                    self.used[index] = True
                    respond = step['respond']
                    break
            else:
                raise UnexpectedPrompt('no scripted response for prompt starting %r' % prompt[:120])
        if isinstance(respond, dict) and 'tool_call' in respond:
            return ToolCall(name=respond['tool_call']['name'], arguments=dict(respond['tool_call'].get('arguments',
                                                                                                        {})))
        return respond if isinstance(respond, str) else json.dumps(respond)

    def remaining(self):
        return self.used.count(False)


@dataclasses.dataclass(frozen=True)
class MappingRequest:
    source_term: str
    target_table: str = None
    target_field: str = None
    context: str = None
    profile: PreferenceProfile = dataclasses.field(default_factory=PreferenceProfile)

    def __post_init__(self):
        if not (self.source_term or '').strip():
            raise PreconditionError('source term must not be empty')


@dataclasses.dataclass(frozen=True)
class AuditedMapping:
    request: MappingRequest
    verified: VerifiedMapping
    candidates_considered: tuple
    attempts: int
    elapsed: float

    def __post_init__(self):
        if self.verified.authenticated_concept.concept_id not in [c.concept_id for c in self.candidates_considered]:
            raise ValueError('an audited mapping must select one of the retrieved candidates')


@dataclasses.dataclass(frozen=True)
class BatchItem:
    request: MappingRequest
    outcome: object  # AuditedMapping, VerifiedMapping, RetrievalFailure or NoAnswer; None when `error` is set
    elapsed_seconds: float
    error: str = None


def output_schema():
    example = {field: '...' for field in MAPPING_FIELDS}
    example['concept_id'] = 0
    return json.dumps(example)


def build_system_prompt(profile, resources=()):
    sections = [
        'You map clinical source terms to OMOP CDM standard concepts using the OHDSI Athena vocabulary.',
        'Work in three phases:\n'
        '1. Interpret the user input: infer the medical term (expanding abbreviations and correcting typos), the '
        'target OMOP table and field, and any context requirements.\n'
        '2. Call the available tool (search_athena) with the inferred keyword to query OHDSI Athena for vocabulary '
        'candidates.\n'
        '3. Choose the best match among the returned candidates based on semantic fit and metadata context.',
        '(a) Tool use: You are not allowed to invent concept IDs and must use the tool to look them up. Only answer '
        'with a concept_id and concept_name exactly as they appear in the retrieved candidates.',
        '(b) Output format: Return the final answer as a single JSON object with exactly these fields:\n%s\n'
        '"class" is the OMOP concept class, "validity" is Valid or Invalid, and "domain_id" and "domain" both hold '
        'the concept\'s domain. If none of the candidates is appropriate, reply with %s instead.' % (
            output_schema(), NO_MATCH),
        '(c) Vocabulary preferences (defaults that the user may override at runtime):\n%s' % render_preferences(
            profile),
        '(d) Reasoning: In the "reasoning" field, explain in detail both how you inferred the search keyword from the '
        'user input and why you selected this concept over the other candidates.'
    ]
    for resource in resources:
        if isinstance(resource, str):
            sections.append(resource)
        else:
            sections.append('Resource %s (%s):\n%s' % (resource.uri, resource.name, resource.content))
    return '\n\n'.join(sections)


def describe_request(request):
    lines = ['Source term: %s' % request.source_term]
    if request.target_table:
        lines.append('Target OMOP table: %s' % request.target_table)
        if request.target_table in OMOP_TABLES and not request.target_field:
            lines.append('Target field: %s' % OMOP_TABLES[request.target_table][1])
    if request.target_field:
        lines.append('Target field: %s' % request.target_field)
    if request.context:
        lines.append('Clinical context: %s' % request.context)
    if request.profile.user_override:
        lines.append('User instruction: %s' % request.profile.user_override)
    return '\n'.join(lines)


def candidate_table(concepts):
    lines = ['concept_id|concept_name|domain|vocabulary|class|standard|validity']
    for concept in concepts:
        lines.append('%d|%s|%s|%s|%s|%s|%s' % (concept.concept_id, concept.concept_name, concept.domain_id,
                                               concept.vocabulary_id, concept.concept_class, concept.standard.value,
                                               concept.validity.value))
    return '\n'.join(lines)


def keyword_from_reply(reply):
    if isinstance(reply, ToolCall):
        return str(reply.arguments.get('keyword') or '').strip()
    text = (reply or '').strip()
    json_text = extract_json_text(text)
    if json_text.startswith('{'):
        try:
            parsed = json.loads(json_text)
            if isinstance(parsed, dict):
                return str(parsed.get('inferred_keyword') or parsed.get('keyword') or '').strip()
        except ValueError:
            pass
    for line in text.splitlines():
        if line.strip():
            return line.strip().strip('"\'`').strip()
    return ''


def is_refusal(reply):
    return isinstance(reply, str) and reply.strip().strip('`"\'.').strip().upper().startswith(NO_MATCH)


def infer_keyword(request, llm, system_prompt=None, messages=None):
    """Ask the model for the search keyword. When `messages` is given the exchange is appended to it, so that the
    selection step continues the same conversation"""
    if not (request.source_term or '').strip():
        raise PreconditionError('source term must not be empty')
    if messages is None:
        messages = [{'role': 'system', 'content': system_prompt or build_system_prompt(request.profile)}]
    messages.append({'role': 'user', 'content': '%s\n%s\n\nInfer the medical search keyword for this term. Either '
                                                'call search_athena with it, or reply with a JSON object {"inferred_'
                                                'keyword": "...", "reasoning": "..."}.' % (
                                                    prompt_tag(PHASE_KEYWORD, request.source_term),
                                                    describe_request(request))})
    reply = llm.send(messages, tool_schemas=[mcpserver.SEARCH_TOOL])
    keyword = keyword_from_reply(reply)
    if isinstance(reply, ToolCall):
        messages.append({'role': 'assistant', 'content': 'search_athena(%s)' % json.dumps(reply.arguments)})
    else:
        messages.append({'role': 'assistant', 'content': reply})
    if not keyword:
        raise EmptyInference('the model returned no keyword for "%s"' % request.source_term)
    return keyword


def retrieve_candidates(request, keyword, store, candidate_limit):
    candidates = store.search_concepts(keyword, SearchFilters(page_size=candidate_limit))
    if not len(candidates) and normalize_name(keyword) != normalize_name(request.source_term):
        Utils.report('WARNING: no candidates for inferred keyword "%s"; retrying search with "%s"' % (
            keyword, request.source_term))
        candidates = store.search_concepts(request.source_term, SearchFilters(page_size=candidate_limit))
    return candidates


def map_term(request, llm, store, max_attempts=None, candidate_limit=None, resources=None, clock=time.perf_counter):
    started = clock()
    if max_attempts is None:
        max_attempts = Config.get_int('max_attempts', DEFAULT_MAX_ATTEMPTS)
    if candidate_limit is None:
        candidate_limit = Config.get_int('candidate_limit', DEFAULT_CANDIDATE_LIMIT)
    max_attempts = max(1, max_attempts)
    if resources is None:
        resources = mcpserver.register_default_resources(request.profile)
    messages = [{'role': 'system', 'content': build_system_prompt(request.profile, resources)}]

    keyword = None
    for inference_attempt in range(1, max_attempts + 1):
        try:
            keyword = infer_keyword(request, llm, messages=messages)
            break
        except EmptyInference as e:
            Utils.report('WARNING:', e, '(attempt %d of %d)' % (inference_attempt, max_attempts))
    if keyword is None:
        return RetrievalFailure(FailureKind.NO_MAPPING_FOUND, request.source_term,
                                'no search keyword could be inferred after %d attempts' % max_attempts)

    candidate_set = retrieve_candidates(request, keyword, store, candidate_limit)
    ranked = tuple(rank_candidates(candidate_set, request.profile, keyword)[:candidate_limit])
    candidate_ids = {concept.concept_id for concept in ranked}
    messages.append({'role': 'user', 'content': '%s\nInferred keyword: %s\nAthena returned %d candidate concepts '
                                                '(%d shown, ordered by vocabulary preference):\n%s\n\nChoose the best '
                                                'match from this list and reply with the JSON object described in '
                                                'the instructions, or %s if none is appropriate.' % (
                                                    prompt_tag(PHASE_SELECTION, request.source_term), keyword,
                                                    candidate_set.total_available, len(ranked),
                                                    candidate_table(ranked), NO_MATCH)})

    last_problem = None
    for attempt in range(1, max_attempts + 1):
        if attempt > 1:
            messages.append({'role': 'user', 'content': '%s (attempt %d of %d)\nYour previous answer was rejected: %s'
                                                        '\nChoose again from the candidate list above, copying '
                                                        'concept_id and concept_name exactly, or reply %s.' % (
                                                            prompt_tag(PHASE_CORRECTION, request.source_term),
                                                            attempt, max_attempts, last_problem, NO_MATCH)})
        reply = llm.send(messages)
        messages.append({'role': 'assistant', 'content': reply if isinstance(reply, str) else json.dumps(
            dataclasses.asdict(reply))})

        if is_refusal(reply):
            return RetrievalFailure(FailureKind.NO_MAPPING_FOUND, request.source_term,
                                    'the model found no appropriate candidate for keyword "%s"' % keyword)
        if isinstance(reply, ToolCall):
            last_problem = 'tool calls are not available in this step; answer with the JSON object'
            continue
        try:
            result = parse_mapping_output(reply)
        except ParseError as e:
            last_problem = 'the answer could not be parsed (%s)' % e
            continue
        if not result.inferred_keyword:
            result = dataclasses.replace(result, inferred_keyword=keyword)

        outcome = verify_mapping(result, store, term=request.source_term)
        if isinstance(outcome, RetrievalFailure):
            last_problem = outcome.detail
            continue
        if result.concept_id not in candidate_ids:
            last_problem = 'concept ID %d was not among the retrieved candidates' % result.concept_id
            continue
        return AuditedMapping(request=request, verified=outcome, candidates_considered=ranked, attempts=attempt,
                              elapsed=clock() - started)

    Utils.report('WARNING: no verified mapping for "%s" after %d attempts - last problem: %s' % (
        request.source_term, max_attempts, last_problem))
    return RetrievalFailure(FailureKind.NO_MAPPING_FOUND, request.source_term,
                            'no verified mapping after %d attempts (last problem: %s)' % (max_attempts, last_problem))


def map_term_without_tools(request, llm, store, resources=()):
    """The no-tool ablation: the model answers from its own knowledge with the same instructions and output format,
    and the store is consulted only afterwards, to classify the answer. Returns a VerifiedMapping, RetrievalFailure
    or NoAnswer"""
    messages = [{'role': 'system', 'content': build_system_prompt(request.profile, resources)},
                {'role': 'user', 'content': '%s\n%s\n\nNo tools are available; map this term using your own '
                                            'knowledge and reply with the JSON object described in the instructions, '
                                            'or %s.' % (prompt_tag(PHASE_MEMORY, request.source_term),
                                                        describe_request(request), NO_MATCH)}]
    reply = llm.send(messages)
    if is_refusal(reply) or isinstance(reply, ToolCall):
        return NoAnswer(request.source_term, 'the model declined to answer')
    try:
        result = parse_mapping_output(reply)
    except ParseError as e:
        return NoAnswer(request.source_term, 'the answer could not be parsed (%s)' % e)
    return verify_mapping(result, store, term=request.source_term)


def map_batch(requests_list, llm, store, parallelism=1, mapper=None, clock=time.perf_counter, **mapper_options):
    """Map every request (concurrently, when parallelism > 1), returning BatchItems in input order. Errors are
    recorded per item rather than aborting the batch"""
    if parallelism < 1:
        raise PreconditionError('parallelism must be at least 1')
    mapper = mapper or map_term

    def map_one(request):
        item_started = clock()
        try:
            outcome = mapper(request, llm, store, **mapper_options)
        except OmopMcpError as e:
            Utils.report('ERROR: unable to map "%s":' % request.source_term, e)
            return BatchItem(request=request, outcome=None, elapsed_seconds=clock() - item_started, error=str(e))
        return BatchItem(request=request, outcome=outcome, elapsed_seconds=clock() - item_started)

    with concurrent.futures.ThreadPoolExecutor(max_workers=parallelism) as executor:
        return list(executor.map(map_one, requests_list))
