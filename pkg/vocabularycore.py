"""Domain types shared by every part of the mapping toolkit: OMOP vocabulary concepts, the structured mapping answer
that the language model returns, and the parsing/serialisation of that answer. Only the concept/vocabulary slice of the
OMOP CDM that the mapping task touches is modelled here."""

__author__ = 'OMOP MCP contributors'
__copyright__ = 'Copyright (c) 2026 OMOP MCP contributors'
__license__ = 'Apache 2.0'
__version__ = '2026-10-17'  # ISO 8601 (YYYY-MM-DD)

import dataclasses
import enum
import json
import re

from omophelpers import Config, OmopMcpError

DEFAULT_ATHENA_WEB_BASE = 'https://athena.ohdsi.org'

# canonical JSON field names of a mapping answer, in output order (`class` is the OMOP concept class)
MAPPING_FIELDS = ['concept_id', 'concept_name', 'domain_id', 'class', 'validity', 'domain', 'vocabulary',
                  'concept_url', 'reasoning', 'inferred_keyword']
REQUIRED_MAPPING_FIELDS = MAPPING_FIELDS[:-1]  # inferred_keyword is added by the orchestrator when missing

# the subset of OMOP CDM event tables that hold mapped concepts: table -> (domain, concept field)
OMOP_TABLES = {
    'condition_occurrence': ('Condition', 'condition_concept_id'),
    'drug_exposure': ('Drug', 'drug_concept_id'),
    'measurement': ('Measurement', 'measurement_concept_id'),
    'procedure_occurrence': ('Procedure', 'procedure_concept_id'),
    'observation': ('Observation', 'observation_concept_id'),
    'device_exposure': ('Device', 'device_concept_id'),
    'visit_occurrence': ('Visit', 'visit_concept_id'),
    'specimen': ('Specimen', 'specimen_concept_id')
}

FENCED_BLOCK_REGEX = re.compile(r'```[A-Za-z0-9_-]*\s*\n?(.*?)```', re.DOTALL)


class InvalidId(OmopMcpError):
    def __init__(self, concept_id):
        super().__init__('invalid concept ID %r - OMOP concept IDs are integers >= 1' % (concept_id,))
        self.concept_id = concept_id


class ParseFailure(enum.Enum):
    MISSING_FIELD = 'MissingField'
    MALFORMED_JSON = 'MalformedJson'
    NON_INTEGER_CONCEPT_ID = 'NonIntegerConceptId'


class ParseError(OmopMcpError):
    def __init__(self, reason, field=None, detail=None):
        message = reason.value
        if field:
            message += '(%s)' % field
        if detail:
            message += ': %s' % detail
        super().__init__(message)
        self.reason = reason
        self.field = field


class StandardFlag(enum.Enum):
    STANDARD = 'S'
    NON_STANDARD = 'N'
    CLASSIFICATION = 'C'

    @property
    def label(self):
        return {'S': 'Standard', 'N': 'Non-standard', 'C': 'Classification'}[self.value]

    @staticmethod
    def parse(value):
        """Accept both the single-letter CDM codes and the labels used by the Athena web service"""
        text = (value or '').strip().lower()
        if text in ('s', 'standard'):
            return StandardFlag.STANDARD
        if text in ('c', 'classification'):
            return StandardFlag.CLASSIFICATION
        return StandardFlag.NON_STANDARD


class Validity(enum.Enum):
    VALID = 'V'
    INVALID = 'I'

    @property
    def label(self):
        return 'Valid' if self is Validity.VALID else 'Invalid'

    @staticmethod
    def from_invalid_reason(invalid_reason):
        # CDM invalid_reason is null for valid concepts; Athena's search API reports the string 'Valid' instead
        text = (invalid_reason or '').strip().lower()
        return Validity.VALID if text in ('', 'v', 'valid', 'none', 'null') else Validity.INVALID


class FailureKind(enum.Enum):
    NO_MAPPING_FOUND = 'no_mapping_found'
    NON_EXISTENT_CONCEPT_ID = 'non_existent_id'
    CONCEPT_ID_NAME_MISMATCH = 'name_mismatch'


SUCCESS = 'success'


def parse_outcome(text):
    """Convert an outcome code (`success`, `no_mapping_found`, `non_existent_id` or `name_mismatch`) to SUCCESS or a
    FailureKind; raises ValueError for anything else"""
    code = (text or '').strip().lower()
    if code == SUCCESS:
        return SUCCESS
    return FailureKind(code)


def outcome_code(outcome):
    return SUCCESS if outcome == SUCCESS else outcome.value


def normalize_name(name):
    return ' '.join((name or '').casefold().split())


def concept_url(concept_id, web_base=None):
    if isinstance(concept_id, bool) or not isinstance(concept_id, int) or concept_id < 1:
        raise InvalidId(concept_id)
    if web_base is None:
        web_base = Config.get('athena_web_base', DEFAULT_ATHENA_WEB_BASE)
    return '%s/search-terms/terms/%d' % (web_base.rstrip('/'), concept_id)


@dataclasses.dataclass(frozen=True)
class Concept:
    concept_id: int
    concept_name: str
    domain_id: str
    vocabulary_id: str
    concept_class: str
    standard: StandardFlag = StandardFlag.STANDARD
    validity: Validity = Validity.VALID

    def __post_init__(self):
        if isinstance(self.concept_id, bool) or not isinstance(self.concept_id, int) or self.concept_id < 1:
            raise InvalidId(self.concept_id)
        if not (self.concept_name or '').strip():
            raise ValueError('concept %d has an empty concept_name' % self.concept_id)

    def to_dict(self):
        # the snapshot/fixture format: single-letter codes for the two flags
        return {'concept_id': self.concept_id, 'concept_name': self.concept_name, 'domain_id': self.domain_id,
                'vocabulary_id': self.vocabulary_id, 'concept_class': self.concept_class,
                'standard': self.standard.value, 'validity': self.validity.value}

    @staticmethod
    def from_dict(record):
        concept_id = record['concept_id']
        if isinstance(concept_id, bool) or not isinstance(concept_id, int):
            raise InvalidId(concept_id)
        return Concept(concept_id=concept_id, concept_name=str(record['concept_name']),
                       domain_id=str(record.get('domain_id') or ''), vocabulary_id=str(record.get('vocabulary_id') or ''),
                       concept_class=str(record.get('concept_class') or ''),
                       standard=StandardFlag(record.get('standard') or 'N'),
                       validity=Validity(record.get('validity') or 'V'))


def serialize_concept(concept):
    return json.dumps(concept.to_dict(), ensure_ascii=False, separators=(',', ':'))


def parse_concept(line):
    return Concept.from_dict(json.loads(line))


@dataclasses.dataclass(frozen=True)
class CandidateSet:
    query: str
    candidates: tuple
    total_available: int
    page: int = 1
    page_size: int = 20

    def __post_init__(self):
        if self.page < 1 or self.page_size < 1:
            raise ValueError('page and page_size must be >= 1')
        if len(self.candidates) > self.page_size:
            raise ValueError('candidate set holds more concepts than its page size')
        if self.page == 1 and self.total_available < len(self.candidates):
            raise ValueError('total_available is smaller than the number of candidates on the first page')

    def __len__(self):
        return len(self.candidates)

    def concept_ids(self):
        return [concept.concept_id for concept in self.candidates]


@dataclasses.dataclass(frozen=True)
class MappingResult:
    concept_id: int
    concept_name: str
    domain_id: str
    concept_class: str
    validity: str
    domain: str
    vocabulary: str
    concept_url: str
    reasoning: str
    inferred_keyword: str = ''

    def to_dict(self):
        return {'concept_id': self.concept_id, 'concept_name': self.concept_name, 'domain_id': self.domain_id,
                'class': self.concept_class, 'validity': self.validity, 'domain': self.domain,
                'vocabulary': self.vocabulary, 'concept_url': self.concept_url, 'reasoning': self.reasoning,
                'inferred_keyword': self.inferred_keyword}

    @staticmethod
    def from_concept(concept, reasoning, inferred_keyword='', web_base=None):
        """The answer a perfectly grounded model would give for `concept`. Both domain fields carry the vocabulary's
        domain value, as the published output schema lists both without distinguishing them"""
        return MappingResult(concept_id=concept.concept_id, concept_name=concept.concept_name,
                             domain_id=concept.domain_id, concept_class=concept.concept_class,
                             validity=concept.validity.label, domain=concept.domain_id,
                             vocabulary=concept.vocabulary_id, concept_url=concept_url(concept.concept_id, web_base),
                             reasoning=reasoning, inferred_keyword=inferred_keyword)


def serialize_mapping(mapping):
    return json.dumps(mapping.to_dict(), ensure_ascii=False)


def extract_json_text(raw):
    """Strip code fences and any prose around the JSON object in a model's final message"""
    text = (raw or '').strip()
    fenced = FENCED_BLOCK_REGEX.search(text)
    if fenced:
        text = fenced.group(1).strip()
    start = text.find('{')
    end = text.rfind('}')
    if start < 0 or end < start:
        return text
    return text[start:end + 1]


def parse_concept_id(value):
    if isinstance(value, bool):
        raise ParseError(ParseFailure.NON_INTEGER_CONCEPT_ID, detail=repr(value))
    if isinstance(value, str) and re.fullmatch(r'\s*\d+\s*', value):
        value = int(value)  # models quite often quote numbers
    if not isinstance(value, int) or value < 1:
        raise ParseError(ParseFailure.NON_INTEGER_CONCEPT_ID, detail=repr(value))
    return value


def parse_mapping_output(raw):
    text = extract_json_text(raw)
    if not text:
        raise ParseError(ParseFailure.MALFORMED_JSON, detail='empty response')
    try:
        parsed = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(ParseFailure.MALFORMED_JSON, detail=str(e)) from None
    if not isinstance(parsed, dict):
        raise ParseError(ParseFailure.MALFORMED_JSON, detail='expected a JSON object')

    if 'concept_url' not in parsed and 'concept URL' in parsed:
        parsed['concept_url'] = parsed['concept URL']  # the field's name as written in the prompt schema
    for field in REQUIRED_MAPPING_FIELDS:
        if field not in parsed or parsed[field] is None:
            raise ParseError(ParseFailure.MISSING_FIELD, field=field)
    if not str(parsed['reasoning']).strip():
        raise ParseError(ParseFailure.MISSING_FIELD, field='reasoning', detail='reasoning must not be empty')

    return MappingResult(concept_id=parse_concept_id(parsed['concept_id']),
                         concept_name=str(parsed['concept_name']), domain_id=str(parsed['domain_id']),
                         concept_class=str(parsed['class']), validity=str(parsed['validity']),
                         domain=str(parsed['domain']), vocabulary=str(parsed['vocabulary']),
                         concept_url=str(parsed['concept_url']), reasoning=str(parsed['reasoning']),
                         inferred_keyword=str(parsed.get('inferred_keyword') or ''))
