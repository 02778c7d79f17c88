"""Verification of every mapping answer against the vocabulary store. A mapping is only accepted when its concept ID
exists and its concept name matches the vocabulary's own name for that ID (after case and whitespace normalisation);
everything else is classified as one of the three retrieval failure kinds. Name matching is deliberately exact: any
fuzziness would let a plausible-looking fabricated pair through."""

__author__ = 'OMOP MCP contributors'
__copyright__ = 'Copyright (c) 2026 OMOP MCP contributors'
__license__ = 'Apache 2.0'
__version__ = '2026-10-17'  # ISO 8601 (YYYY-MM-DD)

import dataclasses
import datetime

from vocabularycore import SUCCESS, Concept, FailureKind, MappingResult, normalize_name


@dataclasses.dataclass(frozen=True)
class VerifiedMapping:
    result: MappingResult
    authenticated_concept: Concept
    verified_at: datetime.datetime

    def __post_init__(self):
        if self.result.concept_id != self.authenticated_concept.concept_id:
            raise ValueError('verified mapping ID does not match its authenticated concept')
        if normalize_name(self.result.concept_name) != normalize_name(self.authenticated_concept.concept_name):
            raise ValueError('verified mapping name does not match its authenticated concept')


@dataclasses.dataclass(frozen=True)
class RetrievalFailure:
    kind: FailureKind
    term: str
    detail: str


@dataclasses.dataclass(frozen=True)
class NoAnswer:
    """The agent declined to produce a mapping"""
    term: str
    detail: str = ''


def utc_now():
    return datetime.datetime.now(datetime.timezone.utc)


def verify_mapping(result, store, term=None, clock=utc_now):
    """Check `result` against `store`. Lookup errors (e.g., UpstreamUnavailable) propagate: verification never passes
    silently when the vocabulary cannot be consulted"""
    term = term if term is not None else result.inferred_keyword
    concept = store.get_concept(result.concept_id)
    if concept is None:
        return RetrievalFailure(FailureKind.NON_EXISTENT_CONCEPT_ID, term,
                                'concept ID %d does not exist in the vocabulary' % result.concept_id)
    if normalize_name(concept.concept_name) != normalize_name(result.concept_name):
        return RetrievalFailure(FailureKind.CONCEPT_ID_NAME_MISMATCH, term,
                                'concept ID %d is "%s" in the vocabulary, not "%s"' % (
                                    result.concept_id, concept.concept_name, result.concept_name))
    return VerifiedMapping(result=result, authenticated_concept=concept, verified_at=clock())


def classify_outcome(outcome):
    # audited mappings (see agentorchestrator) wrap their verified mapping
    verified = getattr(outcome, 'verified', outcome)
    if isinstance(verified, VerifiedMapping):
        return SUCCESS
    if isinstance(outcome, NoAnswer):
        return FailureKind.NO_MAPPING_FOUND
    if isinstance(outcome, RetrievalFailure):
        return outcome.kind
    raise TypeError('cannot classify outcome of type %s' % type(outcome).__name__)
