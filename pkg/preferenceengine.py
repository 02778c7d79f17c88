"""Vocabulary preferences that follow OMOP recommendations (standard and valid concepts first, SNOMED for conditions,
RxNorm for drugs, LOINC for measurements, and so on), optionally overridden by a free-text instruction given at
runtime. Candidates are pre-ranked deterministically using these preferences before the language model makes its
final choice."""

__author__ = 'OMOP MCP contributors'
__copyright__ = 'Copyright (c) 2026 OMOP MCP contributors'
__license__ = 'Apache 2.0'
__version__ = '2026-10-17'  # ISO 8601 (YYYY-MM-DD)

import dataclasses
import json
import os
import re

from omophelpers import Config, ConfigError
from vocabularycore import CandidateSet, StandardFlag, Validity, normalize_name

DEFAULT_DOMAIN_VOCABULARIES = {
    'Condition': ['SNOMED'],
    'Drug': ['RxNorm', 'RxNorm Extension'],
    'Measurement': ['LOINC'],
    'Procedure': ['SNOMED', 'CPT4']
}

# vocabulary identifiers recognised in runtime overrides, with the informal names people tend to use for them
VOCABULARY_ALIASES = {
    'SNOMED': ['snomed ct', 'snomed-ct', 'snomedct', 'snomed'],
    'RxNorm Extension': ['rxnorm extension'],
    'RxNorm': ['rxnorm'],
    'LOINC': ['loinc'],
    'CPT4': ['cpt4', 'cpt-4', 'cpt'],
    'HCPCS': ['hcpcs'],
    'ICD9CM': ['icd9cm', 'icd-9-cm', 'icd-9', 'icd9'],
    'ICD9Proc': ['icd9proc', 'icd-9 procedures'],
    'ICD10CM': ['icd10cm', 'icd-10-cm', 'icd-10', 'icd10'],
    'ICD10PCS': ['icd10pcs', 'icd-10-pcs'],
    'NDC': ['ndc'],
    'ATC': ['atc'],
    'MeSH': ['mesh'],
    'UCUM': ['ucum']
}

NON_STANDARD_REGEX = re.compile(r'\bnon[- ]?standard\b', re.IGNORECASE)
INVALID_REGEX = re.compile(r'\b(?:invalid|deprecated|retired)\b', re.IGNORECASE)
CLAUSE_BREAK_REGEX = re.compile(r'[,.;:!?]|\b(?:but|and|however|though)\b', re.IGNORECASE)
NEGATION_REGEX = re.compile(r"\b(?:no|not|never|avoid|avoiding|exclude|excluding|without|nor|don't|dont|cannot|can't|"
                            r"shouldn't|won't|disallow|forbid|forbidden|reject)\b", re.IGNORECASE)
PERMISSION_REGEX = re.compile(r'\b(?:allow|allowed|accept|accepted|acceptable|use|using|include|including|permit|'
                              r'permitted|ok|okay|fine|prefer|want|even)\b', re.IGNORECASE)


@dataclasses.dataclass(frozen=True)
class PreferenceProfile:
    prefer_standard: bool = True
    prefer_valid: bool = True
    domain_vocab_defaults: dict = dataclasses.field(
        default_factory=lambda: {domain: list(vocabularies) for domain, vocabularies in
                                 DEFAULT_DOMAIN_VOCABULARIES.items()})
    user_override: str = None
    override_vocabularies: tuple = ()
    target_domain: str = None

    def __post_init__(self):
        object.__setattr__(self, 'override_vocabularies', tuple(self.override_vocabularies or ()))

    def preferred_vocabularies(self, domain=None):
        """Override vocabularies first, then the defaults for `domain` (or the profile's target domain)"""
        domain = self.target_domain or domain
        preferred = list(self.override_vocabularies)
        for vocabulary in self._domain_defaults(domain):
            if vocabulary not in preferred:
                preferred.append(vocabulary)
        return preferred

    def _domain_defaults(self, domain):
        if not domain:
            return []
        for known_domain, vocabularies in self.domain_vocab_defaults.items():
            if normalize_name(known_domain) == normalize_name(domain):
                return vocabularies
        return []

    def to_dict(self):
        return {'prefer_standard': self.prefer_standard, 'prefer_valid': self.prefer_valid,
                'domain_vocab_defaults': {domain: list(v) for domain, v in self.domain_vocab_defaults.items()}}


def parse_override_vocabularies(override):
    """Find the vocabulary identifiers named in a free-text override, in the order they are mentioned"""
    text = (override or '').lower()
    alias_list = sorted(((alias, vocabulary) for vocabulary, aliases in VOCABULARY_ALIASES.items() for alias in aliases),
                        key=lambda entry: -len(entry[0]))  # longest first, so 'rxnorm extension' beats 'rxnorm'
    claimed = []
    found = []
    for alias, vocabulary in alias_list:
        for match in re.finditer(r'(?<![\w-])%s(?![\w-])' % re.escape(alias), text):
            span = match.span()
            if any(span[0] < end and start < span[1] for start, end in claimed):
                continue
            claimed.append(span)
            found.append((span[0], vocabulary))
    ordered = []
    for _, vocabulary in sorted(found):
        if vocabulary not in ordered:
            ordered.append(vocabulary)
    return ordered


def load_profile(path):
    try:
        with open(path, encoding='utf-8') as profile_file:
            profile_json = json.load(profile_file)
    except (OSError, ValueError) as e:
        raise ConfigError('unable to read preference file %s: %s' % (path, e)) from None
    if not isinstance(profile_json, dict):
        raise ConfigError('preference file %s must contain a JSON object' % path)

    profile = PreferenceProfile()
    domain_defaults = profile_json.get('domain_vocab_defaults', profile.domain_vocab_defaults)
    if not isinstance(domain_defaults, dict) or not all(isinstance(v, list) for v in domain_defaults.values()):
        raise ConfigError('domain_vocab_defaults in %s must map domains to vocabulary lists' % path)

    # configured domains extend (or replace) the built-in ones, which must always be present
    merged_defaults = dict(profile.domain_vocab_defaults)
    merged_defaults.update({str(domain): [str(v) for v in vocabularies] for domain, vocabularies in
                            domain_defaults.items()})
    return PreferenceProfile(prefer_standard=bool(profile_json.get('prefer_standard', True)),
                             prefer_valid=bool(profile_json.get('prefer_valid', True)),
                             domain_vocab_defaults=merged_defaults)


def dump_profile(profile, path):
    with open(path, 'w', encoding='utf-8') as profile_file:
        json.dump(profile.to_dict(), profile_file, indent=2)


def override_allows(override, mention_regex):
    """Whether a free-text override permits what `mention_regex` names (e.g., 'non-standard codes are fine'). A
    mention only counts when the override uses permissive wording and the clause holding the mention is not negated,
    so 'never non-standard codes' leaves the preference in place"""
    if not override or not PERMISSION_REGEX.search(override):
        return False
    for clause in CLAUSE_BREAK_REGEX.split(override):
        if mention_regex.search(clause) and not NEGATION_REGEX.search(clause):
            return True
    return False


def resolve_profile(target_domain=None, override=None, base=None):
    if base is None:
        profile_file = Config.get('preference_file')
        base = load_profile(profile_file) if profile_file and os.path.exists(profile_file) else PreferenceProfile()

    prefer_standard = base.prefer_standard
    prefer_valid = base.prefer_valid
    override = override.strip() if override and override.strip() else None
    if override_allows(override, NON_STANDARD_REGEX):
        prefer_standard = False
    if override_allows(override, INVALID_REGEX):
        prefer_valid = False

    return dataclasses.replace(base, prefer_standard=prefer_standard, prefer_valid=prefer_valid,
                               user_override=override, override_vocabularies=tuple(parse_override_vocabularies(override)),
                               target_domain=target_domain or None)


def rank_key(concept, profile, normalized_query):
    preferred = profile.preferred_vocabularies(concept.domain_id)
    try:
        vocabulary_rank = preferred.index(concept.vocabulary_id)
    except ValueError:
        vocabulary_rank = len(preferred)
    return (0 if not profile.prefer_standard or concept.standard is StandardFlag.STANDARD else 1,
            0 if not profile.prefer_valid or concept.validity is Validity.VALID else 1,
            vocabulary_rank,
            0 if normalize_name(concept.concept_name) == normalized_query else 1,
            concept.concept_id)


def rank_candidates(candidates, profile, query):
    concepts = candidates.candidates if isinstance(candidates, CandidateSet) else candidates
    normalized_query = normalize_name(query)
    return sorted(concepts, key=lambda concept: rank_key(concept, profile, normalized_query))


def render_preferences(profile):
    """The preference rules as they are presented to the model (and in the omop://vocabulary-preferences resource)"""
    lines = []
    if profile.prefer_standard:
        lines.append('- Prefer standard concepts (standard_concept = S) over non-standard or classification concepts.')
    else:
        lines.append('- Non-standard concepts are acceptable for this request.')
    if profile.prefer_valid:
        lines.append('- Prefer valid concepts; avoid concepts with an invalid reason (deprecated or upgraded).')
    else:
        lines.append('- Invalid (deprecated) concepts are acceptable for this request.')
    lines.append('- Preferred vocabularies by domain:')
    for domain, vocabularies in profile.domain_vocab_defaults.items():
        lines.append('    %s: %s' % (domain, ', '.join(vocabularies)))
    if profile.target_domain:
        lines.append('- Target domain for this request: %s' % profile.target_domain)
    if profile.override_vocabularies:
        lines.append('- Vocabularies requested by the user (take precedence over the defaults): %s' % ', '.join(
            profile.override_vocabularies))
    if profile.user_override:
        lines.append('- User instruction (takes precedence over the defaults above): %s' % profile.user_override)
    return '\n'.join(lines)
