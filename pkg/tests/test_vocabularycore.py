import json
import random

import pytest

from vocabularycore import (Concept, FailureKind, InvalidId, MappingResult, ParseError, ParseFailure, StandardFlag,
                            SUCCESS, Validity, concept_url, normalize_name, outcome_code, parse_concept,
                            parse_mapping_output, parse_outcome, serialize_concept, serialize_mapping)

CHEST_PAIN = Concept(77670, 'Chest pain', 'Condition', 'SNOMED', 'Clinical Finding')


def chest_pain_answer(**changes):
    answer = {'concept_id': 77670, 'concept_name': 'Chest pain', 'domain_id': 'Condition', 'class': 'Clinical Finding',
              'validity': 'Valid', 'domain': 'Condition', 'vocabulary': 'SNOMED',
              'concept_url': 'https://athena.ohdsi.org/search-terms/terms/77670',
              'reasoning': 'CP in a condition context abbreviates chest pain'}
    answer.update(changes)
    return answer


def test_parse_complete_answer():
    result = parse_mapping_output(json.dumps(chest_pain_answer()))
    assert result.concept_id == 77670
    assert result.concept_name == 'Chest pain'
    assert result.concept_class == 'Clinical Finding'
    assert result.domain_id == result.domain == 'Condition'
    assert result.inferred_keyword == ''


def test_parse_empty_answer_is_malformed():
    with pytest.raises(ParseError) as error:
        parse_mapping_output('')
    assert error.value.reason is ParseFailure.MALFORMED_JSON


def test_parse_missing_reasoning():
    answer = chest_pain_answer()
    del answer['reasoning']
    with pytest.raises(ParseError) as error:
        parse_mapping_output(json.dumps(answer))
    assert error.value.reason is ParseFailure.MISSING_FIELD
    assert error.value.field == 'reasoning'


def test_parse_blank_reasoning_counts_as_missing():
    with pytest.raises(ParseError) as error:
        parse_mapping_output(json.dumps(chest_pain_answer(reasoning='   ')))
    assert error.value.field == 'reasoning'


@pytest.mark.parametrize('concept_id', ['abc', 12.5, 0, -3, True, None])
def test_parse_rejects_unusable_concept_ids(concept_id):
    with pytest.raises(ParseError) as error:
        parse_mapping_output(json.dumps(chest_pain_answer(concept_id=concept_id)))
    expected = ParseFailure.MISSING_FIELD if concept_id is None else ParseFailure.NON_INTEGER_CONCEPT_ID
    assert error.value.reason is expected


def test_parse_accepts_quoted_concept_id():
    assert parse_mapping_output(json.dumps(chest_pain_answer(concept_id='77670'))).concept_id == 77670


def test_parse_tolerates_code_fences_and_prose():
    raw = 'Here is the mapping:\n```json\n%s\n```\nLet me know if you need more.' % json.dumps(chest_pain_answer())
    assert parse_mapping_output(raw).concept_id == 77670


def test_parse_accepts_spaced_url_field_name():
    answer = chest_pain_answer()
    answer['concept URL'] = answer.pop('concept_url')
    assert parse_mapping_output(json.dumps(answer)).concept_url.endswith('/77670')


def test_parse_rejects_json_arrays():
    with pytest.raises(ParseError) as error:
        parse_mapping_output('[1, 2, 3]')
    assert error.value.reason is ParseFailure.MALFORMED_JSON


def test_mapping_round_trip():
    result = MappingResult.from_concept(CHEST_PAIN, 'exact match', inferred_keyword='chest pain')
    assert parse_mapping_output(serialize_mapping(result)) == result


def test_mapping_from_concept_fills_both_domain_fields():
    result = MappingResult.from_concept(CHEST_PAIN, 'exact match')
    assert result.domain_id == result.domain == 'Condition'
    assert result.validity == 'Valid'
    assert result.to_dict()['class'] == 'Clinical Finding'


def test_concept_url_examples():
    assert concept_url(77670) == 'https://athena.ohdsi.org/search-terms/terms/77670'
    assert concept_url(1) == 'https://athena.ohdsi.org/search-terms/terms/1'
    assert concept_url(5, web_base='http://localhost:8080/') == 'http://localhost:8080/search-terms/terms/5'


@pytest.mark.parametrize('concept_id', [0, -1, True, '77670'])
def test_concept_url_rejects_invalid_ids(concept_id):
    with pytest.raises(InvalidId):
        concept_url(concept_id)


def test_concept_url_is_injective():
    urls = {concept_url(concept_id) for concept_id in range(1, 2001)}
    assert len(urls) == 2000


@pytest.mark.parametrize('name, expected', [('  Chest   Pain ', 'chest pain'), ('chest pain', 'chest pain'),
                                            ('', ''), ('CHEST\tPAIN\n', 'chest pain')])
def test_normalize_name(name, expected):
    assert normalize_name(name) == expected


def test_normalize_name_is_idempotent():
    generator = random.Random(7)
    alphabet = 'aAbBß \t\nÉé-,'
    for _ in range(500):
        text = ''.join(generator.choice(alphabet) for _ in range(generator.randint(0, 20)))
        assert normalize_name(normalize_name(text)) == normalize_name(text)


def test_concept_round_trip():
    concept = Concept(35211388, 'Chest pain, unspecified', 'Condition', 'ICD10CM', '5-char billing code',
                      StandardFlag.NON_STANDARD, Validity.INVALID)
    assert parse_concept(serialize_concept(concept)) == concept


def test_concept_validation():
    with pytest.raises(InvalidId):
        Concept(0, 'Chest pain', 'Condition', 'SNOMED', 'Clinical Finding')
    with pytest.raises(ValueError):
        Concept(77670, '   ', 'Condition', 'SNOMED', 'Clinical Finding')


def test_flags_from_athena_labels():
    assert StandardFlag.parse('Standard') is StandardFlag.STANDARD
    assert StandardFlag.parse('Classification') is StandardFlag.CLASSIFICATION
    assert StandardFlag.parse('Non-standard') is StandardFlag.NON_STANDARD
    assert StandardFlag.parse(None) is StandardFlag.NON_STANDARD
    assert Validity.from_invalid_reason(None) is Validity.VALID
    assert Validity.from_invalid_reason('Valid') is Validity.VALID
    assert Validity.from_invalid_reason('Upgraded') is Validity.INVALID


def test_outcome_codes():
    assert parse_outcome('success') == SUCCESS
    assert parse_outcome(' Name_Mismatch ') is FailureKind.CONCEPT_ID_NAME_MISMATCH
    assert outcome_code(FailureKind.NON_EXISTENT_CONCEPT_ID) == 'non_existent_id'
    with pytest.raises(ValueError):
        parse_outcome('partial')
