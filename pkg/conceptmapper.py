"""Map clinical source terms to OMOP standard concepts, with every answer checked against the vocabulary before it is
written out. This is the command line entry point for the mapping tools:

    serve      run the MCP server on stdin/stdout, so that an MCP-capable model host can search the vocabulary
    map        map a file of terms in batch using a chat model (or a scripted mock transcript)
    eval       summarise a mapping run or a set of paired system/human relevance scores
    fixture    validate a vocabulary snapshot file, or show how many concepts it holds per domain and vocabulary

Exit codes: 0 on success, 1 on runtime failures (e.g., the vocabulary service or model endpoint being unreachable, a
fixture that fails validation, or the MCP session input failing), 2 on usage or configuration errors."""

__author__ = 'OMOP MCP contributors'
__copyright__ = 'Copyright (c) 2026 OMOP MCP contributors'
__license__ = 'Apache 2.0'
__version__ = '2026-10-17'  # ISO 8601 (YYYY-MM-DD)

import argparse
import collections
import csv
import dataclasses
import json
import os
import sys

import agentorchestrator
import athenagateway
import evalharness
import mcpserver
from groundingguard import classify_outcome
from omophelpers import Config, ConfigError, OmopMcpError, Utils
from preferenceengine import load_profile, resolve_profile
from vocabularycore import MAPPING_FIELDS, OMOP_TABLES, SUCCESS, outcome_code

EXIT_SUCCESS = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

OUTPUT_FORMATS = ['jsonl', 'csv', 'xlsx']

# the first four columns match the evaluation input format, so that reviewers can add relevance scores directly
TABLE_HEADERS = ['term', 'outcome', 'relevance', 'elapsed_seconds'] + MAPPING_FIELDS + ['target_table', 'target_field',
                                                                                       'attempts', 'detail']


@dataclasses.dataclass(frozen=True)
class RunConfig:
    backend_kind: str  # 'fixture' or 'live'
    backend: str  # fixture path or live base URL
    llm_kind: str = None  # 'mock' or 'live'
    llm: str = None  # mock transcript path or model name
    parallelism: int = 1
    output_path: str = None
    output_format: str = 'jsonl'

    def __post_init__(self):
        if self.backend_kind not in ('fixture', 'live') or not self.backend:
            raise ConfigError('exactly one vocabulary backend (a fixture file or a live Athena URL) is required')
        if self.llm_kind not in (None, 'mock', 'live'):
            raise ConfigError('unknown model source %r' % self.llm_kind)
        if self.parallelism < 1:
            raise ConfigError('--parallelism must be at least 1')
        if self.output_format not in OUTPUT_FORMATS:
            raise ConfigError('--format must be one of %s' % ', '.join(OUTPUT_FORMATS))
        if self.output_format == 'xlsx' and not self.output_path:
            raise ConfigError('--format xlsx requires --out')


def add_backend_args(parser):
    backend = parser.add_mutually_exclusive_group()
    backend.add_argument('--fixture', default=None,
                         help='A newline-delimited JSON vocabulary snapshot to use instead of the live Athena API (one '
                              'concept per line, with the fields concept_id, concept_name, domain_id, vocabulary_id, '
                              'concept_class, standard and validity). Default: the OMOP_MCP_FIXTURE environment '
                              'variable, or the `fixture` value in omophelpers.config')
    backend.add_argument('--athena-url', nargs='?', const='', default=None,
                         help='Use the live Athena API. The URL is optional; if omitted, the ATHENA_BASE_URL '
                              'environment variable or the `athena_base_url` value in omophelpers.config is used. Live '
                              'mode is also selected when ATHENA_BASE_URL is set and no fixture is configured')


def get_args(argv=None):
    parser = argparse.ArgumentParser(description='Map clinical source terms to OMOP standard concepts, verifying '
                                                 'every answer against the vocabulary')
    subparsers = parser.add_subparsers(dest='command', required=True)

    serve_parser = subparsers.add_parser('serve', help='Run the MCP server on stdin/stdout')
    add_backend_args(serve_parser)

    map_parser = subparsers.add_parser('map', help='Map a file of source terms in batch')
    map_parser.add_argument('terms', nargs=1,
                            help='A UTF-8 text file with one source term per line. Each line can optionally contain '
                                 'tab-separated hints after the term: the target OMOP table (e.g., '
                                 'condition_occurrence), the target field and free-text clinical context. XLSX and '
                                 'CSV files with the columns term, table, field and context (in that order, with a '
                                 'header row) are also accepted')
    add_backend_args(map_parser)
    model = map_parser.add_mutually_exclusive_group()
    model.add_argument('--mock', default=None,
                       help='A JSON transcript of scripted model responses (a list of objects with the keys '
                            '`expect_substring` and `respond`) to use instead of a live model. Useful for repeatable '
                            'offline runs and testing')
    model.add_argument('--llm-model', default=None,
                       help='The name of the chat model to use. The endpoint and key are read from LLM_API_BASE and '
                            'LLM_API_KEY (or `llm_api_base` and `llm_api_key` in omophelpers.config). Default: the '
                            'LLM_MODEL environment variable or the `llm_model` configuration value')
    map_parser.add_argument('--parallelism', type=int, default=1,
                            help='The number of terms to map concurrently. Output order always matches input order. '
                                 'Default: 1')
    map_parser.add_argument('--out', default=None,
                            help='The file to save results to. If not set, results are printed (and the summary line '
                                 'is written to stderr instead of stdout)')
    map_parser.add_argument('--format', default='jsonl', choices=OUTPUT_FORMATS,
                            help='The results format: one JSON object per term (`jsonl`), or a spreadsheet for expert '
                                 'review (`csv` or `xlsx`; `xlsx` requires `--out`). The first four spreadsheet '
                                 'columns match the `eval` input format, so a reviewer can fill in the relevance '
                                 'column and evaluate the file directly. Default: jsonl')
    map_parser.add_argument('--no-tools', action='store_true',
                            help='Ablation mode: the model answers from its own knowledge without access to the '
                                 'vocabulary search tool. Every answer is still checked against the vocabulary and '
                                 'classified, but unverified answers are reported as failures rather than retried')
    map_parser.add_argument('--override', default=None,
                            help='A free-text vocabulary instruction that takes precedence over the default '
                                 'preferences for every term (e.g., \'use ICD9CM, this is legacy data\')')
    map_parser.add_argument('--table', default=None, choices=sorted(OMOP_TABLES),
                            help='The target OMOP table for terms that do not specify their own')
    map_parser.add_argument('--field', default=None,
                            help='The target OMOP field for terms that do not specify their own (e.g., '
                                 'condition_concept_id)')
    map_parser.add_argument('--max-attempts', type=int, default=None,
                            help='The maximum number of answers requested from the model for each term before it is '
                                 'reported as having no mapping. Default: OMOP_MCP_MAX_ATTEMPTS or 3')
    map_parser.add_argument('--preferences', default=None,
                            help='A JSON file of vocabulary preferences (keys prefer_standard, prefer_valid and '
                                 'domain_vocab_defaults). Default: the `preference_file` configuration value, or the '
                                 'built-in OMOP recommendations')

    eval_parser = subparsers.add_parser('eval', help='Summarise mapping records or paired relevance scores')
    eval_parser.add_argument('input', nargs=1,
                             help='A CSV or XLSX file with either the header `term,outcome,relevance,elapsed_seconds` '
                                  '(optionally followed by `domain` and other columns) or the header '
                                  '`term,system_score,human_score`')
    eval_parser.add_argument('--compare', default=None,
                             help='A second mapping records file (e.g., reference mappings or an ablation run) covering '
                                  'the same terms. Adds a comparison of which terms each run mapped, and of their '
                                  'processing times')
    eval_parser.add_argument('--out', default=None, help='The file to save the full JSON report to')

    fixture_parser = subparsers.add_parser('fixture', help='Validate or summarise a vocabulary snapshot file')
    fixture_parser.add_argument('action', choices=['validate', 'stats'])
    fixture_parser.add_argument('path', nargs=1, help='The newline-delimited JSON snapshot file')

    return parser.parse_args(argv)


def resolve_backend(args):
    if args.fixture:
        return 'fixture', args.fixture
    if args.athena_url is not None:
        return 'live', args.athena_url or Config.get('athena_base_url')
    configured_fixture = Config.get('fixture')
    if configured_fixture:
        return 'fixture', configured_fixture
    if Config.is_set_in_environment('athena_base_url'):
        return 'live', Config.get('athena_base_url')
    raise ConfigError('no vocabulary backend configured - use --fixture PATH (or set OMOP_MCP_FIXTURE) for a '
                      'snapshot, or --athena-url (or set ATHENA_BASE_URL) for the live Athena API')


def resolve_llm(args):
    if args.mock:
        return 'mock', args.mock
    model_name = args.llm_model or Config.get('llm_model')
    if model_name and Config.get('llm_api_base'):
        return 'live', model_name
    raise ConfigError('no model configured - use --mock PATH for a scripted transcript, or set LLM_API_BASE and '
                      'either --llm-model or LLM_MODEL for a live chat model')


def open_store(config):
    if config.backend_kind == 'fixture':
        if not os.path.isfile(config.backend):
            raise ConfigError('fixture file %s does not exist' % config.backend)
        return athenagateway.load_fixture(config.backend)
    return athenagateway.VocabularyStore.live(config.backend)


def open_llm(config):
    if config.llm_kind == 'mock':
        try:
            return agentorchestrator.ScriptedMock.from_file(config.llm)
        except (OSError, ValueError) as e:
            raise ConfigError('unable to load mock transcript %s: %s' % (config.llm, e)) from None
    return agentorchestrator.LiveChatEndpoint(model=config.llm)


def read_terms(path):
    """Returns a list of [term, table, field, context] lists, with missing hints as empty strings"""
    if path.lower().endswith(('.xlsx', '.csv')):
        rows = Utils.read_table_rows(path)
        if rows and rows[0] and rows[0][0].strip().lower() == 'term':
            rows = rows[1:]
    else:
        with open(path, encoding='utf-8') as terms_file:
            rows = [line.rstrip('\r\n').split('\t') for line in terms_file]
    terms = []
    for row in rows:
        row = [cell.strip() for cell in row] + [''] * 4
        if row[0]:
            terms.append(row[:4])
    return terms


def build_requests(terms, args, profile_base):
    mapping_requests = []
    for term, table, field, context in terms:
        table = table or args.table
        if table and table not in OMOP_TABLES:
            Utils.report('WARNING: unknown OMOP table "%s" for term "%s"; the hint is passed on unchanged' % (
                table, term))
        target_domain = OMOP_TABLES[table][0] if table in OMOP_TABLES else None
        profile = resolve_profile(target_domain=target_domain, override=args.override, base=profile_base)
        mapping_requests.append(agentorchestrator.MappingRequest(source_term=term, target_table=table or None,
                                                                 target_field=field or args.field or None,
                                                                 context=context or None, profile=profile))
    return mapping_requests


def item_row(item):
    """A dict of every output column for one BatchItem"""
    row = {header: '' for header in TABLE_HEADERS}
    row.update({'term': item.request.source_term, 'elapsed_seconds': round(item.elapsed_seconds, 3),
                'target_table': item.request.target_table or '', 'target_field': item.request.target_field or ''})
    if item.error:
        row.update({'outcome': 'error', 'detail': item.error})
        return row

    outcome = classify_outcome(item.outcome)
    row['outcome'] = outcome_code(outcome)
    row['attempts'] = getattr(item.outcome, 'attempts', '')
    if outcome == SUCCESS:
        verified = getattr(item.outcome, 'verified', item.outcome)
        row.update(verified.result.to_dict())
    else:
        row['detail'] = item.outcome.detail
    return row


def write_results(items, config, stdout):
    rows = [item_row(item) for item in items]
    if config.output_format == 'jsonl':
        lines = []
        for row in rows:
            record = {key: value for key, value in row.items() if value != '' or key in ('term', 'outcome')}
            lines.append(json.dumps(record, ensure_ascii=False))
        text = ''.join(line + '\n' for line in lines)
        if config.output_path:
            with open(config.output_path, 'w', encoding='utf-8') as output_file:
                output_file.write(text)
        else:
            stdout.write(text)
    elif config.output_path:
        Utils.write_table(config.output_path, TABLE_HEADERS, [[row[h] for h in TABLE_HEADERS] for row in rows],
                          title='Mappings')
    else:
        writer = csv.writer(stdout)
        writer.writerow(TABLE_HEADERS)
        writer.writerows([[row[h] for h in TABLE_HEADERS] for row in rows])


def summary_line(items):
    completed = [item for item in items if not item.error]
    successes = sum(1 for item in completed if classify_outcome(item.outcome) == SUCCESS)
    line = 'Retrieval success: %s' % evalharness.format_percent(successes, len(items))
    if items:
        mean_seconds, sem_seconds = evalharness.mean_and_sem([item.elapsed_seconds for item in items])
        line += '; processing time %.2f ± %.2f seconds per term' % (mean_seconds, sem_seconds)
    errors = len(items) - len(completed)
    if errors:
        line += '; %d term%s not processed due to errors' % (errors, '' if errors == 1 else 's')
    return line


def cmd_serve(args, stdin, stdout):
    config = RunConfig(*resolve_backend(args))
    store = open_store(config)
    Utils.report('Starting MCP server using', store.backend_description)
    server = mcpserver.McpServer(store, mcpserver.register_default_resources(resolve_profile()))
    return EXIT_SUCCESS if server.serve(stdin, stdout) else EXIT_FAILURE


def cmd_map(args, stdout):
    backend_kind, backend = resolve_backend(args)
    llm_kind, llm = resolve_llm(args)
    config = RunConfig(backend_kind=backend_kind, backend=backend, llm_kind=llm_kind, llm=llm,
                       parallelism=args.parallelism, output_path=args.out, output_format=args.format)
    if args.max_attempts is not None and args.max_attempts < 1:
        raise ConfigError('--max-attempts must be at least 1')

    terms_file = args.terms[0]
    if not os.path.isfile(terms_file):
        raise ConfigError('terms file %s does not exist' % terms_file)
    profile_base = load_profile(args.preferences) if args.preferences else None
    mapping_requests = build_requests(read_terms(terms_file), args, profile_base)
    store = open_store(config)
    llm_port = open_llm(config)
    Utils.report('Mapping', len(mapping_requests), 'terms using', store.backend_description)

    if args.no_tools:
        items = agentorchestrator.map_batch(mapping_requests, llm_port, store, parallelism=config.parallelism,
                                            mapper=agentorchestrator.map_term_without_tools)
    else:
        items = agentorchestrator.map_batch(mapping_requests, llm_port, store, parallelism=config.parallelism,
                                            max_attempts=args.max_attempts)
    write_results(items, config, stdout)

    summary = summary_line(items)
    if config.output_path:
        stdout.write(summary + '\n')
        Utils.report('Results saved to', config.output_path)
    else:
        Utils.report(summary)
    return EXIT_FAILURE if any(item.error for item in items) else EXIT_SUCCESS


def cmd_eval(args, stdout):
    kind, content = evalharness.read_input(args.input[0])
    if kind == 'records':
        report = evalharness.build_report(content)
        if args.compare:
            reference = evalharness.read_records(args.compare)
            report['comparison'] = {'retrieval': evalharness.retrieval_comparison(content, reference)}
            if content and reference:
                timing = evalharness.timing_comparison(content, reference)
                report['comparison']['timing'] = {'input': list(timing['a']), 'compare': list(timing['b']),
                                                  'ratio': timing['ratio']}
    else:
        if args.compare:
            raise ConfigError('--compare can only be used with mapping records, not paired scores')
        report = evalharness.build_paired_report(*content)

    stdout.write(evalharness.render_summary(report) + '\n')
    if 'comparison' in report:
        retrieval = report['comparison']['retrieval']
        stdout.write('Compared with %s: both %d, input only %d, compare only %d, neither %d\n' % (
            args.compare, retrieval['both'], retrieval['system_only'], retrieval['reference_only'],
            retrieval['neither']))
    if args.out:
        with open(args.out, 'w', encoding='utf-8') as report_file:
            json.dump(report, report_file, indent=2)
        Utils.report('Report saved to', args.out)
    return EXIT_SUCCESS


def cmd_fixture(args, stdout):
    path = args.path[0]
    if not os.path.isfile(path):
        raise ConfigError('fixture file %s does not exist' % path)
    concepts, errors = athenagateway.validate_fixture(path)
    if args.action == 'validate':
        for error in errors:
            Utils.report('ERROR:', error)
        stdout.write('%d concepts, %d errors\n' % (len(concepts), len(errors)))
        return EXIT_FAILURE if errors else EXIT_SUCCESS

    domains = collections.Counter(concept.domain_id for concept in concepts)
    vocabularies = collections.Counter(concept.vocabulary_id for concept in concepts)
    stdout.write('%d concepts\n' % len(concepts))
    stdout.write('By domain:\n')
    for domain, count in sorted(domains.items()):
        stdout.write('  %s: %d\n' % (domain, count))
    stdout.write('By vocabulary:\n')
    for vocabulary, count in sorted(vocabularies.items()):
        stdout.write('  %s: %d\n' % (vocabulary, count))
    if errors:
        Utils.report('WARNING: %d invalid lines skipped (run `fixture validate` for details)' % len(errors))
    return EXIT_SUCCESS


def main(argv=None, stdin=None, stdout=None):
    args = get_args(argv)
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    try:
        if args.command == 'serve':
            return cmd_serve(args, stdin, stdout)
        if args.command == 'map':
            return cmd_map(args, stdout)
        if args.command == 'eval':
            return cmd_eval(args, stdout)
        return cmd_fixture(args, stdout)
    except (ConfigError, evalharness.SchemaError) as e:
        Utils.report('ERROR:', e)
        return EXIT_USAGE
    except (OmopMcpError, OSError) as e:
        Utils.report('ERROR:', e)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
