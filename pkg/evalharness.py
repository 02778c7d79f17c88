"""Evaluation of mapping runs: retrieval success rate, failure distribution, relevance scores, the Wilcoxon signed-rank
test for paired system/human relevance scores (with two effect size conventions), the score agreement matrix and
processing time summaries.

Two input formats are supported (CSV or XLSX, with a header row):
    term,outcome,relevance,elapsed_seconds[,domain]   (one row per mapped term)
    term,system_score,human_score                     (paired relevance scores)
`outcome` is one of success, no_mapping_found, non_existent_id or name_mismatch, and `relevance` is 0 (completely
wrong), 1 (reasonable/usable) or 2 (optimal), left blank unless the outcome is success."""

__author__ = 'OMOP MCP contributors'
__copyright__ = 'Copyright (c) 2026 OMOP MCP contributors'
__license__ = 'Apache 2.0'
__version__ = '2026-10-17'  # ISO 8601 (YYYY-MM-DD)

import dataclasses
import math

import numpy
import scipy.stats

from omophelpers import OmopMcpError, PreconditionError, Utils
from vocabularycore import SUCCESS, FailureKind, outcome_code, parse_outcome

RELEVANCE_SCORES = (0, 1, 2)
RELEVANCE_LABELS = {0: 'Completely wrong', 1: 'Reasonable/usable', 2: 'Optimal'}
EXACT_LIMIT = 25  # largest number of non-zero pairs for which the exact null distribution is enumerated

RECORD_HEADERS = ['term', 'outcome', 'relevance', 'elapsed_seconds']
PAIRED_HEADERS = ['term', 'system_score', 'human_score']


class DegenerateInput(OmopMcpError):
    pass


class LengthMismatch(OmopMcpError):
    pass


class SchemaError(OmopMcpError):
    def __init__(self, row_number, detail):
        super().__init__('row %d: %s' % (row_number, detail) if row_number else detail)
        self.row_number = row_number


@dataclasses.dataclass(frozen=True)
class EvalRecord:
    term: str
    outcome: object  # SUCCESS or a FailureKind
    relevance: int = None
    elapsed_seconds: float = 0.0
    domain: str = None

    def __post_init__(self):
        if self.outcome != SUCCESS and not isinstance(self.outcome, FailureKind):
            raise ValueError('unknown outcome %r' % (self.outcome,))
        if self.relevance is not None:
            if self.outcome != SUCCESS:
                raise ValueError('relevance can only be given for successful mappings')
            if self.relevance not in RELEVANCE_SCORES:
                raise ValueError('relevance must be 0, 1 or 2 (found %r)' % (self.relevance,))
        if not self.elapsed_seconds >= 0:
            raise ValueError('elapsed_seconds must be non-negative')


@dataclasses.dataclass(frozen=True)
class WilcoxonResult:
    n_pairs: int
    w_statistic: float
    w_plus: float
    w_minus: float
    z_value: float
    p_value: float
    effect_r_z: float
    effect_r_rb: float
    method: str  # 'exact' or 'normal'

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class AgreementMatrix:
    """counts[i][j] is the number of terms with system score i and human score j"""
    counts: tuple

    @property
    def total(self):
        return sum(sum(row) for row in self.counts)

    def row_sums(self):
        return [sum(row) for row in self.counts]

    def column_sums(self):
        return [sum(column) for column in zip(*self.counts)]

    def transpose(self):
        return AgreementMatrix(tuple(tuple(column) for column in zip(*self.counts)))


def format_percent(numerator, denominator):
    if not denominator:
        return 'n/a (0/0)'
    return '%.1f%% (%d/%d)' % (100 * numerator / denominator, numerator, denominator)


def retrieval_success_rate(records):
    if not records:
        raise PreconditionError('at least one record is needed to calculate a success rate')
    return sum(1 for record in records if record.outcome == SUCCESS) / len(records)


def failure_distribution(records):
    total = len(records)
    distribution = {}
    for kind in FailureKind:
        count = sum(1 for record in records if record.outcome == kind)
        distribution[kind] = (count, count / total if total else 0.0)
    return distribution


def relevance_scores(records):
    return [record.relevance for record in records if record.relevance is not None]


def mean_relevance(records):
    scores = relevance_scores(records)
    if not scores:
        raise PreconditionError('no records have a relevance score')
    return sum(scores) / len(scores)


def score_histogram(scores):
    """Count (and fraction of all scores) for each relevance score"""
    histogram = {}
    for score in RELEVANCE_SCORES:
        count = sum(1 for s in scores if s == score)
        histogram[score] = (count, count / len(scores) if scores else 0.0)
    return histogram


def mean_and_sem(values):
    if not len(values):
        raise PreconditionError('at least one value is needed')
    values = numpy.asarray(values, dtype=float)
    if len(values) == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(len(values)))


def timing_summary(records):
    """(mean, standard error of the mean) of elapsed_seconds"""
    return mean_and_sem([record.elapsed_seconds for record in records])


def timing_comparison(records_a, records_b):
    mean_a, sem_a = timing_summary(records_a)
    mean_b, sem_b = timing_summary(records_b)
    return {'a': (mean_a, sem_a), 'b': (mean_b, sem_b), 'ratio': mean_a / mean_b if mean_b else math.inf}


def highest_of_multiple(scores):
    if not scores:
        raise PreconditionError('at least one scored mapping is needed per term')
    return max(scores)


def retrieval_comparison(system_records, reference_records):
    """Compare which terms were mapped by the system and by the reference (e.g., human) mappings"""
    system_outcomes = {record.term: record.outcome == SUCCESS for record in system_records}
    reference_outcomes = {record.term: record.outcome == SUCCESS for record in reference_records}
    if set(system_outcomes) != set(reference_outcomes):
        raise LengthMismatch('system and reference records must cover the same terms')
    comparison = {'both': 0, 'system_only': 0, 'reference_only': 0, 'neither': 0}
    for term, system_success in system_outcomes.items():
        reference_success = reference_outcomes[term]
        if system_success and reference_success:
            comparison['both'] += 1
        elif system_success:
            comparison['system_only'] += 1
        elif reference_success:
            comparison['reference_only'] += 1
        else:
            comparison['neither'] += 1
    return comparison


def per_domain_summary(records):
    domains = {}
    for record in records:
        if record.domain:
            domains.setdefault(record.domain, []).append(record)
    summary = {}
    for domain, domain_records in sorted(domains.items()):
        scores = relevance_scores(domain_records)
        mean_seconds, sem_seconds = timing_summary(domain_records)
        summary[domain] = {'terms': len(domain_records),
                           'successes': sum(1 for r in domain_records if r.outcome == SUCCESS),
                           'success_rate': retrieval_success_rate(domain_records),
                           'mean_relevance': sum(scores) / len(scores) if scores else None,
                           'mean_seconds': mean_seconds, 'sem_seconds': sem_seconds}
    return summary


def agreement_matrix(system, human):
    if len(system) != len(human):
        raise LengthMismatch('system and human score lists differ in length (%d vs %d)' % (len(system), len(human)))
    counts = [[0] * len(RELEVANCE_SCORES) for _ in RELEVANCE_SCORES]
    for system_score, human_score in zip(system, human):
        if system_score not in RELEVANCE_SCORES or human_score not in RELEVANCE_SCORES:
            raise PreconditionError('scores must be 0, 1 or 2 (found %r and %r)' % (system_score, human_score))
        counts[system_score][human_score] += 1
    return AgreementMatrix(tuple(tuple(row) for row in counts))


def exact_lower_tail(ranks, w):
    """P(W+ <= w) under the null hypothesis, enumerating every sign assignment of `ranks`. Average ranks are always
    multiples of one half, so the distribution is built over doubled (integer) ranks"""
    doubled = [int(round(2 * rank)) for rank in ranks]
    counts = numpy.zeros(sum(doubled) + 1)
    counts[0] = 1
    for rank in doubled:
        shifted = numpy.zeros_like(counts)
        shifted[rank:] = counts[:len(counts) - rank]
        counts = counts + shifted
    limit = int(round(2 * w))
    return float(counts[:limit + 1].sum() / counts.sum())


def normal_z(ranks, w_plus):
    """Signed z value of W+ under the normal approximation, with tie-corrected variance and continuity correction"""
    ranks = numpy.asarray(ranks, dtype=float)
    mean = ranks.sum() / 2
    sd = math.sqrt(float((ranks ** 2).sum()) / 4)
    difference = w_plus - mean
    if abs(difference) <= 0.5 or sd == 0:
        return 0.0
    return (difference - math.copysign(0.5, difference)) / sd


def wilcoxon_signed_rank(a, b, method='auto'):
    """Two-sided Wilcoxon signed-rank test of the paired samples `a` and `b`. Pairs with zero difference are dropped
    before ranking. `method` is 'exact', 'normal' or 'auto' (exact for up to 25 non-zero pairs)"""
    if len(a) != len(b):
        raise LengthMismatch('paired samples differ in length (%d vs %d)' % (len(a), len(b)))
    differences = numpy.asarray(a, dtype=float) - numpy.asarray(b, dtype=float)
    differences = differences[differences != 0]
    if not len(differences):
        raise DegenerateInput('every pair has a zero difference')

    n_pairs = len(differences)
    ranks = scipy.stats.rankdata(numpy.abs(differences), method='average')
    w_plus = float(ranks[differences > 0].sum())
    w_minus = float(ranks[differences < 0].sum())
    w_statistic = min(w_plus, w_minus)
    z_value = normal_z(ranks, w_plus)

    if method == 'auto':
        method = 'exact' if n_pairs <= EXACT_LIMIT else 'normal'
    if method == 'exact':
        p_value = 2 * exact_lower_tail(ranks, w_statistic)
    elif method == 'normal':
        p_value = 2 * float(scipy.stats.norm.sf(abs(z_value)))
    else:
        raise ValueError('unknown method %r' % method)

    return WilcoxonResult(n_pairs=n_pairs, w_statistic=w_statistic, w_plus=w_plus, w_minus=w_minus, z_value=z_value,
                          p_value=min(1.0, p_value), effect_r_z=z_value / math.sqrt(n_pairs),
                          effect_r_rb=(w_plus - w_minus) / (w_plus + w_minus), method=method)


def parse_score(value, row_number, column):
    try:
        score = int(str(value).strip())
    except ValueError:
        raise SchemaError(row_number, '%s must be 0, 1 or 2 (found %r)' % (column, value)) from None
    if score not in RELEVANCE_SCORES:
        raise SchemaError(row_number, '%s must be 0, 1 or 2 (found %r)' % (column, value))
    return score


def normalized_header(row):
    return [cell.strip().lower() for cell in row]


def read_input(path):
    """Returns ('records', [EvalRecord, ...]) or ('pairs', (terms, system_scores, human_scores)), depending on the
    file's header row"""
    try:
        rows = Utils.read_table_rows(path)
    except (OSError, ValueError) as e:
        raise SchemaError(None, 'unable to read %s: %s' % (path, e)) from None
    if not rows:
        raise SchemaError(1, 'missing header row')
    header = normalized_header(rows[0])
    if header[:len(RECORD_HEADERS)] == RECORD_HEADERS:
        return 'records', parse_records(rows)
    if header[:len(PAIRED_HEADERS)] == PAIRED_HEADERS:
        return 'pairs', parse_pairs(rows)
    raise SchemaError(1, 'header must start with %s or %s' % (','.join(RECORD_HEADERS), ','.join(PAIRED_HEADERS)))


def parse_records(rows):
    header = normalized_header(rows[0])
    domain_column = header.index('domain') if 'domain' in header else None
    records = []
    for row_number, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        row = row + [''] * (len(header) - len(row))
        term, outcome_text, relevance_text, elapsed_text = (cell.strip() for cell in row[:4])
        try:
            outcome = parse_outcome(outcome_text)
        except ValueError:
            raise SchemaError(row_number, 'unknown outcome %r' % outcome_text) from None
        relevance = parse_score(relevance_text, row_number, 'relevance') if relevance_text else None
        try:
            elapsed_seconds = float(elapsed_text) if elapsed_text else 0.0
        except ValueError:
            raise SchemaError(row_number, 'elapsed_seconds must be a number (found %r)' % elapsed_text) from None
        domain = row[domain_column].strip() or None if domain_column is not None else None
        try:
            records.append(EvalRecord(term=term, outcome=outcome, relevance=relevance,
                                      elapsed_seconds=elapsed_seconds, domain=domain))
        except ValueError as e:
            raise SchemaError(row_number, str(e)) from None
    return records


def parse_pairs(rows):
    terms, system_scores, human_scores = [], [], []
    for row_number, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) < 3:
            raise SchemaError(row_number, 'expected term, system_score and human_score')
        terms.append(row[0].strip())
        system_scores.append(parse_score(row[1], row_number, 'system_score'))
        human_scores.append(parse_score(row[2], row_number, 'human_score'))
    return terms, system_scores, human_scores


def read_records(path):
    kind, content = read_input(path)
    if kind != 'records':
        raise SchemaError(1, '%s contains paired scores rather than mapping records' % path)
    return content


def read_pairs(path):
    kind, content = read_input(path)
    if kind != 'pairs':
        raise SchemaError(1, '%s contains mapping records rather than paired scores' % path)
    return content


def histogram_report(scores):
    return {str(score): {'count': count, 'display': format_percent(count, len(scores))} for score, (count, _) in
            score_histogram(scores).items()}


def build_report(records):
    total = len(records)
    successes = sum(1 for record in records if record.outcome == SUCCESS)
    report = {
        'kind': 'records',
        'terms': total,
        'retrieval_success': {'rate': successes / total if total else None,
                              'display': format_percent(successes, total)},
        'failure_distribution': {outcome_code(kind): {'count': count, 'fraction': fraction,
                                                      'display': format_percent(count, total)}
                                 for kind, (count, fraction) in failure_distribution(records).items()}
    }
    scores = relevance_scores(records)
    if scores:
        report['relevance'] = {'scored': len(scores), 'mean': mean_relevance(records),
                               'histogram': histogram_report(scores)}
    if total:
        mean_seconds, sem_seconds = timing_summary(records)
        report['timing'] = {'mean_seconds': mean_seconds, 'sem_seconds': sem_seconds}
    domains = per_domain_summary(records)
    if domains:
        report['per_domain'] = domains
    return report


def build_paired_report(terms, system, human):
    if not len(terms) == len(system) == len(human):
        raise LengthMismatch('every term needs both a system and a human score')
    report = {
        'kind': 'pairs',
        'pairs': len(terms),
        'system': {'mean': sum(system) / len(system) if system else None, 'histogram': histogram_report(system)},
        'human': {'mean': sum(human) / len(human) if human else None, 'histogram': histogram_report(human)},
        'agreement_matrix': [list(row) for row in agreement_matrix(system, human).counts]
    }
    try:
        report['wilcoxon'] = wilcoxon_signed_rank(system, human).to_dict()
    except DegenerateInput as e:
        Utils.report('WARNING: Wilcoxon signed-rank test skipped:', e)
        report['wilcoxon'] = None
    return report


def render_summary(report):
    lines = []
    if report['kind'] == 'records':
        lines.append('Terms: %d' % report['terms'])
        lines.append('Retrieval success: %s' % report['retrieval_success']['display'])
        for code, entry in report['failure_distribution'].items():
            lines.append('  %s: %s' % (code, entry['display']))
        if 'relevance' in report:
            lines.append('Mean relevance: %.2f (%d scored)' % (report['relevance']['mean'],
                                                                report['relevance']['scored']))
            for score, entry in report['relevance']['histogram'].items():
                lines.append('  %s (%s): %s' % (score, RELEVANCE_LABELS[int(score)], entry['display']))
        if 'timing' in report:
            lines.append('Processing time: %.2f ± %.2f seconds per term' % (report['timing']['mean_seconds'],
                                                                            report['timing']['sem_seconds']))
        for domain, summary in report.get('per_domain', {}).items():
            lines.append('  %s: %s success, %.2f ± %.2f seconds' % (
                domain, format_percent(summary['successes'], summary['terms']), summary['mean_seconds'],
                summary['sem_seconds']))
    else:
        lines.append('Pairs: %d' % report['pairs'])
        for side in ('system', 'human'):
            if report[side]['mean'] is not None:
                lines.append('Mean %s relevance: %.2f' % (side, report[side]['mean']))
        wilcoxon = report['wilcoxon']
        if wilcoxon:
            lines.append('Wilcoxon signed-rank (%s, two-sided): n = %d, W = %.1f, z = %.3f, p = %.4f' % (
                wilcoxon['method'], wilcoxon['n_pairs'], wilcoxon['w_statistic'], wilcoxon['z_value'],
                wilcoxon['p_value']))
            lines.append('Effect size: r = %.3f (z/sqrt(n)), r = %.3f (rank-biserial)' % (wilcoxon['effect_r_z'],
                                                                                         wilcoxon['effect_r_rb']))
        lines.append('Agreement matrix (rows: system score 0-2, columns: human score 0-2):')
        for score, row in zip(RELEVANCE_SCORES, report['agreement_matrix']):
            lines.append('  %d: %s' % (score, ' '.join('%4d' % count for count in row)))
    return '\n'.join(lines)
