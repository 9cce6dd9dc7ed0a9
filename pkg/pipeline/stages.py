"""
The work behind each management command.

Every stage writes into the config's output directory and returns a
``StageResult``; a failure that should still leave its outputs on disk
(error-sink bound, non-convergence) travels in ``StageResult.error`` so the
command can record the artifacts before exiting non-zero.
"""

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date
from importlib import metadata

import numpy as np
import pandas as pd

from disparity.analysis import (
    aggregate_rates, analysis_battery, eligible_states, outcome_test, stop_rate_analysis, typical_driver_table,
)
from disparity.cells import build_cells, cells_to_frame
from disparity.census import load_census, with_districts
from disparity.exceptions import DisparityError, NoEligibleStatesError
from disparity.reports import (
    battery_table, hit_rate_points, outcome_test_tables, poststop_rate_points, stop_rate_points,
)
from glm.exceptions import GLMError
from inference.exceptions import InferenceError
from inference.nuts import SamplerConfig
from numerics.exceptions import NumericsError
from policy.did import DidSpec, did_fit, did_summary
from policy.exceptions import PolicyError
from policy.trends import control_panel, innocent_search_delta, legalization_threshold_data, trend_series
from records.exceptions import RecordsError, SchemaError
from records.parsing import ErrorSink
from records.pipeline import (
    availability_report, filter_analysis_set, normalize_state, read_standardized, records_to_frame,
    write_standardized,
)
from records.schemas import StateSchema
from records.utils import get_reference_tables, get_surname_table
from synth.generators import write_bundle
from threshold.data import prepare
from threshold.exceptions import ThresholdError
from threshold.fitting import fit as fit_thresholds
from threshold.fitting import fit_prepost, ppc
from threshold.reports import write_fit_outputs

from .exceptions import ConfigError, DataQualityError, ManifestError, NotConvergedError
from .utils import hash_file, latest_recorded_run, ledger_mismatches

logger = logging.getLogger(__name__)

VERSIONED_PACKAGES = ('Django', 'numpy', 'scipy', 'pandas')
THRESHOLD_FIELDS = ('driver_race', 'location', 'search_conducted', 'contraband_found')

# headline quantity -> (reference value, tolerance)
REFERENCE_VALUES = {
    'stop_rate:Black': (0.37, 0.03),
    'stop_rate:Hispanic': (-0.40, 0.03),
    'hit_rate:White': (0.28, 0.01),
    'hit_rate:Black': (0.28, 0.01),
    'hit_rate:Hispanic': (0.22, 0.01),
    'threshold:White': (0.20, 0.02),
    'threshold:Black': (0.16, 0.02),
    'threshold:Hispanic': (0.14, 0.02),
    'legalization:White': (-0.99, 0.05),
    'legalization:Black': (-1.01, 0.05),
    'legalization:Hispanic': (-0.79, 0.05),
}


@dataclass
class StageResult:
    paths: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    error: Exception = None


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, date):
        return value.isoformat()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    return str(value)


def write_json(path, payload):
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(payload, handle, indent=2, sort_keys=True, default=_json_default)
        handle.write('\n')
    return path


def write_csv(path, frame):
    frame.to_csv(path, index=False, lineterminator='\n')
    return path


def _map(function, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(function, items))
    return [function(item) for item in items]


def module_versions():
    versions = {}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


# normalize

def _read_header(path, schema):
    with open(path, encoding=schema.encoding, errors='surrogateescape', newline='') as handle:
        return next(csv.reader(handle, delimiter=schema.delimiter, quotechar=schema.quotechar), [])


def check_inputs(config):
    """
    Load every state's schema and check its columns against the source
    header, before any row is processed.

    Returns:
        dict: {state: StateSchema}
    """
    schemas, problems = {}, []
    for state in config.states:
        try:
            schema = StateSchema.from_file(config.schema_path(state))
            if schema.state != state:
                raise SchemaError(f"schema {config.schema_path(state)} is for {schema.state}, not {state}")
            schema.validate_header(_read_header(config.inputs[state], schema))
        except (SchemaError, OSError) as exc:
            problems.append(str(exc))
            continue
        schemas[state] = schema
    if problems:
        raise ConfigError('; '.join(problems))
    return schemas


def normalize_stage(config):
    """
    Standardize every state's export concurrently, then write the
    standardized files, the shared error sink and the audit report.

    States whose error-sink share exceeds ``MAX_ERROR_RATE`` fail the stage
    with a DataQualityError after everything is written.
    """
    schemas = check_inputs(config)
    tables, _ = get_reference_tables(config.reference_tables)
    surnames = get_surname_table(config.surnames)[0] if config.surnames else None
    surname_states = tuple(config.option('SURNAME_STATES', ()))
    cutoff = config.option('HISPANIC_SURNAME_CUTOFF', 0.75)

    def run(state):
        return normalize_state(config.inputs[state], schemas[state], tables, surnames,
                               surname_states, cutoff, ErrorSink())

    outcomes = _map(run, config.states, config.workers)

    directory = config.subdir('standardized')
    result = StageResult()
    combined = ErrorSink()
    reports = {}
    for state, (records, report, sink) in zip(config.states, outcomes):
        path = os.path.join(directory, f"{state}.csv")
        with open(path, 'w', newline='', encoding='utf-8') as handle:
            write_standardized(records, handle)
        result.paths.append(path)
        combined.entries.extend(sink.entries)
        reports[state] = report

    path = os.path.join(config.subdir('audit'), 'error_sink.csv')
    with open(path, 'w', newline='', encoding='utf-8', errors='surrogateescape') as handle:
        combined.write_csv(handle)
    result.paths.append(path)

    bound = config.option('MAX_ERROR_RATE', 0.05)
    over = {state: r.error_rate for state, r in reports.items() if r.error_rate > bound}
    audit = {
        'states': {state: r.to_dict() for state, r in reports.items()},
        'max_error_rate': bound,
        'over_bound': sorted(over),
    }
    result.paths.append(write_json(os.path.join(config.subdir('audit'), 'audit.json'), audit))
    result.summary = {state: r.output_rows for state, r in reports.items()}
    if over:
        details = ', '.join(f"{s} {rate:.1%}" for s, rate in sorted(over.items()))
        logger.error(f"Error-sink share above {bound:.1%}: {details}")
        result.error = DataQualityError(f"error-sink share above {bound:.1%}: {details}")
    return result


# analyze

def load_standardized(config):
    """
    Records from the normalize stage's output.

    Returns:
        tuple: (list of StopRecord, {relative path: blob hash})
    """
    directory = os.path.join(config.output_dir, 'standardized')
    records, hashes = [], {}
    for state in config.states:
        path = os.path.join(directory, f"{state}.csv")
        if not os.path.isfile(path):
            raise ConfigError(f"no standardized file for {state} at {path}; run normalize first")
        with open(path, 'rb') as handle:
            try:
                records.extend(read_standardized(handle, state))
            except RecordsError as exc:
                raise ConfigError(str(exc)) from exc
        hashes[f"standardized/{state}.csv"] = hash_file(path)[0]
    return records, hashes


def analysis_set(config, records):
    return filter_analysis_set(records, tuple(config.option('ANALYSIS_YEARS')), tuple(config.option('ANALYSIS_RACES')))


class _Analyses:
    """Accumulates the outputs, skips and failures of one analyze run."""

    def __init__(self, config, provenance):
        self.config = config
        self.directory = config.subdir('results')
        self.provenance = provenance
        self.paths = []
        self.skipped = []
        self.outputs = {}
        self.error = None

    def csv(self, name, frame, analysis):
        self.paths.append(write_csv(os.path.join(self.directory, name), frame))
        self.outputs[name] = analysis

    def json(self, name, payload, analysis):
        payload = {**payload, 'provenance': self.provenance}
        self.paths.append(write_json(os.path.join(self.directory, name), payload))
        self.outputs[name] = analysis

    def skip(self, analysis, reason, missing=None):
        logger.warning(f"Skipping {analysis}: {reason}")
        self.skipped.append({'analysis': analysis, 'reason': str(reason), 'missing': missing or {}})

    def fail(self, error):
        logger.error(str(error))
        if self.error is None:
            self.error = error


def _stop_rate(run, analysis, census, tables):
    config = run.config
    census = with_districts(census, tables, config.option('DISTRICT_STATES', ()))
    cells, coverage = build_cells(analysis, census)
    run.csv('cells.csv', cells_to_frame(cells), 'stop_rate')
    run.json('coverage.json', {'coverage': coverage.to_dict()}, 'stop_rate')
    try:
        fit = stop_rate_analysis(cells, 'negbin')
    except (DisparityError, GLMError, NumericsError) as exc:
        run.skip('stop_rate', exc)
        return cells
    run.json('stop_rate.json', fit.to_dict(), 'stop_rate')
    return cells


def _poststop(run, analysis, report, cells):
    config = run.config
    entries = analysis_battery(analysis, cells=cells, outcomes=config.outcomes, specs=config.controls,
                               report=report, robustness=config.robustness)
    for entry in entries:
        if entry.skipped:
            run.skip(f"{entry.outcome} ~ {entry.covariates} ({entry.family})", entry.skipped)
    run.csv('battery.csv', battery_table(entries), 'poststop')
    run.csv('typical_drivers.csv', pd.DataFrame(typical_driver_table(entries)), 'poststop')
    run.csv('aggregate_rates.csv', pd.DataFrame(aggregate_rates(analysis, report)), 'poststop')


def _outcome_test(run, analysis, report):
    try:
        result = outcome_test(analysis, report=report)
    except NoEligibleStatesError as exc:
        run.skip('outcome_test', exc, exc.dropped)
        return
    rows, aggregate = outcome_test_tables(result)
    run.csv('outcome_test_locations.csv', rows, 'outcome_test')
    run.csv('outcome_test_aggregate.csv', aggregate, 'outcome_test')


def _sampler(config):
    options = config.threshold
    return SamplerConfig.from_settings(chains=options.chains, warmup=options.warmup, draws=options.draws,
                                       workers=config.workers)


def _threshold(run, analysis, report):
    config = run.config
    kept, dropped = eligible_states(report, THRESHOLD_FIELDS, config.threshold.states)
    if not kept:
        run.skip('threshold', "no state carries location, search and contraband data", dropped)
        return
    frame = records_to_frame(analysis)
    frame = frame[frame['state'].isin(kept)]
    # county FIPS are unique nationally; district ids only within a state
    frame = frame.assign(location=frame['state'] + '|' + frame['location'])
    try:
        data = prepare(
            frame,
            min_stops=config.threshold.min_stops or config.option('THRESHOLD_MIN_STOPS', 1000),
            max_locations=config.threshold.max_locations or config.option('THRESHOLD_MAX_LOCATIONS', 100),
            races=tuple(config.option('ANALYSIS_RACES')),
        )
    except ThresholdError as exc:
        run.skip('threshold', exc, dropped)
        return
    data.write_csv(os.path.join(run.directory, 'threshold_counts.csv'))
    run.paths.append(os.path.join(run.directory, 'threshold_counts.csv'))
    try:
        result = fit_thresholds(data, _sampler(config), seed=config.seed)
    except InferenceError as exc:
        run.fail(NotConvergedError(f"threshold sampler failed: {exc}"))
        return
    result.metadata.update({'states': kept, 'dropped_states': dropped, 'provenance': run.provenance})
    check = ppc(result, seed=config.seed) if config.threshold.ppc else None
    run.paths.extend(write_fit_outputs(result, run.directory, check, prefix='threshold'))
    if not result.converged:
        run.fail(NotConvergedError(f"threshold model did not converge (max R-hat {result.max_rhat:.3f})"))


def _policy(run, analysis, report):
    config = run.config
    options = config.policy
    spec = DidSpec.from_settings(
        treated_states=options.treated_states, control_states=options.control_states,
        legalization_date=options.legalization_date,
    )
    try:
        fit = did_fit(analysis, spec, report)
    except (PolicyError, GLMError, NumericsError) as exc:
        run.skip('policy:did', exc)
    else:
        run.json('policy_did.json', did_summary(fit), 'policy')
        if not fit.converged:
            run.fail(NotConvergedError("legalization search model did not converge"))

    summary = {'spec': spec.to_dict()}
    for outcome in ('search', 'drug_misdemeanor'):
        try:
            trends = trend_series(analysis, outcome, spec, options.window, report=report)
        except PolicyError as exc:
            run.skip(f"policy:{outcome}_trends", exc)
            continue
        run.csv(f"policy_{outcome}_series.csv", trends.series, 'policy')
        run.csv(f"policy_{outcome}_trends.csv", trends.trends, 'policy')
        run.csv(f"policy_{outcome}_shifts.csv", trends.shifts(), 'policy')
    try:
        controls = control_panel(analysis, spec, options.window, report)
    except PolicyError as exc:
        run.skip('policy:control_panel', exc)
    else:
        run.csv('policy_control_series.csv', controls.series, 'policy')
        run.csv('policy_control_trends.csv', controls.trends, 'policy')
    try:
        summary['innocent_search_delta'] = innocent_search_delta(analysis, spec, report)
    except PolicyError as exc:
        run.skip('policy:innocent_searches', exc)
    run.json('policy_summary.json', summary, 'policy')

    if not options.thresholds:
        return
    for state in spec.treated_states:
        try:
            data = legalization_threshold_data(
                analysis, state, spec,
                min_stops=config.threshold.min_stops or config.option('THRESHOLD_MIN_STOPS', 1000),
                max_locations=config.threshold.max_locations or config.option('THRESHOLD_MAX_LOCATIONS', 100),
            )
        except (PolicyError, ThresholdError) as exc:
            run.skip(f"policy:threshold:{state}", exc)
            continue
        try:
            result = fit_prepost(data, _sampler(config), seed=config.seed)
        except InferenceError as exc:
            run.fail(NotConvergedError(f"{state} pre/post threshold sampler failed: {exc}"))
            continue
        run.paths.extend(write_fit_outputs(result, run.directory, prefix=f"policy_threshold_{state}"))
        if not result.converged:
            run.fail(NotConvergedError(f"{state} pre/post threshold model did not converge"))


def analyze_stage(config):
    """
    Run the selected analyses over the standardized records.

    Each JSON output embeds a ``provenance`` block (input hashes, seed,
    package versions, analysis constants); ``provenance.json`` repeats it
    with the list of every output. Analyses no state supports are skipped,
    with the missing fields, into ``skipped.json``.
    """
    records, hashes = load_standardized(config)
    tables, tables_hash = get_reference_tables(config.reference_tables)
    if tables_hash:
        hashes[os.path.basename(config.reference_tables)] = tables_hash
    if config.content_hash:
        hashes['config'] = config.content_hash
    census = None
    if 'stop_rate' in config.analyses:
        census, hashes[os.path.basename(config.census)] = load_census(config.census)
    provenance = {
        'inputs': hashes,
        'seed': config.seed,
        'versions': module_versions(),
        'constants': config.traffic_stops,
    }
    analysis = analysis_set(config, records)
    report = availability_report(analysis, config.option('FIELD_AVAILABILITY_CUTOFF', 0.70))
    logger.info(f"Analysis set: {len(analysis)} of {len(records)} records over {sorted(report)}")

    run = _Analyses(config, provenance)
    run.json('availability.json', {'availability': report}, 'availability')

    cells = None
    if 'stop_rate' in config.analyses:
        cells = _stop_rate(run, analysis, census, tables)
    if 'poststop' in config.analyses:
        _poststop(run, analysis, report, cells)
    if 'outcome_test' in config.analyses:
        _outcome_test(run, analysis, report)
    if 'threshold' in config.analyses:
        _threshold(run, analysis, report)
    if 'policy' in config.analyses:
        _policy(run, analysis, report)

    run.paths.append(write_json(os.path.join(run.directory, 'skipped.json'), {'skipped': run.skipped}))
    run.paths.append(write_json(os.path.join(run.directory, 'provenance.json'),
                                {**provenance, 'outputs': run.outputs}))
    return StageResult(run.paths, {'records': len(analysis), 'skipped': len(run.skipped)}, run.error)


# report

def _read_frame(path):
    return pd.read_csv(path, dtype={'location': str, 'state': str})


def _headlines(results):
    """Computed headline numbers keyed like ``REFERENCE_VALUES``."""
    values = {}
    path = os.path.join(results, 'stop_rate.json')
    if os.path.isfile(path):
        with open(path, encoding='utf-8') as handle:
            rows = {row['name']: row['estimate'] for row in json.load(handle)['coefficients']}
        for race in ('Black', 'Hispanic'):
            if f"race[{race}]" in rows:
                values[f"stop_rate:{race}"] = rows[f"race[{race}]"]
    path = os.path.join(results, 'outcome_test_aggregate.csv')
    if os.path.isfile(path):
        for row in pd.read_csv(path).itertuples(index=False):
            if pd.notna(row.hit_rate):
                values[f"hit_rate:{row.race}"] = float(row.hit_rate)
    path = os.path.join(results, 'threshold_aggregates.csv')
    if os.path.isfile(path):
        for row in pd.read_csv(path).itertuples(index=False):
            if row.period == 'pre':
                values[f"threshold:{row.race}"] = float(row.mean)
    path = os.path.join(results, 'policy_did.json')
    if os.path.isfile(path):
        with open(path, encoding='utf-8') as handle:
            for row in json.load(handle)['coefficients']:
                values[row['term']] = row['estimate']
    return values


def summary_markdown(results):
    """Headline numbers beside their reference values and tolerances."""
    values = _headlines(results)
    lines = [
        '# Traffic stop analysis summary',
        '',
        '| Quantity | Computed | Reference | Tolerance | Within |',
        '|---|---|---|---|---|',
    ]
    for key, (reference, tolerance) in REFERENCE_VALUES.items():
        if key in values:
            computed = f"{values[key]:.3f}"
            within = 'yes' if abs(values[key] - reference) <= tolerance + 1e-12 else 'no'
        else:
            computed, within = 'n/a', 'n/a'
        lines.append(f"| {key} | {computed} | {reference:.2f} | ±{tolerance:.2f} | {within} |")
    for key in sorted(set(values) - set(REFERENCE_VALUES)):
        lines.append(f"| {key} | {values[key]:.3f} | | | |")

    path = os.path.join(results, 'policy_summary.json')
    if os.path.isfile(path):
        with open(path, encoding='utf-8') as handle:
            delta = json.load(handle).get('innocent_search_delta')
        if delta is not None:
            lines += ['', f"Searches finding no contraband, year after legalization vs year before: {delta:+.1%}"]

    path = os.path.join(results, 'skipped.json')
    if os.path.isfile(path):
        with open(path, encoding='utf-8') as handle:
            skipped = json.load(handle)['skipped']
        if skipped:
            lines += ['', '## Skipped', '']
            lines += [f"- {entry['analysis']}: {entry['reason']}" for entry in skipped]
    return '\n'.join(lines) + '\n'


def _policy_figure(results, outcome):
    """Rate series with the trend line of each (state, race, side) alongside."""
    series = _read_frame(os.path.join(results, f"policy_{outcome}_series.csv"))
    trends_path = os.path.join(results, f"policy_{outcome}_trends.csv")
    if os.path.isfile(trends_path):
        trends = _read_frame(trends_path)[['state', 'race', 'side', 'slope', 'intercept']]
        series = series.merge(trends, on=['state', 'race', 'side'], how='left')
    series['fitted'] = series['intercept'] + series['slope'] * series['years'] if 'slope' in series else np.nan
    return series


def report_stage(config):
    """
    Plot-data CSVs (one per figure) and ``summary.md`` from the analyze
    stage's results, which must still match what the last analyze run
    into the same directory recorded.
    """
    results = os.path.join(config.output_dir, 'results')
    if not os.path.isdir(results):
        raise ConfigError(f"no results at {results}; run analyze first")
    analyzed = latest_recorded_run('analyze', config.output_dir)
    if analyzed is not None:
        problems = ledger_mismatches(analyzed.id, config.output_dir)
        if problems:
            raise ManifestError(f"results changed since analyze run {analyzed.id}: {problems}")
    figures = config.subdir('figures')
    records, _ = load_standardized(config)
    analysis = analysis_set(config, records)
    result = StageResult()

    def emit(name, frame):
        result.paths.append(write_csv(os.path.join(figures, name), frame))

    def present(name):
        return os.path.isfile(os.path.join(results, name))

    if present('cells.csv'):
        emit('stop_rates.csv', stop_rate_points(_read_frame(os.path.join(results, 'cells.csv'))))
    if present('battery.csv'):
        emit('search_rates.csv', poststop_rate_points(analysis, 'search'))
        emit('arrest_rates.csv', poststop_rate_points(analysis, 'arrest'))
    if present('outcome_test_locations.csv'):
        emit('hit_rates.csv', hit_rate_points(_read_frame(os.path.join(results, 'outcome_test_locations.csv'))))
    if present('threshold_scatter.csv'):
        emit('threshold_scatter.csv', _read_frame(os.path.join(results, 'threshold_scatter.csv')))
    for outcome in ('search', 'drug_misdemeanor'):
        if present(f"policy_{outcome}_series.csv"):
            emit(f"policy_{outcome}.csv", _policy_figure(results, outcome))
    if present('policy_control_series.csv'):
        emit('policy_control.csv', _read_frame(os.path.join(results, 'policy_control_series.csv')))

    path = os.path.join(config.output_dir, 'summary.md')
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(summary_markdown(results))
    result.paths.append(path)
    result.summary = {'figures': len(result.paths) - 1}
    logger.info(f"Report: {result.summary['figures']} figure files and {path}")
    return result


# synth

def synth_stage(synth_config, directory, workers=None):
    paths = write_bundle(synth_config, directory, workers)
    return StageResult(paths, {'files': len(paths), 'seed': synth_config.seed})
