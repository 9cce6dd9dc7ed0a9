import io
import json
import os
import shutil
import tempfile
from unittest.mock import MagicMock, patch

from django.core.cache import cache
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase, TestCase

from inference.exceptions import InitializationError
from records.pipeline import read_standardized, write_standardized
from records.tests import SCHEMA_TEXT, stop_row, to_csv
from synth.config import SynthConfig
from synth.generators import gen_binary

from .config import load_config
from .exceptions import ConfigError, ManifestError
from .models import OutputArtifact, PipelineRun
from .signals import manifest_cache_key
from .stages import summary_markdown
from .utils import get_redis_cache_metrics, get_run_manifest, validate_manifest, write_manifest


def write(path, content, mode='w'):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, mode) as handle:
        handle.write(content)
    return path


def read_bytes(path):
    with open(path, 'rb') as handle:
        return handle.read()


class WorkspaceMixin:
    """A throwaway directory per test."""

    def setUp(self):
        super().setUp()
        self.directory = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, self.directory)
        cache.clear()

    def path(self, *parts):
        return os.path.join(self.directory, *parts)


class ConfigTest(WorkspaceMixin, SimpleTestCase):
    """Test cases for pipeline config files"""

    def config(self, text, **kwargs):
        return load_config(write(self.path('pipeline.conf'), text), **kwargs)

    def test_paths_and_groups(self):
        """Test relative paths resolve against the config directory"""
        config = self.config(
            "output_dir = out\n"
            "seed = 7  # fixed\n"
            "inputs.co = raw/co.csv\n"
            "inputs.WA = raw/wa.csv\n"
            "analyses = outcome_test, policy\n"
            "disparity.controls = race; race, location\n"
            "threshold.chains = 2\n"
            "policy.legalization_date = 2014-07-08\n",
            require_inputs=False,
        )
        self.assertEqual(config.output_dir, self.path('out'))
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.states, ('CO', 'WA'))
        self.assertEqual(config.inputs['CO'], self.path('raw', 'co.csv'))
        self.assertEqual(config.analyses, ('outcome_test', 'policy'))
        self.assertEqual(config.controls, ('race', 'race, location'))
        self.assertEqual(config.threshold.chains, 2)
        self.assertIsNone(config.threshold.draws)
        self.assertEqual(config.policy.legalization_date.isoformat(), '2014-07-08')
        self.assertEqual(config.schema_path('CO'), os.path.join(self.directory, 'CO.schema'))
        self.assertEqual(len(config.content_hash), 40)

    def test_setting_overrides_typed(self):
        """Test settings overrides take the type of the default they replace"""
        config = self.config(
            "analyses = outcome_test\n"
            "settings.MAX_ERROR_RATE = 0.1\n"
            "settings.ANALYSIS_YEARS = 2012, 2014\n"
            "settings.THRESHOLD_MIN_STOPS = 50\n",
            require_inputs=False,
        )
        self.assertEqual(config.option('MAX_ERROR_RATE'), 0.1)
        self.assertEqual(config.option('ANALYSIS_YEARS'), (2012, 2014))
        self.assertEqual(config.option('THRESHOLD_MIN_STOPS'), 50)
        self.assertEqual(config.traffic_stops['ANALYSIS_RACES'], ('White', 'Black', 'Hispanic'))

    def test_cli_overrides_win(self):
        path = write(self.path('pipeline.conf'), "analyses = policy\nseed = 1\n")
        config = load_config(path, {'seed': 99, 'analyses': 'outcome_test', 'output_dir': None},
                             require_inputs=False)
        self.assertEqual(config.seed, 99)
        self.assertEqual(config.analyses, ('outcome_test',))

    def test_unknown_keys_rejected(self):
        for text in ("threshold.bogus = 1\n", "colour = blue\n", "settings.NOT_A_SETTING = 3\n"):
            with self.assertRaises(ConfigError, msg=text):
                self.config(text, require_inputs=False)

    def test_bad_values_rejected(self):
        with self.assertRaisesRegex(ConfigError, 'integer'):
            self.config("seed = soon\n", require_inputs=False)
        with self.assertRaisesRegex(ConfigError, 'YYYY-MM-DD'):
            self.config("policy.legalization_date = 12/31/2012\n", require_inputs=False)
        with self.assertRaisesRegex(ConfigError, 'unknown analyses'):
            self.config("analyses = outcome_test, astrology\n", require_inputs=False)

    def test_all_problems_listed(self):
        """Test validation reports every missing path at once"""
        with self.assertRaises(ConfigError) as context:
            self.config("analyses = stop_rate\ninputs.CO = co.csv\ncensus = census.csv\n")
        message = str(context.exception)
        self.assertIn('input for CO not found', message)
        self.assertIn('schema for CO not found', message)
        self.assertIn('census not found', message)
        self.assertEqual(context.exception.exit_code, 2)

    def test_non_utf8_config(self):
        """Test undecodable bytes are a config error, not a crash"""
        path = write(self.path('latin.conf'), b'output_dir = caf\xe9\n', 'wb')
        with self.assertRaises(ConfigError):
            load_config(path)

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config(self.path('absent.conf'))


class ManifestTest(WorkspaceMixin, SimpleTestCase):
    """Test cases for output manifests"""

    def setUp(self):
        super().setUp()
        write(self.path('results', 'a.csv'), "x\n1\n")
        write(self.path('b.json'), "{}\n")

    def test_clean_directory(self):
        files = write_manifest(self.directory)
        self.assertEqual(sorted(files), ['b.json', 'results/a.csv'])
        self.assertEqual(validate_manifest(self.directory), {})
        first = read_bytes(self.path('manifest.json'))
        write_manifest(self.directory)
        self.assertEqual(read_bytes(self.path('manifest.json')), first)

    def test_tampering_detected(self):
        write_manifest(self.directory)
        write(self.path('results', 'a.csv'), "x\n2\n")
        os.remove(self.path('b.json'))
        write(self.path('extra.txt'), "hello\n")
        self.assertEqual(validate_manifest(self.directory), {
            'b.json': 'missing', 'extra.txt': 'unlisted', 'results/a.csv': 'changed',
        })

    def test_unreadable_manifest(self):
        with self.assertRaises(ManifestError):
            validate_manifest(self.directory)
        write(self.path('manifest.json'), "not json")
        with self.assertRaises(ManifestError):
            validate_manifest(self.directory)


class RunLedgerTest(TestCase):
    """Test cases for cached run manifests"""

    def setUp(self):
        cache.clear()
        self.run = PipelineRun.objects.create(command='analyze', output_dir='/tmp/out', seed=1)
        OutputArtifact.objects.create(run=self.run, path='results/a.csv', kind='analyze', blob_hash='a' * 40, size=4)

    def test_manifest_cached(self):
        """Test the second lookup is served from cache"""
        self.assertEqual(get_run_manifest(self.run.id), {'results/a.csv': 'a' * 40})
        self.assertEqual(cache.get(manifest_cache_key(self.run.id)), {'results/a.csv': 'a' * 40})
        with self.assertNumQueries(0):
            self.assertEqual(get_run_manifest(self.run.id), {'results/a.csv': 'a' * 40})

    def test_signals_invalidate(self):
        """Test artifact saves and deletes drop the cached manifest"""
        get_run_manifest(self.run.id)
        extra = OutputArtifact.objects.create(run=self.run, path='results/b.csv', kind='analyze',
                                              blob_hash='b' * 40, size=2)
        self.assertIsNone(cache.get(manifest_cache_key(self.run.id)))
        self.assertEqual(len(get_run_manifest(self.run.id)), 2)
        extra.delete()
        self.assertIsNone(cache.get(manifest_cache_key(self.run.id)))
        self.assertEqual(list(get_run_manifest(self.run.id)), ['results/a.csv'])


class CacheMetricsTest(SimpleTestCase):
    """Test cases for Redis keyspace metrics"""

    @patch('pipeline.utils.get_redis_connection')
    def test_hit_ratio(self, connection):
        connection.return_value.info.return_value = {'keyspace_hits': 3, 'keyspace_misses': 1}
        metrics = get_redis_cache_metrics()
        self.assertEqual(metrics['total_requests'], 4)
        self.assertEqual(metrics['hit_ratio'], 75.0)

    @patch('pipeline.utils.get_redis_connection')
    def test_no_requests(self, connection):
        connection.return_value.info.return_value = {}
        self.assertEqual(get_redis_cache_metrics()['hit_ratio'], 0)

    @patch('pipeline.utils.get_redis_connection', side_effect=NotImplementedError('locmem'))
    def test_non_redis_backend(self, _):
        metrics = get_redis_cache_metrics()
        self.assertIn('error', metrics)
        self.assertEqual(metrics['total_requests'], 0)


class NormalizeCommandTest(WorkspaceMixin, TestCase):
    """Test cases for the normalize command over three small states"""

    STATES = ('AZ', 'CO', 'WA')

    def setUp(self):
        super().setUp()
        lines = ["output_dir = out", "analyses = outcome_test"]
        for state in self.STATES:
            rows = [stop_row(StopTime=f"{8 + i:02d}:00") for i in range(10)]
            if state == 'CO':
                rows += [stop_row(StopTime=f"{8 + i:02d}:00") for i in range(3)]
            write(self.path('raw', f"{state}.csv"), to_csv(rows), 'wb')
            write(self.path('schemas', f"{state}.schema"), SCHEMA_TEXT.replace('state = CO', f"state = {state}"))
            lines.append(f"inputs.{state} = raw/{state}.csv")
        lines.append("schema_dir = schemas")
        self.config = write(self.path('pipeline.conf'), '\n'.join(lines) + '\n')

    def normalize(self, **options):
        call_command('normalize', config=self.config, stdout=io.StringIO(), **options)

    def test_outputs_and_audit(self):
        self.normalize()
        for state in self.STATES:
            self.assertTrue(os.path.isfile(self.path('out', 'standardized', f"{state}.csv")))
        with open(self.path('out', 'audit', 'audit.json'), encoding='utf-8') as handle:
            audit = json.load(handle)
        self.assertEqual(audit['states']['CO']['duplicates_removed'], 3)
        self.assertEqual(audit['states']['CO']['output_rows'], 10)
        self.assertEqual(audit['states']['WA']['duplicates_removed'], 0)
        self.assertEqual(audit['over_bound'], [])
        self.assertEqual(validate_manifest(self.path('out')), {})

        run = PipelineRun.objects.get()
        self.assertEqual(run.status, PipelineRun.STATUS_OK)
        self.assertEqual(run.exit_code, 0)
        paths = set(run.artifacts.values_list('path', flat=True))
        self.assertIn('standardized/CO.csv', paths)
        self.assertIn('audit/audit.json', paths)
        self.assertEqual(get_run_manifest(run.id)['audit/audit.json'],
                         run.artifacts.get(path='audit/audit.json').blob_hash)

    def test_rerun_byte_identical(self):
        self.normalize()
        first = {name: read_bytes(self.path('out', name))
                 for name in ('manifest.json', 'audit/audit.json', 'standardized/CO.csv')}
        self.normalize()
        for name, data in first.items():
            self.assertEqual(read_bytes(self.path('out', name)), data, name)
        self.assertEqual(PipelineRun.objects.count(), 2)

    def test_absent_column_fails_before_processing(self):
        """Test a schema naming a missing column stops the run with exit code 2"""
        text = SCHEMA_TEXT.replace('state = CO', 'state = WA').replace('= Outcome', '= Disposition')
        write(self.path('schemas', 'WA.schema'), text)
        with self.assertRaises(CommandError) as context:
            self.normalize()
        self.assertEqual(context.exception.returncode, 2)
        self.assertIn('Disposition', str(context.exception))
        self.assertFalse(os.path.exists(self.path('out', 'standardized')))
        run = PipelineRun.objects.get()
        self.assertEqual((run.status, run.exit_code), (PipelineRun.STATUS_FAILED, 2))

    def test_error_rate_bound(self):
        """Test a state over the error-sink bound exits 3 with outputs kept"""
        rows = [stop_row(StopTime=f"{8 + i:02d}:00") for i in range(10)] + [['17', '2013-05-02']] * 2
        write(self.path('raw', 'AZ.csv'), to_csv(rows), 'wb')
        with self.assertRaises(CommandError) as context:
            self.normalize()
        self.assertEqual(context.exception.returncode, 3)
        with open(self.path('out', 'audit', 'audit.json'), encoding='utf-8') as handle:
            self.assertEqual(json.load(handle)['over_bound'], ['AZ'])
        self.assertTrue(os.path.isfile(self.path('out', 'audit', 'error_sink.csv')))
        self.assertEqual(PipelineRun.objects.get().exit_code, 3)

        # a looser bound lets the same data through
        self.normalize(overrides=['settings.MAX_ERROR_RATE=0.2'])
        self.assertEqual(PipelineRun.objects.filter(status=PipelineRun.STATUS_OK).count(), 1)

    def test_bad_set_flag(self):
        with self.assertRaises(CommandError) as context:
            self.normalize(overrides=['MAX_ERROR_RATE'])
        self.assertEqual(context.exception.returncode, 2)


class AnalyzeCommandTest(WorkspaceMixin, TestCase):
    """Test cases for the analyze and report commands on synthetic records"""

    def setUp(self):
        super().setUp()
        records, _ = gen_binary(SynthConfig(seed=11, locations=3, stops_per_group=300))
        self.states = sorted({r.state for r in records})
        for state in self.states:
            path = self.path('out', 'standardized', f"{state}.csv")
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, 'w', newline='', encoding='utf-8') as handle:
                write_standardized([r for r in records if r.state == state], handle)
        lines = ["output_dir = out", "analyses = outcome_test, threshold, policy", "threshold.min_stops = 10"]
        lines += [f"inputs.{state} = raw/{state}.csv" for state in self.states]
        self.config = write(self.path('pipeline.conf'), '\n'.join(lines) + '\n')

    def command(self, name, **options):
        call_command(name, config=self.config, stdout=io.StringIO(), **options)

    def results(self):
        return sorted(os.listdir(self.path('out', 'results')))

    def test_only_selected_analysis(self):
        """Test --analyses outcome_test writes just its tables beside the run files"""
        self.command('analyze', analyses='outcome_test')
        self.assertEqual(self.results(), [
            'availability.json', 'outcome_test_aggregate.csv', 'outcome_test_locations.csv',
            'provenance.json', 'skipped.json',
        ])
        with open(self.path('out', 'results', 'provenance.json'), encoding='utf-8') as handle:
            provenance = json.load(handle)
        self.assertIn('standardized/CO.csv', provenance['inputs'])
        self.assertEqual(provenance['seed'], 20170601)
        self.assertEqual(provenance['outputs']['outcome_test_aggregate.csv'], 'outcome_test')
        self.assertEqual(PipelineRun.objects.get().artifacts.count(), 5)

    def test_rerun_byte_identical(self):
        self.command('analyze', analyses='outcome_test')
        first = {name: read_bytes(self.path('out', 'results', name)) for name in self.results()}
        manifest = read_bytes(self.path('out', 'manifest.json'))
        self.command('analyze', analyses='outcome_test')
        for name, data in first.items():
            self.assertEqual(read_bytes(self.path('out', 'results', name)), data, name)
        self.assertEqual(read_bytes(self.path('out', 'manifest.json')), manifest)

    def test_unsupported_analysis_skipped(self):
        """Test an analysis no state supports is skipped with its missing fields"""
        for state in self.states:
            path = self.path('out', 'standardized', f"{state}.csv")
            with open(path, 'rb') as handle:
                records = [r.with_changes(contraband_found=None) for r in read_standardized(handle, state)]
            with open(path, 'w', newline='', encoding='utf-8') as handle:
                write_standardized(records, handle)
        self.command('analyze', analyses='outcome_test')
        with open(self.path('out', 'results', 'skipped.json'), encoding='utf-8') as handle:
            skipped = json.load(handle)['skipped']
        self.assertEqual([entry['analysis'] for entry in skipped], ['outcome_test'])
        self.assertEqual(skipped[0]['missing']['CO'], ['contraband_found'])
        self.assertNotIn('outcome_test_aggregate.csv', self.results())

    def test_missing_standardized_file(self):
        os.remove(self.path('out', 'standardized', 'MT.csv'))
        with self.assertRaises(CommandError) as context:
            self.command('analyze', analyses='outcome_test')
        self.assertEqual(context.exception.returncode, 2)

    @patch('pipeline.stages.write_fit_outputs', return_value=[])
    @patch('pipeline.stages.ppc')
    @patch('pipeline.stages.fit_thresholds')
    def test_non_convergence_exit_code(self, fit, check, outputs):
        """Test an unconverged threshold fit exits 4 after writing its outputs"""
        fit.return_value = MagicMock(converged=False, max_rhat=1.4, metadata={})
        with self.assertRaises(CommandError) as context:
            self.command('analyze', analyses='threshold')
        self.assertEqual(context.exception.returncode, 4)
        self.assertIn('threshold_counts.csv', self.results())
        self.assertIn('provenance.json', self.results())
        sampler = fit.call_args[0][1]
        self.assertEqual(sampler.chains, 5)
        run = PipelineRun.objects.get()
        self.assertEqual((run.status, run.exit_code), (PipelineRun.STATUS_FAILED, 4))
        self.assertTrue(run.artifacts.filter(path='results/threshold_counts.csv').exists())

    @patch('pipeline.stages.fit_thresholds', side_effect=InitializationError('no finite starting point'))
    def test_sampler_failure_exit_code(self, fit):
        """Test a sampler that cannot start exits 4 with the run failed and the counts recorded"""
        with self.assertRaises(CommandError) as context:
            self.command('analyze', analyses='threshold')
        self.assertEqual(context.exception.returncode, 4)
        self.assertIn('no finite starting point', str(context.exception))
        run = PipelineRun.objects.get()
        self.assertEqual((run.status, run.exit_code), (PipelineRun.STATUS_FAILED, 4))
        self.assertTrue(run.artifacts.filter(path='results/threshold_counts.csv').exists())
        self.assertEqual(validate_manifest(self.path('out')), {})

    @patch('pipeline.stages.outcome_test', side_effect=ZeroDivisionError('float division by zero'))
    def test_unexpected_error_marks_run_failed(self, _):
        """Test an unhandled error still closes the run row and writes the manifest"""
        with self.assertRaises(ZeroDivisionError):
            self.command('analyze', analyses='outcome_test')
        run = PipelineRun.objects.get()
        self.assertEqual(run.status, PipelineRun.STATUS_FAILED)
        self.assertIsNone(run.exit_code)
        self.assertIsNotNone(run.finished_at)
        self.assertIn('float division by zero', run.message)
        self.assertTrue(os.path.isfile(self.path('out', 'manifest.json')))

    @patch('pipeline.management.commands._base.get_run_manifest', return_value={'results/ghost.csv': 'f' * 40})
    def test_ledger_manifest_disagreement(self, _):
        """Test a recorded artifact missing from manifest.json fails the run with exit code 2"""
        with self.assertRaises(CommandError) as context:
            self.command('analyze', analyses='outcome_test')
        self.assertEqual(context.exception.returncode, 2)
        self.assertIn('results/ghost.csv', str(context.exception))
        self.assertEqual(PipelineRun.objects.get().status, PipelineRun.STATUS_FAILED)

    def test_report_checks_analyze_ledger(self):
        """Test report reads the cached analyze ledger and rejects edited results"""
        self.command('analyze', analyses='outcome_test')
        analyzed = PipelineRun.objects.get()
        self.assertIn('results/outcome_test_aggregate.csv', cache.get(manifest_cache_key(analyzed.id)))
        self.command('report')
        self.assertEqual(PipelineRun.objects.get(command='report').exit_code, 0)

        with open(self.path('out', 'results', 'outcome_test_aggregate.csv'), 'a', encoding='utf-8') as handle:
            handle.write('edited\n')
        with self.assertRaises(CommandError) as context:
            self.command('report')
        self.assertEqual(context.exception.returncode, 2)
        self.assertIn('results/outcome_test_aggregate.csv', str(context.exception))
        self.assertIn(f"analyze run {analyzed.id}", str(context.exception))

    def test_policy_then_report(self):
        """Test the legalization outputs feed the report figures and summary"""
        self.command('analyze', analyses='policy')
        results = self.results()
        for name in ('policy_did.json', 'policy_search_series.csv', 'policy_search_trends.csv',
                     'policy_control_series.csv', 'policy_summary.json'):
            self.assertIn(name, results)
        with open(self.path('out', 'results', 'policy_did.json'), encoding='utf-8') as handle:
            did = json.load(handle)
        self.assertTrue(did['converged'])
        self.assertEqual(did['metadata']['treated_states'], ['CO', 'WA'])

        self.command('report')
        figures = sorted(os.listdir(self.path('out', 'figures')))
        self.assertIn('policy_search.csv', figures)
        self.assertIn('policy_control.csv', figures)
        with open(self.path('out', 'summary.md'), encoding='utf-8') as handle:
            summary = handle.read()
        self.assertIn('| legalization:White |', summary)
        self.assertEqual(validate_manifest(self.path('out')), {})
        self.assertEqual(list(PipelineRun.objects.order_by('id').values_list('command', flat=True)),
                         ['analyze', 'report'])

    def test_report_needs_results(self):
        with self.assertRaises(CommandError) as context:
            self.command('report')
        self.assertEqual(context.exception.returncode, 2)


class SummaryTest(WorkspaceMixin, SimpleTestCase):
    """Test cases for the headline summary"""

    def test_reference_comparison(self):
        results = self.path('results')
        write(os.path.join(results, 'stop_rate.json'), json.dumps({'coefficients': [
            {'name': 'race[Black]', 'estimate': 0.36, 'std_error': 0.01},
            {'name': 'race[Hispanic]', 'estimate': -0.30, 'std_error': 0.01},
        ]}))
        write(os.path.join(results, 'outcome_test_aggregate.csv'), "race,searches,hits,hit_rate\nWhite,100,30,0.3\n")
        write(os.path.join(results, 'skipped.json'), json.dumps({'skipped': [
            {'analysis': 'threshold', 'reason': 'no state carries location', 'missing': {}},
        ]}))
        lines = summary_markdown(results).splitlines()
        self.assertIn('| stop_rate:Black | 0.360 | 0.37 | ±0.03 | yes |', lines)
        self.assertIn('| stop_rate:Hispanic | -0.300 | -0.40 | ±0.03 | no |', lines)
        self.assertIn('| hit_rate:White | 0.300 | 0.28 | ±0.01 | no |', lines)
        self.assertIn('| threshold:White | n/a | 0.20 | ±0.02 | n/a |', lines)
        self.assertIn('- threshold: no state carries location', lines)


class SynthCommandTest(WorkspaceMixin, TestCase):
    """Test cases for the synth command"""

    def test_bundle_recorded(self):
        out = self.path('bundle')
        call_command('synth', output_dir=out, seed=3, locations=3, stops_per_group=100, stdout=io.StringIO())
        self.assertTrue(os.path.isfile(os.path.join(out, 'truth.json')))
        self.assertEqual(validate_manifest(out), {})
        run = PipelineRun.objects.get()
        self.assertEqual((run.command, run.seed, run.exit_code), ('synth', 3, 0))
        with open(os.path.join(out, 'manifest.json'), encoding='utf-8') as handle:
            listed = json.load(handle)['files']
        self.assertEqual(set(run.artifacts.values_list('path', flat=True)), set(listed))

    def test_invalid_parameters(self):
        with self.assertRaises(CommandError) as context:
            call_command('synth', output_dir=self.path('bundle'), locations=0, stdout=io.StringIO())
        self.assertEqual(context.exception.returncode, 2)
        self.assertFalse(PipelineRun.objects.exists())
