import logging
import os

from django.core.management.base import BaseCommand, CommandError
from django.test.utils import override_settings
from django.utils import timezone

from disparity.exceptions import CensusError
from pipeline.config import load_config
from pipeline.exceptions import EXIT_OK, EXIT_VALIDATION, ManifestError, PipelineError
from pipeline.models import PipelineRun
from pipeline.utils import get_redis_cache_metrics, get_run_manifest, record_artifacts, write_manifest
from records.exceptions import RecordsError

logger = logging.getLogger(__name__)


class PipelineCommand(BaseCommand):
    """
    Shared flags and run bookkeeping: every invocation gets a PipelineRun
    row, every written file an OutputArtifact row and a manifest entry.
    """

    requires_inputs = True

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Pipeline config file (key = value text)')
        parser.add_argument('--seed', type=int, help='Override the config seed')
        parser.add_argument('--output-dir', help='Override the config output directory')
        parser.add_argument('--set', action='append', default=[], dest='overrides', metavar='KEY=VALUE',
                            help='Override any config key, e.g. --set settings.MAX_ERROR_RATE=0.1')

    def config_overrides(self, options):
        overrides = {}
        for item in options['overrides']:
            key, sep, value = item.partition('=')
            if not sep or not key.strip():
                raise CommandError(f"--set expects KEY=VALUE, got {item!r}", returncode=EXIT_VALIDATION)
            overrides[key.strip()] = value.strip()
        if options.get('seed') is not None:
            overrides['seed'] = options['seed']
        if options.get('output_dir'):
            overrides['output_dir'] = os.path.abspath(options['output_dir'])
        return overrides

    def load(self, options):
        try:
            return load_config(options['config'], self.config_overrides(options), self.requires_inputs)
        except PipelineError as exc:
            logger.error(f"Invalid config {options['config']}: {exc}")
            raise CommandError(str(exc), returncode=exc.exit_code) from exc

    def mark_failed(self, run, code, error):
        run.status = PipelineRun.STATUS_FAILED
        run.exit_code = code
        run.message = str(error)
        run.finished_at = timezone.now()
        run.save()

    def fail(self, run, code, error):
        self.mark_failed(run, code, error)
        raise CommandError(str(error), returncode=code) from error

    def check_ledger(self, run, files):
        """Every artifact the run recorded must sit in manifest.json under the same hash."""
        problems = {
            path: 'changed' if path in files else 'missing'
            for path, digest in get_run_manifest(run.id).items() if files.get(path) != digest
        }
        if problems:
            self.fail(run, ManifestError.exit_code, ManifestError(f"run ledger and manifest disagree: {problems}"))

    def run_stage(self, stage, output_dir, seed, argument, config=None, verbosity=1):
        """
        Run ``stage(argument)`` under the run ledger.

        Returns:
            StageResult
        """
        run = PipelineRun.objects.create(
            command=self.stage_name,
            config_path=str(config.path or '') if config else '',
            config_hash=config.content_hash or '' if config else '',
            output_dir=output_dir,
            seed=seed,
        )
        logger.info(f"Starting {self.stage_name} run {run.id} into {output_dir}")
        os.makedirs(output_dir, exist_ok=True)
        try:
            if config is not None:
                with override_settings(TRAFFIC_STOPS=config.traffic_stops):
                    result = stage(argument)
            else:
                result = stage(argument)
        except PipelineError as exc:
            self.fail(run, exc.exit_code, exc)
        except (RecordsError, CensusError) as exc:
            self.fail(run, EXIT_VALIDATION, exc)
        except Exception as exc:
            logger.exception(f"{self.stage_name} run {run.id} crashed")
            self.mark_failed(run, None, exc)
            write_manifest(output_dir)
            raise

        record_artifacts(run, result.paths, self.stage_name)
        self.check_ledger(run, write_manifest(output_dir))
        if result.error is not None:
            self.stdout.write(self.style.WARNING(f"Outputs written, but: {result.error}"))
            self.fail(run, result.error.exit_code, result.error)

        run.status = PipelineRun.STATUS_OK
        run.exit_code = EXIT_OK
        run.finished_at = timezone.now()
        run.save()
        if verbosity > 1:
            self.stdout.write(f"Cache metrics: {get_redis_cache_metrics()}")
        return result
