import os

from django.conf import settings
from django.core.management.base import CommandError

from pipeline.exceptions import EXIT_VALIDATION
from pipeline.stages import synth_stage
from synth.config import SynthConfig
from synth.exceptions import SynthError

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Generate a synthetic bundle (threshold counts, count cells, stop records) with its truth'
    stage_name = 'synth'

    def add_arguments(self, parser):
        parser.add_argument('--output-dir', required=True, help='Directory for the bundle')
        parser.add_argument('--seed', type=int, default=settings.TRAFFIC_STOPS.get('SEED', 0))
        parser.add_argument('--locations', type=int, default=SynthConfig.locations)
        parser.add_argument('--stops-per-group', type=int, default=SynthConfig.stops_per_group)
        parser.add_argument('--prepost', action='store_true', help='Add post-period threshold groups')
        parser.add_argument('--workers', type=int, default=None)

    def handle(self, *args, **options):
        try:
            config = SynthConfig(
                seed=options['seed'],
                locations=options['locations'],
                stops_per_group=options['stops_per_group'],
                periods=('pre', 'post') if options['prepost'] else ('pre',),
            )
        except SynthError as exc:
            raise CommandError(str(exc), returncode=EXIT_VALIDATION) from exc
        directory = os.path.abspath(options['output_dir'])
        result = self.run_stage(lambda c: synth_stage(c, directory, options['workers']), directory,
                                config.seed, config, verbosity=options['verbosity'])
        self.stdout.write(self.style.SUCCESS(f"Wrote {result.summary['files']} synthetic files to {directory}"))
