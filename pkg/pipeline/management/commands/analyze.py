from pipeline.stages import analyze_stage

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Run the selected analyses over the standardized records'
    stage_name = 'analyze'
    requires_inputs = False

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--analyses', help='Comma-separated subset, e.g. outcome_test,threshold')

    def config_overrides(self, options):
        overrides = super().config_overrides(options)
        if options.get('analyses'):
            overrides['analyses'] = options['analyses']
        return overrides

    def handle(self, *args, **options):
        config = self.load(options)
        result = self.run_stage(analyze_stage, config.output_dir, config.seed, config, config,
                                options['verbosity'])
        if result.summary['skipped']:
            self.stdout.write(self.style.WARNING(f"{result.summary['skipped']} analyses skipped; see results/skipped.json"))
        self.stdout.write(self.style.SUCCESS(
            f"Analyzed {result.summary['records']} records: {len(result.paths)} files written"
        ))
