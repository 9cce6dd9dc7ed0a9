from pipeline.stages import normalize_stage

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Standardize each state\'s raw export and write the audit report'
    stage_name = 'normalize'

    def handle(self, *args, **options):
        config = self.load(options)
        result = self.run_stage(normalize_stage, config.output_dir, config.seed, config, config,
                                options['verbosity'])
        for state, rows in result.summary.items():
            self.stdout.write(f'{state}: {rows} standardized records')
        self.stdout.write(self.style.SUCCESS(f'Normalized {len(result.summary)} states into {config.output_dir}'))
