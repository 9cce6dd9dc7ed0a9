from pipeline.stages import report_stage

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Write plot-data CSVs and a markdown summary from the analysis results'
    stage_name = 'report'
    requires_inputs = False

    def handle(self, *args, **options):
        config = self.load(options)
        result = self.run_stage(report_stage, config.output_dir, config.seed, config, config,
                                options['verbosity'])
        self.stdout.write(self.style.SUCCESS(f"Wrote {result.summary['figures']} figure files and summary.md"))
