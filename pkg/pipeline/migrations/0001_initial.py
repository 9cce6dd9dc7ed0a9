import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='PipelineRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('command', models.CharField(help_text='Management command name', max_length=32)),
                ('config_path', models.CharField(blank=True, help_text='Pipeline config file', max_length=500)),
                ('config_hash', models.CharField(blank=True, help_text='Blob hash of the config file', max_length=40)),
                ('output_dir', models.CharField(help_text='Directory the run writes into', max_length=500)),
                ('seed', models.BigIntegerField(help_text='Base random seed')),
                ('status', models.CharField(
                    choices=[('running', 'Running'), ('ok', 'Finished'), ('failed', 'Failed')],
                    default='running', max_length=16,
                )),
                ('exit_code', models.PositiveSmallIntegerField(blank=True, null=True)),
                ('message', models.TextField(blank=True)),
                ('started_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'verbose_name': 'Pipeline run',
                'verbose_name_plural': 'Pipeline runs',
                'ordering': ['-started_at', '-id'],
            },
        ),
        migrations.CreateModel(
            name='OutputArtifact',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('path', models.CharField(help_text="Path relative to the run's output directory", max_length=500)),
                ('kind', models.CharField(help_text='Stage that wrote the file', max_length=32)),
                ('blob_hash', models.CharField(max_length=40)),
                ('size', models.BigIntegerField()),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(
                    on_delete=django.db.models.deletion.CASCADE, related_name='artifacts', to='pipeline.pipelinerun',
                )),
            ],
            options={
                'ordering': ['path'],
            },
        ),
        migrations.AddConstraint(
            model_name='outputartifact',
            constraint=models.UniqueConstraint(fields=('run', 'path'), name='unique_artifact_path_per_run'),
        ),
    ]
