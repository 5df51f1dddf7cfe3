from pathlib import Path

from django.conf import settings

from koopman.management.base import KalikoCommand
from koopman.models import KalikoModel
from koopman.services import CheckpointService, DatasetService, ExportService, TrainingService


class Command(KalikoCommand):
    help = 'Train a KALIKO model with replay overshooting; writes checkpoint and training report'

    def add_arguments(self, parser):
        parser.add_argument('--data', required=True, help='Dataset directory written by gen_data')
        parser.add_argument('--out', required=True, help='Output directory')
        parser.add_argument('--resume', help='Checkpoint to continue from (step counter and optimizer state)')
        parser.add_argument('--steps', type=int, help='Override training.steps')
        parser.add_argument('--seed', type=int, help='Override training.seed')
        self.add_config_argument(parser)

    def execute_command(self, **options):
        out_dir = Path(options['out'])
        data_dir = Path(options['data'])
        if not data_dir.is_dir():
            raise FileNotFoundError(f"Data directory not found: {data_dir}")

        config = self.resolve_config(options, {
            'training': {'steps': options['steps'], 'seed': options['seed']},
            'out_dir': str(out_dir),
        })
        dataset = DatasetService.load(data_dir)

        if options.get('resume'):
            model = CheckpointService.load(options['resume'])
            config = config.model_copy(update={'model': model.config})
            self.stdout.write(self.style.WARNING(f'Resuming from step {model.step}'))
        else:
            system = dataset.system
            model = KalikoModel(
                config.model,
                state_dim=dataset.state_dim,
                stats=dataset.stats,
                metadata={
                    'system': system.name if system else None,
                    'delta': system.delta if system else None,
                    'dt': dataset.dt,
                },
            )

        checkpoint_path = out_dir / settings.KALIKO_CHECKPOINT_NAME
        model, report = TrainingService.train(
            model,
            dataset,
            config.training,
            checkpoint_path=checkpoint_path,
            progress=options['verbosity'] >= 1,
        )

        CheckpointService.save(model, checkpoint_path)
        ExportService.train_report(report, out_dir / 'train_report.csv')
        ExportService.write_json(report.final_metrics, out_dir / 'final_metrics.json')
        self.finish(config, out_dir, f'✓ Trained to step {model.step}; checkpoint at {checkpoint_path}')
