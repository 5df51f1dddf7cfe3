from pathlib import Path

from koopman.management.base import KalikoCommand
from koopman.serializers import ModelConfig
from koopman.services import DatasetService, DmdService, ExportService


class Command(KalikoCommand):
    help = 'Local DMD baseline refitted on each context window; same outputs as predict'

    def add_arguments(self, parser):
        parser.add_argument('--data', required=True, help='Dataset directory')
        parser.add_argument('--out', required=True, help='Output directory')
        parser.add_argument('--t-in', type=int, dest='t_in')
        parser.add_argument('--t-out', type=int, dest='t_out')
        parser.add_argument('--delay', type=int,
                            help='Delay-embedding length d (default: delays * chunk of the model config)')
        parser.add_argument('--raw-units', action='store_true', dest='raw_units', default=None)
        self.add_config_argument(parser)

    def execute_command(self, **options):
        out_dir = Path(options['out'])
        config = self.resolve_config(options, {
            'inference': {
                't_in': options['t_in'],
                't_out': options['t_out'],
                'raw_units': options['raw_units'],
            },
            'out_dir': str(out_dir),
        })
        model_config: ModelConfig = config.model
        delay = options['delay'] or model_config.delays * model_config.chunk
        dataset = DatasetService.load(options['data'])

        inference = config.inference
        summary, forecasts = DmdService.evaluate(
            dataset.trajectories,
            dataset.stats,
            inference.t_in,
            inference.t_out,
            delay,
            raw_units=inference.raw_units,
        )
        ExportService.predictions(forecasts, summary, out_dir, inference.t_in)
        self.finish(config, out_dir, f'✓ Local DMD (delay {delay}) on {len(forecasts)} trajectories')
