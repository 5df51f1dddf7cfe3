from pathlib import Path

from koopman.management.base import KalikoCommand
from koopman.services import CheckpointService, DatasetService, ExportService, InferenceService


class Command(KalikoCommand):
    help = 'Open-loop prediction on every dataset trajectory from a t_in context; writes CSVs and summary.json'

    def add_arguments(self, parser):
        parser.add_argument('--ckpt', required=True, help='Checkpoint written by train')
        parser.add_argument('--data', required=True, help='Dataset directory')
        parser.add_argument('--out', required=True, help='Output directory')
        parser.add_argument('--t-in', type=int, dest='t_in', help='Context length in raw steps (default 128)')
        parser.add_argument('--t-out', type=int, dest='t_out', help='Predicted raw steps (default 64)')
        parser.add_argument('--raw-units', action='store_true', dest='raw_units', default=None,
                            help='Also report metrics in raw (unnormalized) units')
        self.add_config_argument(parser)

    def execute_command(self, **options):
        out_dir = Path(options['out'])
        model = CheckpointService.load(options['ckpt'])
        config = self.resolve_config(options, {
            'inference': {
                't_in': options['t_in'],
                't_out': options['t_out'],
                'raw_units': options['raw_units'],
            },
            'out_dir': str(out_dir),
        })
        config = config.model_copy(update={'model': model.config})
        dataset = DatasetService.load(options['data'])

        inference = config.inference
        summary, forecasts = InferenceService.evaluate(
            model, dataset.trajectories, inference.t_in, inference.t_out, raw_units=inference.raw_units
        )
        ExportService.predictions(forecasts, summary, out_dir, inference.t_in)

        if 'mse' in summary:
            message = f"✓ {len(forecasts)} trajectories: mse={summary['mse']:.6g} mae={summary['mae']:.6g}"
        else:
            message = f'✓ {len(forecasts)} trajectories, nothing predicted (t_out = {inference.t_out})'
        self.finish(config, out_dir, message)
