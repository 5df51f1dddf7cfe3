from pathlib import Path

import numpy as np
import pandas as pd
from django.conf import settings

from koopman.management.base import KalikoCommand
from koopman.models import KalikoModel
from koopman.services import CheckpointService, DatasetService, ExportService, InferenceService, TrainingService

SUITES = {
    'delay': [('n_d=1', {'delays': 1}), ('n_d=4', {'delays': 4}), ('n_d=6', {'delays': 6})],
    'decoder': [('conv', {'decoder_variant': 'conv'}), ('mlp', {'decoder_variant': 'mlp'})],
    'prior': [('learned', {'fixed_prior': False}), ('fixed', {'fixed_prior': True})],
}

COLUMNS = ['suite', 'variant', 'seed', 'steps', 'mse', 'mae', 'recon_mae']


class Command(KalikoCommand):
    help = 'Train ablation variants under one seed and budget and compare their prediction metrics'

    def add_arguments(self, parser):
        parser.add_argument('--suite', required=True, choices=sorted(SUITES))
        parser.add_argument('--data', required=True, help='Dataset directory')
        parser.add_argument('--out', required=True, help='Output directory')
        parser.add_argument('--steps', type=int, help='Training steps per variant')
        parser.add_argument('--seed', type=int, help='Seed shared by every variant')
        parser.add_argument('--t-in', type=int, dest='t_in')
        parser.add_argument('--t-out', type=int, dest='t_out')
        self.add_config_argument(parser)

    def execute_command(self, **options):
        out_dir = Path(options['out'])
        suite = options['suite']
        config = self.resolve_config(options, {
            'training': {'steps': options['steps'], 'seed': options['seed']},
            'inference': {'t_in': options['t_in'], 't_out': options['t_out']},
            'out_dir': str(out_dir),
        })
        dataset = DatasetService.load(options['data'])
        train_set, val_set = DatasetService.split(dataset, config.training.val_fraction)
        evaluation_set = val_set if len(val_set) else train_set
        seed = config.training.seed

        rows = []
        for variant, changes in SUITES[suite]:
            self.stdout.write(self.style.WARNING(f'Training variant {variant}...'))
            variant_config = config.model_copy(update={
                'model': config.model.model_copy(update={**changes, 'seed': seed}),
            })

            model = KalikoModel(
                variant_config.model,
                state_dim=dataset.state_dim,
                stats=dataset.stats,
                metadata={
                    'system': dataset.system.name if dataset.system else None,
                    'delta': dataset.system.delta if dataset.system else None,
                    'dt': dataset.dt,
                },
            )
            variant_dir = out_dir / variant.replace('=', '')
            checkpoint_path = variant_dir / settings.KALIKO_CHECKPOINT_NAME
            model, report = TrainingService.train(
                model, dataset, variant_config.training, checkpoint_path=checkpoint_path,
            )
            CheckpointService.save(model, checkpoint_path)
            ExportService.train_report(report, variant_dir / 'train_report.csv')
            variant_config.write(variant_dir)

            inference = variant_config.inference
            summary, _ = InferenceService.evaluate(
                model, evaluation_set.trajectories, inference.t_in, inference.t_out
            )
            rows.append({
                'suite': suite,
                'variant': variant,
                'seed': seed,
                'steps': model.step,
                'mse': summary.get('mse', np.nan),
                'mae': summary.get('mae', np.nan),
                'recon_mae': report.final_metrics.get('recon_mae', np.nan),
            })

        ExportService.write_csv(pd.DataFrame(rows, columns=COLUMNS), out_dir / 'ablation.csv')
        best = min(rows, key=lambda row: np.inf if np.isnan(row['mae']) else row['mae'])
        self.finish(config, out_dir, f"✓ {len(rows)} {suite} variants; lowest MAE: {best['variant']}")
