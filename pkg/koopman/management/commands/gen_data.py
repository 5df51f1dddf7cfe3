from pathlib import Path

from koopman.management.base import KalikoCommand
from koopman.models.systems import OdeSystem
from koopman.services import DatasetService, SimulationService


class Command(KalikoCommand):
    help = 'Generate a trajectory dataset (CSV per trajectory + manifest) from one of the toy systems'

    def add_arguments(self, parser):
        parser.add_argument('--system', help='vdp, pendulum, duffing or hopf_bautin')
        parser.add_argument('--delta', type=float, help='Duffing damping')
        parser.add_argument('--out', required=True, help='Output directory')
        parser.add_argument('--n-traj', type=int, dest='n_traj')
        parser.add_argument('--steps', type=int, help='RK4 steps per trajectory (steps + 1 states are written)')
        parser.add_argument('--dt', type=float)
        parser.add_argument('--seed', type=int)
        self.add_config_argument(parser)

    def execute_command(self, **options):
        out_dir = Path(options['out'])
        config = self.resolve_config(options, {
            'system': {'name': options['system'], 'delta': options['delta']},
            'dataset': {
                'n_traj': options['n_traj'],
                'steps': options['steps'],
                'dt': options['dt'],
                'seed': options['seed'],
            },
            'out_dir': str(out_dir),
        })

        system = OdeSystem(name=config.system.name, delta=config.system.delta)
        self.stdout.write(self.style.WARNING(
            f'Sampling {config.dataset.n_traj} {system.name} trajectories...'
        ))
        dataset = SimulationService.sample_dataset(
            system,
            n_traj=config.dataset.n_traj,
            steps=config.dataset.steps,
            dt=config.dataset.dt,
            seed=config.dataset.seed,
            init_box=config.dataset.init_box,
        )
        DatasetService.save(dataset, out_dir)
        self.finish(config, out_dir, f'✓ Wrote {len(dataset)} trajectories to {out_dir}')
