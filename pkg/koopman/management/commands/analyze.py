from pathlib import Path

import numpy as np
import pandas as pd

from koopman.management.base import KalikoCommand
from koopman.models.results import ScalarField
from koopman.models.systems import OdeSystem, SystemName
from koopman.services import AnalysisService, CheckpointService, ExportService, SimulationService
from koopman.services.simulation_service import DEFAULT_DT

MODES = ('spectrum', 'eigenfield', 'cycle', 'mode', 'heatmap', 'closure', 'orbits')

# Starting points that settle onto the attracting limit cycle, with the transient to skip
CYCLE_STARTS = {
    SystemName.VDP: ((2.0, 0.0), 1000),
    SystemName.HOPF_BAUTIN: ((0.8, 0.0), 2000),
}

# Three closed orbits of the undamped Duffing oscillator: two inside the right well, one around both
DUFFING_ORBIT_STARTS = ((0.5, 0.0), (0.75, 0.0), (1.6, 0.0))


class Command(KalikoCommand):
    help = 'Spectral analysis of a trained model: spectrum, eigenfunction fields, cycles, modes, heatmaps'

    def add_arguments(self, parser):
        parser.add_argument('--ckpt', required=True, help='Checkpoint written by train')
        parser.add_argument('--mode', required=True, choices=MODES)
        parser.add_argument('--out', required=True, help='Output directory')
        parser.add_argument('--eig-index', type=int, dest='eig_index', help='Eigenpair index (descending |lambda|)')
        parser.add_argument('--grid', type=int, help='Grid points per axis (default 100)')
        parser.add_argument('--bounds', type=float, nargs=4, metavar=('X1_MIN', 'X1_MAX', 'X2_MIN', 'X2_MAX'))
        parser.add_argument('--warmup', type=int, help='Raw steps simulated before each encoded state')
        parser.add_argument('--svg', action='store_true', default=None, help='Also write an SVG heatmap')
        parser.add_argument('--color-range', type=float, nargs=2, dest='color_range', metavar=('MIN', 'MAX'))
        parser.add_argument('--system', help='System to simulate (default: the one the model was trained on)')
        parser.add_argument('--delta', type=float)
        parser.add_argument('--dt', type=float, help='Raw time step (default: the training dt)')
        parser.add_argument('--horizon', type=int, help='Raw steps per heatmap trajectory (default: two windows)')
        parser.add_argument('--x0', type=float, nargs=2, action='append',
                            help='Start state for cycle/orbits modes (repeatable for orbits)')
        self.add_config_argument(parser)

    def execute_command(self, **options):
        out_dir = Path(options['out'])
        model = CheckpointService.load(options['ckpt'])
        bounds = options['bounds']
        config = self.resolve_config(options, {
            'system': {
                'name': options['system'] or model.metadata.get('system'),
                'delta': options['delta'] if options['delta'] is not None else model.metadata.get('delta'),
            },
            'analysis': {
                'grid': options['grid'],
                'bounds': [bounds[:2], bounds[2:]] if bounds else None,
                'warmup': options['warmup'],
                'eig_index': options['eig_index'],
                'svg': options['svg'],
                'color_range': options['color_range'],
            },
            'out_dir': str(out_dir),
        })
        config = config.model_copy(update={'model': model.config})

        self.model = model
        self.system = OdeSystem(name=config.system.name, delta=config.system.delta)
        self.analysis = config.analysis
        self.dt = options['dt'] or float(model.metadata.get('dt') or DEFAULT_DT)
        self.out_dir = out_dir
        self.options = options
        self.pairs = AnalysisService.eig(model.dynamics.matrix())
        self.axes = AnalysisService.grid_axes(
            self.analysis.bounds or AnalysisService.default_bounds(self.system), self.analysis.grid
        )

        message = getattr(self, f"run_{options['mode']}")()
        self.finish(config, out_dir, message)

    def selected_pair(self):
        return AnalysisService.select_pair(self.pairs, self.analysis.eig_index)

    def grid_states(self):
        return ScalarField(axes=self.axes, values=np.empty(0)).points()

    def write_field(self, field, name, title, overlay=None):
        ExportService.field(field, self.out_dir / f'{name}.csv')
        if self.analysis.svg:
            ExportService.heatmap_svg(
                field, self.out_dir / f'{name}.svg', title=title, color_range=self.analysis.color_range,
                overlay=overlay,
            )

    def run_spectrum(self):
        ExportService.spectrum(self.pairs, self.out_dir / 'spectrum.csv')
        return f'✓ Spectrum of {len(self.pairs)} eigenvalues, top |lambda| = {abs(self.pairs[0].value):.6f}'

    def run_eigenfield(self):
        pair = self.selected_pair()
        field = AnalysisService.eigenfunction_field(
            self.model, pair, self.axes, self.system, self.analysis.warmup, self.dt
        )
        overlay = None
        if self.analysis.svg and (self.options['x0'] or self.system.name in CYCLE_STARTS):
            overlay = self.cycle_states()
        self.write_field(field, 'eigenfield', f'|phi|, lambda = {pair.value:.4f}', overlay=overlay)
        return f'✓ Eigenfunction field for lambda = {pair.value:.6g} ({field.missing} missing points)'

    def cycle_states(self):
        if self.options['x0']:
            x0, transient = self.options['x0'][0], 0
        elif self.system.name in CYCLE_STARTS:
            x0, transient = CYCLE_STARTS[self.system.name]
        else:
            raise ValueError(f"{self.system.name} has no default limit cycle; pass --x0")
        return SimulationService.periodic_orbit(self.system, x0, self.dt, transient=transient).states

    def run_cycle(self):
        pair = self.selected_pair()
        cycle = self.cycle_states()
        trace = AnalysisService.limit_cycle_trace(
            self.model, pair, cycle, self.system, self.analysis.warmup, self.dt
        )
        ExportService.cycle_trace(trace.values, self.out_dir / 'cycle.csv')
        ExportService.write_json({
            'eig_index': self.analysis.eig_index,
            'eigenvalue': {'re': pair.value.real, 'im': pair.value.imag, 'abs': abs(pair.value)},
            'winding': trace.winding,
            'modulus_cv': trace.modulus_cv,
            'points': len(cycle),
        }, self.out_dir / 'cycle.json')
        return f'✓ Winding number {trace.winding} along a cycle of {len(cycle)} states'

    def run_mode(self):
        pair = self.selected_pair()
        states = self.grid_states()
        rows = AnalysisService.koopman_mode_project(
            self.model, pair, states, self.system, self.analysis.warmup, self.dt
        )
        ExportService.mode_samples(rows, self.model.state_dim, self.out_dir / 'mode.csv')
        return f'✓ Projected {len(rows)} states onto the eigenspace of lambda = {pair.value:.6g}'

    def run_heatmap(self):
        horizon = self.options['horizon'] or 2 * self.model.chunk_spec.window
        field = AnalysisService.reconstruction_heatmap(self.model, self.system, self.axes, horizon, self.dt)
        self.write_field(field, 'heatmap', 'reconstruction MAE')
        return f'✓ Reconstruction heatmap, median MAE {np.nanmedian(np.real(field.values)):.3g}'

    def run_closure(self):
        states = self.grid_states()
        summary = AnalysisService.closure_residual(
            self.model, self.system, states, self.analysis.warmup, self.dt
        )
        ExportService.write_csv(pd.DataFrame({
            'x1': states[:, 0],
            'x2': states[:, 1],
            'residual': summary['residuals'],
            'latent_norm': summary['latent_norms'],
        }), self.out_dir / 'closure.csv')
        report = {key: value for key, value in summary.items() if key not in ('residuals', 'latent_norms')}
        ExportService.write_json(report, self.out_dir / 'closure.json')
        return f"✓ Closure residual on {summary['valid']} of {summary['points']} states"

    def run_orbits(self):
        pair = self.selected_pair()
        starts = self.options['x0'] or DUFFING_ORBIT_STARTS
        orbits = [SimulationService.periodic_orbit(self.system, x0, self.dt) for x0 in starts]
        report = AnalysisService.orbit_invariance(
            self.model, pair, orbits, self.system, self.analysis.warmup, self.dt
        )
        report['eig_index'] = self.analysis.eig_index
        report['starts'] = [list(x0) for x0 in starts]
        ExportService.write_json(report, self.out_dir / 'orbits.json')
        return f'✓ |phi| statistics along {len(orbits)} orbits'
