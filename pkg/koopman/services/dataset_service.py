import json
import logging
from pathlib import Path
from typing import Tuple

import numpy as np
import pandas as pd

from koopman.exceptions import InsufficientData
from koopman.models.systems import Dataset, NormStats, OdeSystem, Trajectory

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'

# Round-trips float64 exactly
FLOAT_FORMAT = '%.17g'


class DatasetService:
    """
    Dataset persistence: one CSV per trajectory plus a JSON manifest.

    See docs/formats.md for the file layout.
    """

    @staticmethod
    def trajectory_frame(trajectory: Trajectory) -> pd.DataFrame:
        columns = {'t': trajectory.times}
        for axis in range(trajectory.state_dim):
            columns[f'x{axis + 1}'] = trajectory.states[:, axis]
        return pd.DataFrame(columns)

    @staticmethod
    def save(dataset: Dataset, directory) -> Path:
        """
        Write `dataset` into `directory` (created if missing).

        Returns:
            Path of the manifest
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)

        files = []
        for index, trajectory in enumerate(dataset.trajectories):
            name = f'traj_{index:03d}.csv'
            DatasetService.trajectory_frame(trajectory).to_csv(
                directory / name, index=False, float_format=FLOAT_FORMAT
            )
            files.append(name)

        system = dataset.system
        manifest = {
            'system': system.name if system else None,
            'delta': system.delta if system else None,
            'dt': dataset.dt,
            'seed': dataset.seed,
            'n_traj': len(dataset),
            'steps': dataset.metadata.get('steps'),
            'init_box': dataset.metadata.get('init_box'),
            'state_dim': dataset.state_dim,
            'norm_mean': dataset.stats.mean.tolist(),
            'norm_std': dataset.stats.std.tolist(),
            'files': files,
        }
        manifest_path = directory / MANIFEST_NAME
        manifest_path.write_text(json.dumps(manifest, indent=2), encoding='utf-8')
        logger.info(f"Wrote {len(files)} trajectories and manifest to {directory}")
        return manifest_path

    @staticmethod
    def load(directory) -> Dataset:
        """
        Read a dataset written by `save`.

        Raises:
            FileNotFoundError: If the directory or its manifest is missing
            ValueError: If a trajectory file does not match the manifest
        """
        directory = Path(directory)
        manifest_path = directory / MANIFEST_NAME
        if not manifest_path.is_file():
            raise FileNotFoundError(f"No dataset manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text(encoding='utf-8'))

        dt = float(manifest['dt'])
        state_dim = int(manifest['state_dim'])
        expected = ['t'] + [f'x{axis + 1}' for axis in range(state_dim)]
        trajectories = []
        for name in manifest['files']:
            frame = pd.read_csv(directory / name, dtype=np.float64)
            if list(frame.columns) != expected:
                raise ValueError(f"{name}: expected columns {expected}, got {list(frame.columns)}")
            trajectories.append(Trajectory(
                states=frame[expected[1:]].to_numpy(),
                dt=dt,
                t0=float(frame['t'].iloc[0]),
            ))

        system = None
        if manifest.get('system'):
            system = OdeSystem(name=manifest['system'], delta=float(manifest.get('delta') or 0.0))
        return Dataset(
            trajectories=tuple(trajectories),
            stats=NormStats(mean=manifest['norm_mean'], std=manifest['norm_std']),
            system=system,
            seed=manifest.get('seed'),
            metadata={'steps': manifest.get('steps'), 'init_box': manifest.get('init_box')},
        )

    @staticmethod
    def split(dataset: Dataset, val_fraction: float) -> Tuple[Dataset, Dataset]:
        """
        Hold out the last ceil(val_fraction * N) trajectories for validation.

        With a single trajectory (or val_fraction = 0) the validation split is
        empty. Both halves keep the full dataset's normalization statistics.
        """
        if len(dataset) == 0:
            raise InsufficientData("Cannot split an empty dataset")
        held_out = int(np.ceil(val_fraction * len(dataset)))
        held_out = min(held_out, len(dataset) - 1)
        cut = len(dataset) - held_out

        def part(trajectories):
            return Dataset(
                trajectories=trajectories,
                stats=dataset.stats,
                system=dataset.system,
                seed=dataset.seed,
                metadata=dict(dataset.metadata),
            )

        return part(dataset.trajectories[:cut]), part(dataset.trajectories[cut:])
