import json
import logging
from pathlib import Path
from typing import Dict, Iterable, Sequence

import numpy as np
import pandas as pd
from matplotlib.figure import Figure

from koopman.models.results import EigenPair, Forecast, ScalarField, TrainReport

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


class ExportService:
    """CSV, JSON and SVG writers for command outputs. Layouts are documented in docs/formats.md."""

    @staticmethod
    def write_csv(frame: pd.DataFrame, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        return path

    @staticmethod
    def write_json(payload: Dict, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default), encoding='utf-8')
        return path

    @staticmethod
    def train_report(report: TrainReport, path) -> Path:
        return ExportService.write_csv(report.to_frame(), path)

    @staticmethod
    def forecast_frame(forecast: Forecast, t_in: int) -> pd.DataFrame:
        """Long format: one row per (raw step, state dimension)."""
        steps, dims = forecast.truth.shape if forecast.truth.size else (0, forecast.pred.shape[1])
        t = np.repeat(np.arange(t_in, t_in + steps), dims)
        dim = np.tile(np.arange(1, dims + 1), steps)
        return pd.DataFrame({
            't': t,
            'dim': dim,
            'truth': forecast.truth.reshape(-1),
            'pred': forecast.pred.reshape(-1),
        })

    @staticmethod
    def predictions(forecasts: Sequence[Forecast], summary: Dict, directory, t_in: int):
        """Per-trajectory `pred_XXX.csv` files plus `summary.json`."""
        directory = Path(directory)
        for forecast in forecasts:
            ExportService.write_csv(
                ExportService.forecast_frame(forecast, t_in), directory / f'pred_{forecast.index:03d}.csv'
            )
        ExportService.write_json(summary, directory / 'summary.json')
        logger.info(f"Wrote {len(forecasts)} prediction files to {directory}")

    @staticmethod
    def spectrum(pairs: Iterable[EigenPair], path) -> Path:
        rows = [
            {'idx': i, 're': pair.value.real, 'im': pair.value.imag, 'abs': abs(pair.value)}
            for i, pair in enumerate(pairs)
        ]
        return ExportService.write_csv(pd.DataFrame(rows, columns=['idx', 're', 'im', 'abs']), path)

    @staticmethod
    def field_frame(field: ScalarField) -> pd.DataFrame:
        points = field.points()
        values = np.asarray(field.values, dtype=np.complex128).reshape(-1)
        return pd.DataFrame({
            'x1': points[:, 0],
            'x2': points[:, 1],
            're': values.real,
            'im': values.imag,
            'abs': np.abs(values),
            'arg': np.angle(values),
        })

    @staticmethod
    def field(field: ScalarField, path) -> Path:
        return ExportService.write_csv(ExportService.field_frame(field), path)

    @staticmethod
    def heatmap_svg(field: ScalarField, path, title='', color_range=None, overlay=None) -> Path:
        """
        Standalone SVG heatmap of |values| with a linear color map.

        `overlay` is an optional sequence of states drawn as a closed line (the
        limit cycle); in the SVG it is the group with id `overlay`.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        modulus = np.abs(np.asarray(field.values, dtype=np.complex128)).T
        x_axis, y_axis = field.axes[0], field.axes[1]
        vmin, vmax = color_range if color_range is not None else (None, None)

        figure = Figure(figsize=(5, 4))
        axes = figure.subplots()
        image = axes.imshow(
            np.ma.masked_invalid(modulus),
            origin='lower',
            extent=(x_axis[0], x_axis[-1], y_axis[0], y_axis[-1]),
            aspect='auto',
            cmap='viridis',
            vmin=vmin,
            vmax=vmax,
        )
        if overlay is not None:
            overlay = np.asarray(overlay)
            closed = np.vstack([overlay, overlay[:1]])
            axes.plot(closed[:, 0], closed[:, 1], color='tab:green', linewidth=1.5, gid='overlay')
            axes.set_xlim(x_axis[0], x_axis[-1])
            axes.set_ylim(y_axis[0], y_axis[-1])
        axes.set_xlabel('x1')
        axes.set_ylabel('x2')
        if title:
            axes.set_title(title)
        figure.colorbar(image, ax=axes)
        figure.savefig(path, format='svg')
        return path

    @staticmethod
    def cycle_trace(values, path) -> Path:
        values = np.asarray(values, dtype=np.complex128)
        return ExportService.write_csv(pd.DataFrame({
            'k': np.arange(len(values)),
            're': values.real,
            'im': values.imag,
            'abs': np.abs(values),
            'arg': np.angle(values),
        }), path)

    @staticmethod
    def mode_samples(rows, state_dim: int, path) -> Path:
        columns = [f'x{i + 1}' for i in range(state_dim)] + [f'u{i + 1}' for i in range(state_dim)]
        return ExportService.write_csv(pd.DataFrame(np.asarray(rows), columns=columns), path)
