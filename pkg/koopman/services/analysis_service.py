import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence

import numpy as np
from django.conf import settings
from scipy import linalg

from koopman.autodiff import Tensor
from koopman.exceptions import (
    ConvergenceError,
    DefectiveEigenpair,
    EigenIndexError,
    InsufficientData,
    KalikoError,
    WindingUndefined,
)
from koopman.models.results import CycleTrace, EigenPair, ScalarField
from koopman.models.systems import OdeSystem, SystemName
from koopman.services.inference_service import InferenceService
from koopman.services.simulation_service import DEFAULT_DT, SimulationService

logger = logging.getLogger(__name__)

RESIDUAL_TOLERANCE = 1e-8

# |w^H v| below this marks a pair as defective
DEFECTIVE_TOLERANCE = 1e-10

# Eigenvector bases worse conditioned than this fall back to LAPACK's left vectors
MAX_BASIS_CONDITION = 1e10

HOPF_BOUNDS = ((-1.2, 1.2), (-1.2, 1.2))


class AnalysisService:
    """
    Spectral analysis of a trained model.

    States are mapped to latents implicitly: the true system is simulated
    backward from x for a warmup, the resulting trajectory (ending at x) is
    filtered, and the final filtered mean is the latent of x. An eigenfunction
    is then phi(x) = w^H E(x) for a left eigenvector w.
    """

    # Spectrum

    @staticmethod
    def _residuals_ok(A, value, right, left, scale):
        tolerance = RESIDUAL_TOLERANCE * scale
        right_res = np.linalg.norm(A @ right - value * right) / max(np.linalg.norm(right), 1e-300)
        left_res = np.linalg.norm(left.conj() @ A - value * left.conj()) / max(np.linalg.norm(left), 1e-300)
        return right_res <= tolerance and left_res <= tolerance

    @staticmethod
    def eig(A) -> List[EigenPair]:
        """
        Full spectrum of a real square matrix as residual-checked eigenpairs,
        sorted by descending modulus (positive imaginary part first within a
        conjugate pair).

        Left vectors come from the inverse of the right eigenvector basis when
        it is well conditioned, so repeated but non-defective eigenvalues still
        get biorthogonal pairs; otherwise LAPACK's left vectors are used.

        Raises:
            ConvergenceError: If the eigensolver fails or a pair misses the residual bound
        """
        A = np.asarray(A, dtype=np.float64)
        scale = max(np.linalg.norm(A, 2), np.finfo(float).tiny)
        try:
            values, right = linalg.eig(A)
        except linalg.LinAlgError as exc:
            raise ConvergenceError(f"Eigendecomposition did not converge: {exc}") from exc

        pairs = None
        if np.linalg.cond(right) < MAX_BASIS_CONDITION:
            left = linalg.inv(right).conj().T
            candidate = [EigenPair(values[i], right[:, i], left[:, i]) for i in range(len(values))]
            if all(AnalysisService._residuals_ok(A, p.value, p.right, p.left, scale) for p in candidate):
                pairs = candidate

        if pairs is None:
            values, left, right = linalg.eig(A, left=True, right=True)
            pairs = []
            for i, value in enumerate(values):
                v, w = right[:, i], left[:, i]
                overlap = np.vdot(w, v)
                defective = abs(overlap) < DEFECTIVE_TOLERANCE
                if not defective:
                    w = w / np.conj(overlap)
                pairs.append(EigenPair(value, v, w, defective))

        for index, pair in enumerate(pairs):
            if not AnalysisService._residuals_ok(A, pair.value, pair.right, pair.left, scale):
                raise ConvergenceError(f"Eigenpair {index} (lambda={pair.value:.6g}) exceeds the residual bound")

        return sorted(pairs, key=lambda p: (-round(abs(p.value), 12), -p.value.imag))

    @staticmethod
    def select_pair(pairs: Sequence[EigenPair], index: int) -> EigenPair:
        if not 0 <= index < len(pairs):
            raise EigenIndexError(f"Eigenpair index {index} out of range (spectrum has {len(pairs)} values)")
        return pairs[index]

    @staticmethod
    def mode_projector(pair: EigenPair) -> np.ndarray:
        """Rank-one spectral projector v w^H / (w^H v)."""
        overlap = np.vdot(pair.left, pair.right)
        if pair.defective or abs(overlap) < DEFECTIVE_TOLERANCE:
            raise DefectiveEigenpair(f"Eigenpair lambda={pair.value:.6g} is defective (|w^H v| = {abs(overlap):.3e})")
        return np.outer(pair.right, pair.left.conj()) / overlap

    # Implicit encoding

    @staticmethod
    def default_warmup(model) -> int:
        return 2 * model.chunk_spec.window

    @staticmethod
    def _dt(model, dt):
        return dt if dt is not None else float(model.metadata.get('dt', DEFAULT_DT))

    @staticmethod
    def _check_warmup(model, warmup):
        warmup = warmup if warmup is not None else AnalysisService.default_warmup(model)
        if warmup < model.chunk_spec.window:
            raise InsufficientData(
                f"Warmup of {warmup} raw steps is shorter than one window ({model.chunk_spec.window})"
            )
        return warmup

    @staticmethod
    def implicit_encode(model, x, system: OdeSystem, warmup: Optional[int] = None, dt=None) -> np.ndarray:
        """
        Latent mean for raw state x.

        Raises:
            InsufficientData: If warmup is shorter than one window
            DivergenceError: If the backward simulation diverges
        """
        warmup = AnalysisService._check_warmup(model, warmup)
        history = SimulationService.integrate_backward(system, x, AnalysisService._dt(model, dt), warmup - 1)
        return InferenceService.encode(model, history.states).final.mean.data.copy()

    @staticmethod
    def encode_points(model, system, points, warmup=None, dt=None) -> np.ndarray:
        """Latents for many states (N x m); rows of points that fail to encode are NaN."""
        warmup = AnalysisService._check_warmup(model, warmup)
        points = np.asarray(points, dtype=np.float64)

        def encode(x):
            try:
                return AnalysisService.implicit_encode(model, x, system, warmup, dt)
            except KalikoError as exc:
                logger.debug(f"Could not encode {x.tolist()}: {exc}")
                return np.full(model.latent_size, np.nan)

        with ThreadPoolExecutor(max_workers=settings.KALIKO_THREADS) as pool:
            latents = np.stack(list(pool.map(encode, points))) if len(points) else np.empty((0, model.latent_size))
        missing = int(np.count_nonzero(np.isnan(latents[:, 0]))) if len(points) else 0
        if missing:
            logger.warning(f"{missing} of {len(points)} states could not be encoded and are marked missing")
        return latents

    @staticmethod
    def eigenfunction(pair: EigenPair, latents) -> np.ndarray:
        """phi = w^H z for each latent row."""
        return np.asarray(latents) @ pair.left.conj()

    # Fields and traces

    @staticmethod
    def default_bounds(system: OdeSystem):
        if system.name == SystemName.HOPF_BAUTIN:
            return HOPF_BOUNDS
        return SimulationService.default_init_box(system)

    @staticmethod
    def grid_axes(bounds, size: int) -> List[np.ndarray]:
        return [np.linspace(low, high, size) for low, high in bounds]

    @staticmethod
    def eigenfunction_field(model, pair: EigenPair, axes, system, warmup=None, dt=None) -> ScalarField:
        """Complex phi on the grid spanned by `axes`; missing points are NaN."""
        field = ScalarField(axes=list(axes), values=np.empty(0))
        latents = AnalysisService.encode_points(model, system, field.points(), warmup, dt)
        values = AnalysisService.eigenfunction(pair, latents)
        field.values = values.reshape([len(axis) for axis in axes])
        return field

    @staticmethod
    def winding_number(values) -> int:
        """
        Net turns of a closed complex trace around the origin.

        Raises:
            WindingUndefined: If the trace has missing values or passes (numerically) through zero
        """
        values = np.asarray(values, dtype=np.complex128)
        modulus = np.abs(values)
        if values.size < 2 or np.any(np.isnan(modulus)) or np.min(modulus) <= 1e-12 * max(np.max(modulus), 1e-300):
            raise WindingUndefined("Trace passes through zero or has missing values; winding is undefined")
        angles = np.unwrap(np.angle(np.append(values, values[0])))
        return int(round((angles[-1] - angles[0]) / (2.0 * np.pi)))

    @staticmethod
    def limit_cycle_trace(model, pair: EigenPair, cycle_states, system, warmup=None, dt=None) -> CycleTrace:
        """phi along one period of a cycle and its winding number."""
        latents = AnalysisService.encode_points(model, system, cycle_states, warmup, dt)
        values = AnalysisService.eigenfunction(pair, latents)
        return CycleTrace(values=values, winding=AnalysisService.winding_number(values))

    @staticmethod
    def koopman_mode_project(model, pair: EigenPair, states, system, warmup=None, dt=None) -> np.ndarray:
        """
        Project the latents of `states` onto the eigenspace of `pair` and decode.

        Only Re(P z) is decoded; the imaginary part is dropped on purpose. For a
        complex pair, Re(P z) is half the projection of z onto the real
        invariant plane spanned by the pair and its conjugate.

        Returns:
            N x 2n array of (state, decoded displacement) rows in raw units; the
            displacement is the difference between the last two decoded states
            of the window. Rows that fail to encode are NaN.

        Raises:
            DefectiveEigenpair: If w^H v vanishes
        """
        projector = AnalysisService.mode_projector(pair)
        states = np.asarray(states, dtype=np.float64)
        latents = AnalysisService.encode_points(model, system, states, warmup, dt)
        n = model.state_dim
        rows = np.full((len(states), 2 * n), np.nan)
        rows[:, :n] = states
        for i, latent in enumerate(latents):
            if np.isnan(latent[0]):
                continue
            projected = np.real(projector @ latent)
            window = model.decode_flat(Tensor(projected)).data.reshape(-1, n)
            window = SimulationService.denormalize(window, model.stats)
            previous = window[-2] if len(window) > 1 else states[i]
            rows[i, n:] = window[-1] - previous
        return rows

    @staticmethod
    def reconstruction_heatmap(model, system, axes, horizon: int, dt=None) -> ScalarField:
        """
        Per grid point: simulate `horizon` raw states starting there, filter,
        decode the filtered means and report the mean absolute reconstruction
        error (normalized units). Failed points are NaN.

        Raises:
            InsufficientData: If horizon is shorter than one window
        """
        if horizon < model.chunk_spec.window:
            raise InsufficientData(f"Horizon {horizon} is shorter than one window ({model.chunk_spec.window})")
        dt = AnalysisService._dt(model, dt)
        field = ScalarField(axes=list(axes), values=np.empty(0))

        def error(x):
            try:
                states = SimulationService.integrate_rk4(system, x, dt, horizon - 1).states
                recon = InferenceService.reconstruct(model, states)
                truth = SimulationService.normalize(recon.truth, model.stats)
                return float(np.mean(np.abs(recon.normalized - truth)))
            except KalikoError as exc:
                logger.debug(f"Reconstruction failed at {x.tolist()}: {exc}")
                return np.nan

        with ThreadPoolExecutor(max_workers=settings.KALIKO_THREADS) as pool:
            values = np.array(list(pool.map(error, field.points())))
        field.values = values.reshape([len(axis) for axis in axes])
        if field.missing:
            logger.warning(f"{field.missing} grid points failed to reconstruct and are marked missing")
        return field

    # Diagnostics

    @staticmethod
    def closure_residual(model, system, states, warmup=None, dt=None) -> Dict:
        """
        Closure diagnostic ||E(F(x)) - A E(x)|| for sampled states, where F
        advances the true system by one chunk (c raw steps). Reported, not asserted.
        """
        dt = AnalysisService._dt(model, dt)
        states = np.asarray(states, dtype=np.float64)
        advanced = []
        for x in states:
            try:
                advanced.append(SimulationService.integrate_rk4(system, x, dt, model.config.chunk).states[-1])
            except KalikoError:
                advanced.append(np.full(model.state_dim, np.nan))
        A = model.dynamics.matrix()
        now = AnalysisService.encode_points(model, system, states, warmup, dt)
        later = AnalysisService.encode_points(model, system, np.array(advanced), warmup, dt)

        residuals = np.linalg.norm(later - now @ A.T, axis=1)
        latent_norms = np.linalg.norm(now, axis=1)
        valid = ~np.isnan(residuals)
        summary = {
            'points': int(len(states)),
            'valid': int(np.count_nonzero(valid)),
            'residuals': residuals,
            'latent_norms': latent_norms,
        }
        if np.any(valid):
            summary['median_residual'] = float(np.median(residuals[valid]))
            summary['median_latent_norm'] = float(np.median(latent_norms[valid]))
        return summary

    @staticmethod
    def orbit_invariance(model, pair: EigenPair, orbits, system, warmup=None, dt=None) -> Dict:
        """
        |phi| statistics along each orbit: per-orbit mean and standard
        deviation, and the spread of the orbit means across orbits.
        """
        per_orbit = []
        for orbit in orbits:
            states = getattr(orbit, 'states', orbit)
            latents = AnalysisService.encode_points(model, system, states, warmup, dt)
            modulus = np.abs(AnalysisService.eigenfunction(pair, latents))
            modulus = modulus[~np.isnan(modulus)]
            per_orbit.append({
                'points': int(len(states)),
                'mean_abs': float(np.mean(modulus)) if modulus.size else float('nan'),
                'std_abs': float(np.std(modulus)) if modulus.size else float('nan'),
            })
        means = np.array([orbit['mean_abs'] for orbit in per_orbit])
        return {'orbits': per_orbit, 'between_orbit_std': float(np.nanstd(means)) if len(means) else float('nan')}
