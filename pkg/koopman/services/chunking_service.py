import numpy as np

from koopman.exceptions import InsufficientData
from koopman.models.kaliko_model import ChunkSpec


class ChunkingService:
    """
    Conversion between raw trajectories and overlapping measurement windows.

    Measurement t is the flattened block of n_d * c raw states starting at raw
    index t * c, so consecutive measurements share (n_d - 1) * c states.
    """

    @staticmethod
    def num_measurements(length: int, spec: ChunkSpec) -> int:
        return length // spec.chunk - spec.delays + 1

    @staticmethod
    def chunk(states, spec: ChunkSpec) -> np.ndarray:
        """
        Args:
            states: Raw states, L x n (a Trajectory's states or any array)
            spec: Chunk size and delay count

        Returns:
            T x (n_d * c * n) array of flattened windows, T = floor(L / c) - n_d + 1

        Raises:
            InsufficientData: If the trajectory is shorter than one window
        """
        states = np.asarray(getattr(states, 'states', states), dtype=np.float64)
        length = states.shape[0]
        if length < spec.window:
            raise InsufficientData(
                f"Trajectory of {length} states is shorter than one window "
                f"({spec.delays} delays x chunk {spec.chunk} = {spec.window})"
            )
        count = ChunkingService.num_measurements(length, spec)
        windows = [
            states[t * spec.chunk: t * spec.chunk + spec.window].reshape(-1)
            for t in range(count)
        ]
        return np.stack(windows)

    @staticmethod
    def unchunk(windows, spec: ChunkSpec, state_dim: int) -> np.ndarray:
        """
        Reassemble raw states from consecutive windows, averaging overlaps.

        Returns:
            ((T - 1) * c + n_d * c) x n array
        """
        windows = np.asarray(windows, dtype=np.float64)
        if windows.size == 0:
            return np.empty((0, state_dim))
        windows = windows.reshape(len(windows), spec.window, state_dim)
        length = (len(windows) - 1) * spec.chunk + spec.window
        total = np.zeros((length, state_dim))
        counts = np.zeros((length, 1))
        for t, window in enumerate(windows):
            start = t * spec.chunk
            total[start:start + spec.window] += window
            counts[start:start + spec.window] += 1.0
        return total / counts

    @staticmethod
    def trim_head(states, spec: ChunkSpec) -> np.ndarray:
        """Drop leading states so the length is a multiple of c and the last window ends at the last state."""
        states = np.asarray(states, dtype=np.float64)
        usable = (states.shape[0] // spec.chunk) * spec.chunk
        return states[states.shape[0] - usable:]
