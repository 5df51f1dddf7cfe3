import json
import logging
import struct
from pathlib import Path

import numpy as np

from koopman.exceptions import CheckpointError
from koopman.models.kaliko_model import KalikoModel
from koopman.models.systems import NormStats
from koopman.serializers.config_serializer import ModelConfig

logger = logging.getLogger(__name__)

MAGIC = b'KLKO'
VERSION = 1

ADAM_FIRST = 'adam.m.'
ADAM_SECOND = 'adam.v.'


class _Reader:
    def __init__(self, payload):
        self.payload = payload
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.payload):
            raise CheckpointError(
                f"Checkpoint truncated: needed {size} bytes at offset {self.offset}, "
                f"file has {len(self.payload)}"
            )
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def rest(self):
        return self.payload[self.offset:]


class CheckpointService:
    """
    Binary checkpoints: "KLKO", u32 version, u32 tensor count, the tensors,
    then a JSON trailer with the model configuration. All integers and floats
    are little-endian. See docs/formats.md.
    """

    @staticmethod
    def encode(model: KalikoModel, optimizer=None) -> bytes:
        tensors = {name: param.data for name, param in model.named_tensors().items()}
        state = model.optimizer_state
        if optimizer is not None:
            state = {'t': optimizer.t, 'm': optimizer.first_moments, 'v': optimizer.second_moments}
        optimizer_meta = None
        if state is not None:
            for name, moment in state['m'].items():
                tensors[ADAM_FIRST + name] = moment
            for name, moment in state['v'].items():
                tensors[ADAM_SECOND + name] = moment
            optimizer_meta = {'t': state['t']}

        chunks = [MAGIC, struct.pack('<II', VERSION, len(tensors))]
        for name, data in tensors.items():
            encoded_name = name.encode('utf-8')
            data = np.ascontiguousarray(data, dtype='<f8')
            chunks.append(struct.pack('<H', len(encoded_name)))
            chunks.append(encoded_name)
            chunks.append(struct.pack('<B', data.ndim))
            chunks.append(struct.pack(f'<{data.ndim}I', *data.shape))
            chunks.append(data.tobytes())

        config = model.config
        trailer = {
            'n_d': config.delays,
            'ell': config.latent_dim,
            'c': config.chunk,
            'n': model.state_dim,
            'decoder_variant': config.decoder_variant,
            'model': config.model_dump(),
            'stats': model.stats.to_dict(),
            'meta': model.metadata,
            'step': model.step,
            'optimizer': optimizer_meta,
        }
        chunks.append(json.dumps(trailer, sort_keys=True).encode('utf-8'))
        return b''.join(chunks)

    @staticmethod
    def save(model: KalikoModel, path, optimizer=None) -> Path:
        """Write `model` (and optionally the optimizer's moments) to `path`."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(CheckpointService.encode(model, optimizer))
        logger.info(f"Saved checkpoint at step {model.step} to {path}")
        return path

    @staticmethod
    def decode(payload: bytes):
        """
        Parse a checkpoint into (tensors by name, trailer dict).

        Raises:
            CheckpointError: On bad magic, unsupported version or truncation
        """
        reader = _Reader(payload)
        if reader.take(len(MAGIC)) != MAGIC:
            raise CheckpointError("Not a KALIKO checkpoint (bad magic)")
        version, count = reader.unpack('<II')
        if version != VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {version} (expected {VERSION})")

        tensors = {}
        for _ in range(count):
            (name_length,) = reader.unpack('<H')
            name = reader.take(name_length).decode('utf-8')
            (rank,) = reader.unpack('<B')
            shape = reader.unpack(f'<{rank}I') if rank else ()
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(reader.take(8 * size), dtype='<f8').astype(np.float64)
            tensors[name] = data.reshape(shape)

        try:
            trailer = json.loads(reader.rest().decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"Checkpoint trailer is missing or corrupt: {exc}") from exc
        return tensors, trailer

    @staticmethod
    def load(path) -> KalikoModel:
        """
        Rebuild a model from a checkpoint file.

        Adam moments, when present, are attached as `model.optimizer_state`.

        Raises:
            FileNotFoundError: If the file does not exist
            CheckpointError: If the file is malformed or a tensor shape does not match
        """
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"No checkpoint at {path}")
        tensors, trailer = CheckpointService.decode(path.read_bytes())

        try:
            config = ModelConfig.model_validate(trailer['model'])
            model = KalikoModel(
                config,
                state_dim=int(trailer['n']),
                stats=NormStats.from_dict(trailer['stats']),
                metadata=trailer.get('meta') or {},
            )
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"Checkpoint trailer does not describe a model: {exc}") from exc
        model.step = int(trailer.get('step', 0))

        named = model.named_tensors()
        missing = sorted(set(named) - set(tensors))
        if missing:
            raise CheckpointError(f"Checkpoint is missing tensors: {', '.join(missing)}")
        for name, param in named.items():
            if tensors[name].shape != param.shape:
                raise CheckpointError(
                    f"Shape mismatch for '{name}': checkpoint {tensors[name].shape}, model {param.shape}"
                )
            param.assign(tensors[name])

        if trailer.get('optimizer'):
            model.optimizer_state = {
                't': int(trailer['optimizer']['t']),
                'm': {name[len(ADAM_FIRST):]: value for name, value in tensors.items() if name.startswith(ADAM_FIRST)},
                'v': {name[len(ADAM_SECOND):]: value for name, value in tensors.items() if name.startswith(ADAM_SECOND)},
            }
        logger.debug(f"Loaded checkpoint {path} at step {model.step}")
        return model
