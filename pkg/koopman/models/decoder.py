import numpy as np

from koopman.autodiff import Parameter, Tensor, ops


class DecoderVariant:
    CONV = 'conv'
    MLP = 'mlp'
    LINEAR = 'linear'

    choices = (CONV, MLP, LINEAR)


# Residual blocks in the conv / mlp variants
NUM_BLOCKS = 2


class DecoderNet:
    """
    Maps a latent z (n_d slots of size ell) to a window of n_d * c raw states.

    conv:   two residual blocks of [depthwise mixing across the slot axis ->
            per-slot GELU MLP], then a per-slot linear read-out to c states.
    mlp:    the same blocks without the depthwise mixing, so each slot only
            decodes its own chunk.
    linear: the read-out alone (affine, used for linear-Gaussian oracles).

    The read-out is shared across slots; slot i produces raw rows
    i*c .. i*c + c - 1 of the window.
    """

    def __init__(self, delays, latent_dim, chunk, state_dim, hidden=64,
                 variant=DecoderVariant.CONV, rng=None):
        if variant not in DecoderVariant.choices:
            raise ValueError(
                f"Unknown decoder variant '{variant}'. Supported: {', '.join(DecoderVariant.choices)}"
            )
        self.delays = delays
        self.latent_dim = latent_dim
        self.chunk = chunk
        self.state_dim = state_dim
        self.hidden = hidden
        self.variant = variant
        rng = rng if rng is not None else np.random.default_rng(0)

        self.blocks = []
        if variant != DecoderVariant.LINEAR:
            for b in range(NUM_BLOCKS):
                block = {}
                if variant == DecoderVariant.CONV:
                    block['mix'] = Parameter(
                        f'decoder.block{b}.mix',
                        rng.normal(0.0, 1.0 / np.sqrt(delays), (latent_dim, delays, delays)),
                    )
                block['fc1_w'] = Parameter(
                    f'decoder.block{b}.fc1.weight',
                    rng.normal(0.0, 1.0 / np.sqrt(latent_dim), (latent_dim, hidden)),
                )
                block['fc1_b'] = Parameter(f'decoder.block{b}.fc1.bias', np.zeros(hidden))
                block['fc2_w'] = Parameter(
                    f'decoder.block{b}.fc2.weight',
                    rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, latent_dim)),
                )
                block['fc2_b'] = Parameter(f'decoder.block{b}.fc2.bias', np.zeros(latent_dim))
                self.blocks.append(block)

        out_features = chunk * state_dim
        self.out_w = Parameter(
            'decoder.readout.weight',
            rng.normal(0.0, 1.0 / np.sqrt(latent_dim), (latent_dim, out_features)),
        )
        self.out_b = Parameter('decoder.readout.bias', np.zeros(out_features))

    @property
    def latent_size(self):
        return self.delays * self.latent_dim

    @property
    def output_size(self):
        return self.delays * self.chunk * self.state_dim

    @property
    def window_shape(self):
        return (self.delays * self.chunk, self.state_dim)

    def parameters(self):
        params = []
        for block in self.blocks:
            params.extend(block.values())
        params.extend([self.out_w, self.out_b])
        return params

    def _forward(self, z, with_jacobian):
        m = self.latent_size
        h = ops.reshape(ops.as_tensor(z), (self.delays, self.latent_dim))
        # Tangents carry d(h)/d(z_j) for every latent coordinate j at once.
        dh = Tensor(np.eye(m).reshape(m, self.delays, self.latent_dim)) if with_jacobian else None

        for block in self.blocks:
            if 'mix' in block:
                u = ops.depthwise(h, block['mix'])
                du = ops.depthwise(dh, block['mix']) if with_jacobian else None
            else:
                u, du = h, dh
            pre = ops.add(ops.matmul(u, block['fc1_w']), block['fc1_b'])
            act = ops.gelu(pre)
            out = ops.add(ops.matmul(act, block['fc2_w']), block['fc2_b'])
            h = ops.add(h, out)
            if with_jacobian:
                dact = ops.mul(ops.gelu_grad(pre), ops.matmul(du, block['fc1_w']))
                dh = ops.add(dh, ops.matmul(dact, block['fc2_w']))

        y = ops.add(ops.matmul(h, self.out_w), self.out_b)
        y = ops.reshape(y, (self.output_size,))
        if not with_jacobian:
            return y, None
        dy = ops.reshape(ops.matmul(dh, self.out_w), (m, self.output_size))
        return y, ops.transpose(dy)

    def decode_flat(self, z):
        """Flattened window (p,) as a tensor."""
        y, _ = self._forward(z, with_jacobian=False)
        return y

    def decode_with_jacobian(self, z):
        """Flattened window (p,) and its Jacobian (p x m), both on the tape."""
        return self._forward(z, with_jacobian=True)

    def decode(self, z):
        """Window of raw states, (n_d * c) x n array."""
        return self.decode_flat(z).data.reshape(self.window_shape)
