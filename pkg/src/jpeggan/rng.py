"""Named, independently seeded random streams.

Every consumer of randomness (weight init, latent noise, penalty
interpolation, batch sampling, ...) pulls from its own stream so that adding
a draw in one place never perturbs the sequence seen by another.  Streams are
derived from a single base seed plus the stream name, so a run is fully
reproducible from one integer.
"""

from __future__ import annotations

import numpy as np

__all__ = ["RngStreams"]


class RngStreams:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        """Return the generator for `name`, creating it on first use."""
        g = self._streams.get(name)
        if g is None:
            # Stable derivation: base seed + the stream name's bytes.
            ss = np.random.SeedSequence([self.seed, *name.encode("utf-8")])
            g = np.random.default_rng(ss)
            self._streams[name] = g
        return g

    def spawn(self, name: str, key: int) -> np.random.Generator:
        """A one-shot generator for (name, key); independent of stream state.

        Used where determinism must not depend on call order, e.g. synthetic
        dataset images addressed by index.
        """
        ss = np.random.SeedSequence([self.seed, key, *name.encode("utf-8")])
        return np.random.default_rng(ss)
