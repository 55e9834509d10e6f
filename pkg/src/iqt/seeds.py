"""Deterministic seed derivation.

All randomness in the toolkit flows from one root seed.  Components draw
from named substreams derived here, so each stage (phantom geometry, SNR
sampling, measurement noise, dictionary init) can be re-run on its own and
still reproduce the exact values it saw inside a full pipeline run.
"""

from __future__ import annotations

import numpy as np

# Fixed substream ids; changing these changes every derived seed.
STREAMS = {
    "phantom": 0,
    "snr": 1,
    "noise": 2,
    "training": 3,
}


def substream(root_seed: int, stream: str, index: int = 0) -> int:
    """Derive the child seed for `stream` at position `index`."""
    key = (STREAMS[stream], int(index))
    ss = np.random.SeedSequence(int(root_seed), spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0])
