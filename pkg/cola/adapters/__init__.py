from .Adapter import Adapter, AdapterSpec
from .LinearAdapter import LinearAdapter
from .LowRankAdapter import LowRankAdapter
from .MLPAdapter import MLPAdapter


def init_adapter(spec: AdapterSpec, seed: int, dtype=None) -> Adapter:
    """Create a zero-output adapter of the kind named by `spec`, seeded deterministically."""
    if dtype is None:
        return Adapter.from_spec(spec, seed)
    return Adapter.from_spec(spec, seed, dtype=dtype)
