"""Graph-conditioned latent diffusion on multimodal attributed graphs."""

from .mmag import MultimodalGraph, NodeRecord, SyntheticConfig, load_graph, synthesize_graph
from .sampling import PPRConfig, SamplerConfig, compute_ppr, sample_neighbors

__all__ = [
    "MultimodalGraph",
    "NodeRecord",
    "PPRConfig",
    "SamplerConfig",
    "SyntheticConfig",
    "compute_ppr",
    "load_graph",
    "sample_neighbors",
    "synthesize_graph",
]
__version__ = "0.1.0"
