"""partmlt: partitioned path-space MCMC rendering with guided image-plane
proposals.

The pipeline: a path-traced pre-pass buckets light paths by interaction
signature, the highest-contribution signatures become independently
normalized partitions, and each partition is integrated by its own Markov
chain whose image-plane proposals are guided by a denoised per-partition
contribution image. A plain MLT baseline, a path-traced reference, and a 1D
demonstrator ship alongside for controlled comparison.
"""

from .core import (ImageBuffer, RandomStream, ld_point, map_to_disk_offset,
                   rmse, scalar_contribution)
from .engine import (RenderConfig, RenderOutput, render, render_pt, run_mlt,
                     run_partitioned)
from .guidance import (build_guidance, build_offsets, candidate_weights,
                       full_offsets, guided_acceptance, sample_candidate,
                       visibility)
from .imageio import read_pfm, write_pfm, write_ppm
from .metrics import structured_noise
from .partition import (Partition, PartitionSet, build_partitions, estimate_b,
                        gamma, select_partitions)
from .path import (GBuffer, Path, PartitionBuffer, path_contribution,
                   prefix_contribution, run_prepass, suffix_contribution,
                   trace_path)
from .scene import (Camera, Material, Scene, builtin_scene, furnace_scene,
                    geometry_term, load_scene)
from .toy1d import Toy1DConfig, run_toy1d

__version__ = "0.1.0"
