"""Federated unrolled MR reconstruction simulator.

Subpackages by concern: ``autodiff`` (reverse-mode engine), ``mri``
(forward model, masks, phantoms), ``network`` (unrolled reconstruction
model), ``federation`` (communication loop and strategies), ``metrics``
(PSNR/SSIM and generalization report), ``experiment`` (harness) and
``cli`` (command-line front end).
"""

__version__ = "0.1.0"

from .autodiff import Parameter, PartitionTag, Tensor, no_grad
from .federation import FedRunConfig, run_federation
from .mri import PhantomSpec, Sample, SamplingMask, make_mask, make_phantoms
from .network import UnrolledModel, partition_params

__all__ = [
    "__version__",
    "Parameter",
    "PartitionTag",
    "Tensor",
    "no_grad",
    "FedRunConfig",
    "run_federation",
    "PhantomSpec",
    "Sample",
    "SamplingMask",
    "make_mask",
    "make_phantoms",
    "UnrolledModel",
    "partition_params",
]
