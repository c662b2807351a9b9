"""Stationary distributions of batch-arrival single-server queues under
Grishechkin processor-sharing policies: transform solvers, Talbot inversion
and a discrete-event simulator."""

__version__ = "0.1.0"

from .model import (BatchArrivalSpec, ModelValidationError, QueueModel, ServiceSpec, traffic_intensity,
                    validate_model)
from .policies import (PolicyKernel, constant_kernel, dps_random_kernel, eps_kernel, fb_kernel, null_kernel,
                       policy_from_name, srpt_kernel, tfs_kernel)
from .simulator import SimConfig, SimEstimate, distribution_distance, limit_convergence_study, simulate_direct, \
    simulate_grishechkin
from .transform import (KernelContext, StationaryTransform, invert_to_density, pmf_from_transform,
                        sojourn_transform, stationary_transform, stationary_transform_picard,
                        stationary_transform_theorem)
