"""Uniformly scaling normalizing flows, Deep SVDD and a flow-prior VAE in numpy."""

from .distributions import (
    BiLogNormalSpec,
    GaussianMixtureSpec,
    GaussianSpec,
    bilognormal_logpdf,
    gaussian_logpdf,
    gm_logpdf,
    gm_sample,
)
from .flows import (
    FlowModel,
    LULayer,
    build_flow,
    det_prior_penalty,
    flow_forward,
    flow_inverse,
    flow_nll,
    sample_lu_prior,
    svdd_equivalence_gap,
)
from .numcore import Parameter, RngStream, Tensor, backward, finite_diff_grad
from .oneclass import FAlphaMap, SvddModel, init_center, svdd_loss, svdd_score

__version__ = "0.1.0"
