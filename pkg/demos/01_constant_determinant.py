"""
Uniformly scaling flows have one Jacobian determinant
=====================================================

Additive couplings are volume preserving. Sandwiching each one between an
LU layer and its inverse keeps that property, so the only volume change
comes from the final LU layer and it is the same for every input.
"""

import numpy as np

from usflab.flows import build_flow, perturb_parameters
from usflab.numcore import RngStream, no_grad

stream = RngStream(0)
x = 2.0 * stream.normal((1000, 8))

# two flows with the same depth, randomised away from the identity
for kind in ("usf", "affine"):
    model = build_flow(8, 4, kind, stream=stream)
    perturb_parameters(model, stream, 0.3)
    with no_grad():
        z, logdet = model.forward(x)
    print(f"{kind:>6}: log|det J| ranges over [{logdet.data.min():+.6f}, {logdet.data.max():+.6f}]")

# with a constant log-det and an isotropic base, the density is a decreasing
# function of the latent norm alone
model = build_flow(8, 4, "usf", stream=stream)
perturb_parameters(model, stream, 0.3)
with no_grad():
    nll = -model.log_prob(x).data
norms = model.latent_norm(x)
same = np.array_equal(np.argsort(nll, kind="stable"), np.argsort(norms, kind="stable"))
print("NLL ordering equals latent-norm ordering:", same)
