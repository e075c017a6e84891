"""
A radial map that makes one-class scores lie about density
==========================================================

``F(x) = x / (alpha ||x||^2)`` sends the typical shell of a standard normal
close to the origin and the rare, far-out points even closer. Its expected
squared norm has the closed form ``1 / (alpha^2 (d - 2))``, yet ranking by
distance to the center inverts the ordering by density.
"""

import numpy as np

from usflab.numcore import RngStream
from usflab.oneclass import FAlphaMap, density_inversion_check, f_alpha_expected_loss, monte_carlo_estimate

print(f"{'alpha':>6} {'d':>4} {'closed form':>12} {'monte carlo':>12}")
for alpha in (1.0, 2.0):
    for d in (3, 8, 32):
        mc = monte_carlo_estimate(alpha, d, 200_000, RngStream(0))
        print(f"{alpha:6.1f} {d:4d} {f_alpha_expected_loss(alpha, d):12.6f} {mc:12.6f}")

# pick two points: one on the typical shell and one far in the tail
d = 8
fmap = FAlphaMap(1.0, d)
typical = np.full(d, 1.0)
tail = np.full(d, 3.0)
print("\ndistance to center  typical: %.4f  tail: %.4f" % (np.linalg.norm(fmap(typical)), np.linalg.norm(fmap(tail))))
print("so the tail point looks more normal to a distance-based score")

s = RngStream(1)
pairs = list(zip(s.normal((5000, d)), s.normal((5000, d))))
print("closer to center implies lower density on every pair:", density_inversion_check(fmap, pairs))
