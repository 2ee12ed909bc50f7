"""Step through the two-agent tie, where greedy wastes half the value.

Agent A (budget 1) wants both items; agent B (budget 1) only the first.
Coordinates 0 and 1 are item 0 to A and to B, coordinate 2 is item 1 to A.
Plain greedy gives item 0 to A, so item 1 finds A full.  The balanced policy
splits item 0 so that A keeps room for item 1.
"""

import numpy as np

from ocdra.engine import run_online, verify_certificate
from ocdra.instances import generate
from ocdra.offline import grid_brute_force

inst = generate("two_agent_tie")
opt = grid_brute_force(inst, 0.05)
print("OPT =", opt)
for policy in ("plain_greedy", "balanced"):
    state, cert, rep = run_online(inst, policy, delta=1e-3)
    v = verify_certificate(cert, gamma=0.0)
    print(f"\n{policy}")
    print("  x     =", np.round(state.x, 3))
    print("  alpha =", np.round(cert.alpha, 3), " beta =", np.round(cert.beta, 3))
    print(f"  primal {rep.primal:.3f}  dual {rep.dual:.3f}  primal/OPT {rep.primal / opt:.3f}"
          f"  feasibility slack {v.feasible_slack:.1e}")
