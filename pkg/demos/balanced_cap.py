"""Where the balanced inequality is tight: f(x) = min(x, 1) in one dimension.

U(x) + fhat(grad U(x)) equals f(x) / (1 - 1/e) at every x, so the slack
printed below is zero up to quadrature error.  Past the budget U is flat at
1/(e - 1) and fhat(0) = max f = 1, which still sums to e/(e - 1).
"""

import numpy as np

from ocdra.transform import GAMMA, UTransform, balanced_check, fhat_upper_at_ugrad, u_eval, u_grad
from ocdra.valuation import BudgetAdditive

T = UTransform(BudgetAdditive({0: 1.0}, 1.0))
print(f"{'x':>5} {'U(x)':>9} {'dU/dx':>9} {'fhat':>9} {'f/gamma':>9} {'slack':>10}")
for x in np.linspace(0, 2, 11):
    f = min(x, 1.0)
    print(f"{x:5.2f} {u_eval(T, [x]):9.5f} {u_grad(T, [x])[0]:9.5f} {fhat_upper_at_ugrad(T, [x]):9.5f} "
          f"{f / GAMMA:9.5f} {balanced_check(T, [x]):10.2e}")
