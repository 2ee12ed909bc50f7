"""Balanced versus plain greedy on the triangular Adwords instance.

Item j is wanted by agents j..n, every bid and budget is 1, and OPT = n.  The
balanced policy routes each item by the gradient of the U-transform, which
keeps budgets level and lands near 1 - 1/e of OPT.  Plain greedy breaks ties
toward the lowest option id, which here is agent j itself, so it happens to
find the diagonal optimum; its own dual certifies only 1/2, which is all the
guarantee it carries.  The certified ratio is primal / dual from the run's
own dual.

    python demos/adwords_hard_instance.py
"""

from ocdra.engine import run_online
from ocdra.instances import generate

print(f"{'n':>4} {'policy':>13} {'primal/OPT':>11} {'certified':>10}")
for n in (5, 10, 25, 50, 100):
    inst = generate("triangular", {"n": n})
    for policy in ("balanced", "plain_greedy"):
        _, _, rep = run_online(inst, policy, delta=1e-2)
        print(f"{n:>4} {policy:>13} {rep.primal / n:>11.4f} {rep.certified_ratio:>10.4f}")
print("1 - 1/e =", round(1 - 1 / 2.718281828459045, 4))
