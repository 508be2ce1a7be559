"""
Boundaries when the last look switches to the adjusted analysis
===============================================================

Interim looks use the unadjusted (ANOVA) statistic and the final look uses
the covariate-adjusted (ANCOVA) one.  The two statistics are less than
perfectly correlated, so boundaries computed as if every look used the same
statistic no longer hold the overall level.
"""

import numpy as np

from hybridgst import mvn
from hybridgst.boundaries import SpendingFunction, design_boundaries, spending_boundaries
from hybridgst.covariance import AnalysisSchedule, Method, StagePlan, full_joint, select_schedule

plan = StagePlan.equal(300, 3)
hybrid = AnalysisSchedule.hybrid(3)
print("schedule:", [m.value for m in hybrid.per_stage_method])

# Joint correlation of all six statistics, stage-major with U before C.
joint = full_joint(plan, 0.5)
print(np.round(joint.corr, 4))

# Flat boundaries that ignore the switch, then the rejection probability they
# actually give when the final statistic is the adjusted one.
naive = design_boundaries(plan, AnalysisSchedule.consistent(3), 1.0, "pocock")
corr = select_schedule(joint, hybrid).corr
size = mvn.union_reject_prob(corr, naive.looks())
print(f"naive constant {naive.upper[0]:.4f} -> actual level {size:.4f}")

# Solving with the right correlation restores the level and raises the constant.
for rho in (1.0, 0.75, 0.5, 0.25):
    b = design_boundaries(plan, hybrid, rho, "pocock")
    print(f"rho={rho:<5} constant {b.upper[0]:.4f}  level {sum(b.increments):.5f}")

# Alpha spending: only the final bound depends on the estimated correlation.
fn = SpendingFunction("pocock", 0.05)
for rho_hat in (1.0, 0.5, 0.25):
    b = spending_boundaries(plan, fn, methods=[Method.UNADJUSTED] * 2 + [Method.ADJUSTED], rho=rho_hat)
    print(f"rho_hat={rho_hat:<4} bounds {np.round(b.upper, 4)}")
