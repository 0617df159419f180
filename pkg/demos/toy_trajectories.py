"""Direct versus gated gradient descent on the two-parameter toy problem.

With a sparsity-inducing penalty the direct (sub)gradient iterates hover
around zero without reaching it, while the gated iterates converge to an
exact zero through smooth updates.

    python3 demos/toy_trajectories.py
"""

import numpy as np

from dgating.experiments import oscillation_count, run_toy

LAM = 0.5
STEPS = 3000
LR = 0.05

for run in run_toy((2, 3, 4), LAM, STEPS, LR):
    direct_end = np.linalg.norm(run.direct[-1])
    gated_end = np.linalg.norm(run.gated[-1])
    print(f"D={run.depth}: direct |w|={direct_end:.3e} "
          f"(oscillations in final quarter: {oscillation_count(run.direct)}), "
          f"gated |w|={gated_end:.3e}")
