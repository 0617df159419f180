"""Exponential decay of gate imbalance under the gradient flow.

Integrates the flow on a small grouped regression problem and compares the
fitted log-slope of the maximal imbalance with the predicted rate -4 lam / D.

    python3 demos/imbalance_decay.py
"""

from dgating.experiments import decay_problem, run_decay

model, data, omega, v = decay_problem("linear")
results = run_decay(model, data, depths=(2, 3, 4), lambdas=(0.1, 0.5),
                    init_omega=omega, init_v=v, t_end=10.0, dt=0.02)

print(f"{'D':>2} {'lam':>5} {'fitted':>10} {'predicted':>10} {'gap slope':>10}")
for (depth, lam), res in sorted(results.items()):
    print(f"{depth:>2} {lam:>5.2f} {res.slope_imbalance:>10.5f} {res.theory_slope:>10.5f} "
          f"{res.slope_gap:>10.5f}")
