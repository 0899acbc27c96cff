"""Compare the three update rules on one synthetic instance.

A scaled-down version of the benchmark: exact Fisher scoring, Fisher
scoring with the decaying learning rate, and Adam all start from the same
initial values on the same data.  Trajectory CSVs land in a temp
directory.

Run: python demos/demo_optimizer_comparison.py
"""

import tempfile

from tweedievec import ConvergenceConfig, SimSpec, compare_optimizers, generate

workdir = tempfile.mkdtemp(prefix="tweedievec-cmp-")
spec = SimSpec(n=100, d=10, seed=4)
store, truth, disp = generate(spec, f"{workdir}/sim.cooc")
print(f"simulated {store.n_records} nonzero cells for n={spec.n}, d={spec.d}")

results = compare_optimizers(
    store, disp, spec.d, seed=42,
    convergence=ConvergenceConfig(epsilon=1e-6, maxit=60),
    out_dir=workdir)

print(f"{'arm':>10} {'iters':>6} {'first':>12} {'final':>12}")
for arm, res in results.items():
    if res.error is not None:
        print(f"{arm:>10}  failed: {res.error}")
        continue
    losses = [r.loss for r in res.history.records]
    print(f"{arm:>10} {len(losses):>6} {losses[0]:>12.2f} {losses[-1]:>12.2f}")

print(f"\nper-epoch loss of the first row (iteration 1):")
for arm, res in results.items():
    if res.history is None:
        continue
    trace = res.history.first_row_epoch_losses.get("row", [])
    print(f"{arm:>10}: " + " ".join(f"{v:.2f}" for v in trace))
print(f"\ntrajectory CSVs written to {workdir}")
