"""Train a small segmentation model, then check how it behaves on remeshed inputs.

    python demos/02_segmentation_robustness.py [iterations]
"""

import sys

from poissonnet import training as T
from poissonnet.analysis import robustness_report
from poissonnet.network import NetworkConfig

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300
train = T.gen_synthetic_segmentation(8, 0)
test = T.gen_synthetic_segmentation(4, 1000)

cfg = NetworkConfig(block_count=2, width=16, head="segmentation", head_outputs=3)
run = T.TrainingRun(network=cfg, lr=3e-3, batch_size=4, iterations=iterations, eval_every=50)


def show(rec):
    if "eval_accuracy" in rec:
        print(f"iter {rec['iteration']:4d}  loss {rec['loss']:.4f}  held-out accuracy {rec['eval_accuracy']:.3f}")


model, log = T.train_loop(run, train, eval_set=test, callback=show)

# The same weights run on a subdivided mesh and on a noisy copy. Predictions
# are compared on the original vertices.
mesh = test[0].mesh
perturbations = [("subdivide", 1), ("jitter", 0.003 * mesh.bbox_diagonal()), ("partial", 0.05)]
for r in robustness_report(model, mesh, perturbations):
    if r.skipped:
        print(f"{r.perturbation:10s} skipped: {r.skipped}")
    else:
        print(f"{r.perturbation:10s} {r.nPerturbedVertices:5d} vertices  "
              f"label agreement {r.agreement:.4f}  logits rel L2 {r.relativeL2:.4f}")
