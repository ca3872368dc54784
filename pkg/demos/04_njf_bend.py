"""Learn to bend a cylinder: the network predicts Jacobians and a Poisson solve turns them into positions.

    python demos/04_njf_bend.py [iterations]
"""

import sys

import numpy as np

from poissonnet import shapes
from poissonnet import training as T
from poissonnet.network import NetworkConfig, PoissonNet, prepare_mesh

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 4000
data = T.gen_bend_dataset(20, 0)
cfg = NetworkConfig(block_count=2, width=32, vec_mlp_depth=2, head="njf", conditional_width=1)
trainer = T.Trainer(PoissonNet(cfg))

# With a zero output layer the head reproduces the source mesh exactly.
initial = trainer.evaluate(data)["loss"]
print(f"initial loss {initial:.4e}")
run = T.TrainingRun(network=cfg, lr=5e-4, batch_size=16, iterations=iterations)
T.train_loop(run, data, model=trainer.model, trainer=trainer,
             callback=lambda r: print(f"iter {r['iteration']:5d}  batch loss {r['loss']:.3e}")
             if (r["iteration"] + 1) % 200 == 0 else None)
final = trainer.evaluate(data)["loss"]
print(f"final loss {final:.4e}  ({final / initial:.2e} of initial)")

# Try an angle the model never saw.
src = data[0].mesh
ctx = prepare_mesh(src)
angle = 1.0
pred = trainer.model.predict(ctx, src.vertices, np.array([angle]))
target = shapes.bend(src, angle, length=2.0).vertices
target = target - ctx.ops.mass_vertex @ target / ctx.ops.mass_vertex.sum()
print(f"unseen angle {angle}: mean vertex error {np.linalg.norm(pred - target, axis=1).mean():.4f} "
      f"(cylinder length 2)")
