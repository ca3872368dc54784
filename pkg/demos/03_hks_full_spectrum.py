"""Fit heat kernel signatures on one mesh and look at the spectrum of the learned features.

    python demos/03_hks_full_spectrum.py [iterations]

A network that only ever sees the first 128 eigenfunctions cannot put power
above mode 128. The Poisson blocks have no such cutoff.
"""

import sys

import numpy as np

from poissonnet import training as T
from poissonnet.analysis import power_spectrum, truncate
from poissonnet.network import NetworkConfig, input_features, prepare_mesh
from poissonnet.spectral import compute_eigenbasis

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
data = T.gen_hks_dataset()
mesh = data[0].mesh
cfg = NetworkConfig(block_count=2, width=32, head="regression", head_outputs=16)
run = T.TrainingRun(network=cfg, lr=3e-3, iterations=iterations)
model, log = T.train_loop(run, data, callback=lambda r: print(r["iteration"], f"{r['loss']:.2e}")
                          if r["iteration"] % 250 == 0 else None)
print(f"final MSE {log[-1]['loss']:.2e}")

ctx = prepare_mesh(mesh)
eig = compute_eigenbasis(ctx.ops)
s, _ = model.features(ctx, input_features(ctx, "xyz"))
rep = power_spectrum(s, eig, ctx.ops.mass_vertex, layer_tag="final")
tail = rep.power_above(128)
print(f"{mesh.n_vertices} vertices; power above mode 128: mean {tail.mean():.2%}, max {tail.max():.2%}")

low = truncate(s, eig, ctx.ops.mass_vertex, 128)
print("after a 128-mode truncation:", power_spectrum(low, eig, ctx.ops.mass_vertex).power_above(128).max())
print("Parseval error:", np.max(np.abs((rep.coefficients ** 2).sum(0) - rep.energy) / np.maximum(rep.energy, 1e-300)))
