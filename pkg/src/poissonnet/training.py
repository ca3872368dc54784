"""Losses, optimizer, augmentation, synthetic datasets and the training loop."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import shapes
from .mesh_io import TriMesh, jitter_vertices, normalize_mesh, validate
from .network import (
    MeshContext,
    NetworkConfig,
    PoissonNet,
    input_features,
    prepare_mesh,
    read_checkpoint,
    save_checkpoint,
)
from .spectral import compute_eigenbasis, compute_hks, hks_times

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses

@dataclass
class NJFLossTerms:
    vertex_weights: np.ndarray
    face_weights: np.ndarray
    target_vertices: np.ndarray
    target_jacobians: np.ndarray


def njf_terms(ctx: MeshContext, target_vertices, center=True) -> NJFLossTerms:
    """Loss data for a target deformation of the mesh in ``ctx``.

    Targets are centered with the source mass-weighted mean, matching the
    centering of the Poisson-integrated prediction.
    """
    ops = ctx.ops
    vt = np.asarray(target_vertices, dtype=np.float64)
    if center:
        vt = vt - ops.mass_weighted_mean(vt)
    return NJFLossTerms(
        vertex_weights=ops.mass_vertex,
        face_weights=ops.face_areas,
        target_vertices=vt,
        target_jacobians=ad.face_grad(ops.grad, vt),
    )


def njf_loss(u, terms: NJFLossTerms, ops):
    """``sum m_i |v_i - u_i|^2 + sum a_t |J_t - grad u_t|^2``."""
    vt = terms.target_vertices
    if np.shape(ad._val(u)) != vt.shape:
        raise ValueError(f"prediction shape {np.shape(ad._val(u))} != target shape {vt.shape}")
    vertex_term = ad.weighted_sum_sq(ad.sub(u, vt), terms.vertex_weights[:, None])
    jac = ad.sub(ad.face_grad(ops.grad, u), terms.target_jacobians)
    face_term = ad.weighted_sum_sq(jac, terms.face_weights[None, :, None])
    return ad.add(vertex_term, face_term)


def cross_entropy_loss(logits, labels):
    return ad.cross_entropy(logits, labels)


def mse_loss(pred, target, weights=None):
    return ad.mse(pred, target, weights)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with per-parameter first/second moment buffers keyed by name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p in params:
            g = p.grad
            m = self.m.get(p.name, np.zeros_like(g))
            v = self.v.get(p.name, np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[p.name], self.v[p.name] = m, v
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        out = {f"optim.m.{k}": v for k, v in self.m.items()}
        out.update({f"optim.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, t, arrays):
        self.t = int(t)
        for k, v in arrays.items():
            if k.startswith("optim.m."):
                self.m[k[len("optim.m."):]] = v
            elif k.startswith("optim.v."):
                self.v[k[len("optim.v."):]] = v


def adam_step(params, optimizer: Adam):
    optimizer.step(params)


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentationConfig:
    rotation: bool = False
    scale_range: tuple = (1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        self.scale_range = (float(lo), float(hi))

    @property
    def is_identity(self):
        return not self.rotation and self.scale_range == (1.0, 1.0)


def augment(mesh: TriMesh, cfg: AugmentationConfig, seed: int) -> TriMesh:
    """Uniform random rotation (quaternion method) followed by a uniform global scale."""
    if cfg.is_identity:
        return mesh
    rng = np.random.default_rng([cfg.seed, seed])
    R = shapes.random_rotation(rng) if cfg.rotation else None
    lo, hi = cfg.scale_range
    return mesh.transformed(R, scale=rng.uniform(lo, hi))


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Example:
    """One training item. ``target_fn(ctx)`` recomputes intrinsic targets after augmentation."""

    mesh: TriMesh
    label: int | None = None
    target: np.ndarray | None = None
    cond: np.ndarray | None = None
    target_fn: object = None
    name: str = ""


def hks_target(ctx: MeshContext) -> np.ndarray:
    return compute_hks(ctx.ops, times=hks_times(16)).fields


def _class_shape(label, rng):
    if label == 0:
        return shapes.icosphere(int(rng.choice([2, 3])))
    if label == 1:
        n_major = int(rng.choice([24, 32, 40]))
        return shapes.torus(n_major, n_major // 2, R=1.0, r=0.4)
    return shapes.box(int(rng.choice([4, 6, 8])), size=(1.6, 1.6, 1.6))


def gen_synthetic_classification(n_per_class: int, seed: int) -> list:
    """Spheres, tori and boxes at random resolutions, anisotropic scale, jitter and pose."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_per_class):
        for label in range(3):
            mesh = _class_shape(label, rng)
            mesh = mesh.transformed(np.diag(rng.uniform(0.7, 1.3, 3)))
            mesh = jitter_vertices(mesh, 0.005 * mesh.bbox_diagonal(), int(rng.integers(2**31)))
            mesh = mesh.transformed(shapes.random_rotation(rng))
            out.append(Example(mesh, label=label, name=f"{['sphere', 'torus', 'box'][label]}_{i}"))
    return out


def nearest_neighbor_separability(examples) -> float:
    """Leave-one-out 1-NN accuracy on standardized (log area, first 8 eigenvalues)."""
    feats = []
    for ex in examples:
        ops = prepare_mesh(ex.mesh).ops
        vals = compute_eigenbasis(ops, 8).values
        area = ops.face_areas.sum()
        feats.append(np.concatenate([[np.log(area)], vals[1:] * area]))
    X = np.array(feats)
    X = (X - X.mean(0)) / (X.std(0) + 1e-12)
    y = np.array([ex.label for ex in examples])
    D = ((X[:, None] - X[None]) ** 2).sum(-1)
    np.fill_diagonal(D, np.inf)
    return float((y[D.argmin(1)] == y).mean())


def segmentation_labels(mesh: TriMesh) -> np.ndarray:
    """Three bands along z: bottom, middle and top third of the height."""
    z = mesh.vertices[:, 2]
    lo, hi = z.min(), z.max()
    t = (z - lo) / (hi - lo)
    return np.digitize(t, [1 / 3, 2 / 3]).astype(np.int64)


def gen_synthetic_segmentation(n: int, seed: int) -> list:
    """Stretched, jittered ellipsoids labelled by height band."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        mesh = shapes.icosphere(int(rng.choice([2, 3])))
        mesh = mesh.transformed(np.diag([*rng.uniform(0.6, 1.0, 2), rng.uniform(1.4, 2.0)]))
        mesh = jitter_vertices(mesh, 0.003 * mesh.bbox_diagonal(), int(rng.integers(2**31)))
        mesh = normalize_mesh(mesh)
        out.append(Example(mesh, target=segmentation_labels(mesh), name=f"ellipsoid_{i}"))
    return out


def hks_overfit_mesh(seed: int = 0) -> TriMesh:
    """1000-vertex closed torus with a varying tube radius and normal noise.

    Kept at its natural size (area about 17) so that the HKS times span
    the scale of a few edges up to the whole shape; the noise gives the
    small-time channels genuine high-frequency content.
    """
    mesh = shapes.crumple(shapes.torus(40, 25, R=1.0, r=0.35, wobble=0.4), 0.04, seed)
    return normalize_mesh(mesh, area=None)


def gen_hks_dataset(mesh: TriMesh | None = None) -> list:
    mesh = hks_overfit_mesh() if mesh is None else mesh
    return [Example(mesh, target_fn=hks_target, name="hks")]


def gen_bend_dataset(n_pairs: int, seed: int, n_around=12, n_along=16) -> list:
    """Open cylinder bent by a random total angle; the angle is the condition."""
    rng = np.random.default_rng(seed)
    src = shapes.cylinder(n_around, n_along, radius=0.3, length=2.0)
    out = []
    for i in range(n_pairs):
        amount = float(rng.uniform(-np.pi / 2, np.pi / 2))
        out.append(Example(
            src,
            target=np.array(shapes.bend(src, amount, length=2.0).vertices),
            cond=np.array([amount]),
            name=f"bend_{i}",
        ))
    return out


DATASETS = {
    "synthetic_classification": lambda d: (
        gen_synthetic_classification(d.get("n_per_class", 10), d.get("seed", 0)),
        gen_synthetic_classification(d.get("test_per_class", 10), d.get("seed", 0) + 1000),
    ),
    "synthetic_segmentation": lambda d: (
        gen_synthetic_segmentation(d.get("n", 8), d.get("seed", 0)),
        gen_synthetic_segmentation(d.get("n_test", 4), d.get("seed", 0) + 1000),
    ),
    "hks_overfit": lambda d: (gen_hks_dataset(), []),
    "bend": lambda d: (gen_bend_dataset(d.get("n_pairs", 20), d.get("seed", 0)), []),
}


def build_dataset(spec: dict):
    kind = spec.get("kind")
    if kind not in DATASETS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {sorted(DATASETS)}")
    return DATASETS[kind](spec)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainingRun:
    network: NetworkConfig
    lr: float = 1e-3
    batch_size: int = 1
    iterations: int = 100
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    output_dir: str | None = None
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    dataset: dict = field(default_factory=dict)
    metric_log: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> TrainingRun:
        opt = d.get("optimizer", {})
        aug = d.get("augmentation", {})
        return cls(
            network=NetworkConfig.from_dict(d["network"]),
            lr=opt.get("lr", 1e-3),
            batch_size=opt.get("batch_size", 1),
            iterations=opt.get("iterations", 100),
            seed=opt.get("seed", 0),
            eval_every=d.get("eval_every", 0),
            checkpoint_every=d.get("checkpoint_every", 0),
            output_dir=d.get("output_dir"),
            augmentation=AugmentationConfig(
                rotation=aug.get("rotation", False),
                scale_range=tuple(aug.get("scale_range", (1.0, 1.0))),
                seed=aug.get("seed", 0),
            ),
            dataset=d.get("dataset", {}),
        )

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "optimizer": {"lr": self.lr, "batch_size": self.batch_size,
                          "iterations": self.iterations, "seed": self.seed},
            "augmentation": {"rotation": self.augmentation.rotation,
                             "scale_range": list(self.augmentation.scale_range),
                             "seed": self.augmentation.seed},
            "dataset": self.dataset,
            "eval_every": self.eval_every,
            "checkpoint_every": self.checkpoint_every,
            "output_dir": self.output_dir,
        }


class Trainer:
    """Runs forward/backward per example and caches per-mesh contexts.

    Contexts (operators plus factorization) and intrinsic input features are
    cached per example whenever augmentation is the identity.
    """

    def __init__(self, model: PoissonNet, augmentation: AugmentationConfig | None = None):
        self.model = model
        self.augmentation = augmentation or AugmentationConfig()
        self._cache = {}

    def context(self, ex: Example, key, aug_seed=None):
        cached = self.augmentation.is_identity or aug_seed is None
        if cached and key in self._cache:
            return self._cache[key]
        mesh = ex.mesh if aug_seed is None else augment(ex.mesh, self.augmentation, aug_seed)
        ctx = prepare_mesh(mesh)
        inputs = input_features(ctx, self.model.config.input_features)
        target = ex.target_fn(ctx) if ex.target_fn is not None else ex.target
        item = (ctx, inputs, target)
        if cached:
            self._cache[key] = item
        return item

    def loss(self, ex: Example, item, tape):
        ctx, inputs, target = item
        out = self.model.forward(ctx, inputs, ex.cond, tape=tape)
        head = self.model.config.head
        if head == "classification":
            return ad.cross_entropy(out, [ex.label]), out
        if head == "segmentation":
            return ad.cross_entropy(out, target), out
        if head == "njf":
            return njf_loss(out, njf_terms(ctx, target), ctx.ops), out
        return ad.mse(out, target), out

    def accuracy(self, ex, item, out):
        head = self.model.config.head
        pred = np.asarray(ad._val(out)).argmax(axis=1)
        if head == "classification":
            return float(pred[0] == ex.label)
        if head == "segmentation":
            return float((pred == item[2]).mean())
        return None

    def evaluate(self, examples, prefix="eval") -> dict:
        losses, accs = [], []
        for i, ex in enumerate(examples):
            item = self.context(ex, (prefix, i))
            loss, out = self.loss(ex, item, None)
            losses.append(float(loss))
            acc = self.accuracy(ex, item, out)
            if acc is not None:
                accs.append(acc)
        res = {"loss": float(np.mean(losses)) if losses else None}
        res["accuracy"] = float(np.mean(accs)) if accs else None
        return res


def _dump_failure(run: TrainingRun, model, iteration, loss):
    info = {
        "iteration": iteration,
        "loss": repr(loss),
        "param_norms": {k: float(np.linalg.norm(p.value)) for k, p in model.params.items()},
        "grad_norms": {k: float(np.linalg.norm(p.grad)) for k, p in model.params.items()},
    }
    if run.output_dir:
        os.makedirs(run.output_dir, exist_ok=True)
        with open(os.path.join(run.output_dir, "failure.json"), "w") as fh:
            json.dump(info, fh, indent=2)
    return info


def save_training_checkpoint(path, run: TrainingRun, model: PoissonNet, opt: Adam, iteration: int):
    save_checkpoint(path, model, extra={"run": run.to_dict(), "iteration": iteration, "adam_t": opt.t},
                    arrays=opt.state())


def load_training_checkpoint(path):
    """Return ``(run, model, optimizer, iteration)`` restored from ``path``."""
    header, state = read_checkpoint(path)
    run = TrainingRun.from_dict(header["run"])
    model = PoissonNet(NetworkConfig.from_dict(header["network"]))
    model.load_state({k: v for k, v in state.items() if not k.startswith("optim.")})
    opt = Adam(lr=run.lr)
    opt.load_state(header.get("adam_t", 0), {k: v for k, v in state.items() if k.startswith("optim.")})
    return run, model, opt, int(header.get("iteration", 0))


def train_loop(run: TrainingRun, dataset, model: PoissonNet | None = None, eval_set=None,
               optimizer: Adam | None = None, start_iteration: int = 0, trainer: Trainer | None = None,
               callback=None):
    """Virtual-batch Adam training.

    Each iteration draws ``batch_size`` examples with an RNG seeded by
    ``(seed, iteration)``, so a run resumed from a checkpoint at iteration
    ``k`` replays the same batches as the uninterrupted run.
    """
    if not dataset:
        raise TrainingError("empty dataset")
    model = model or PoissonNet(run.network)
    opt = optimizer or Adam(lr=run.lr)
    trainer = trainer or Trainer(model, run.augmentation)
    params = model.parameters()
    t0 = time.perf_counter()
    for it in range(start_iteration, run.iterations):
        rng = np.random.default_rng([run.seed, it])
        batch = rng.choice(len(dataset), size=run.batch_size, replace=len(dataset) < run.batch_size)
        model.zero_grad()
        losses, accs = [], []
        for j, idx in enumerate(batch):
            ex = dataset[idx]
            aug_seed = None if run.augmentation.is_identity else int(rng.integers(2**31))
            item = trainer.context(ex, ("train", int(idx)), aug_seed)
            tape = ad.Tape()
            loss, out = trainer.loss(ex, item, tape)
            lv = float(loss.value)
            if not np.isfinite(lv):
                info = _dump_failure(run, model, it, lv)
                raise TrainingError(f"non-finite loss at iteration {it}: {info['loss']}")
            tape.backward(loss, seed=1.0 / run.batch_size)
            losses.append(lv)
            acc = trainer.accuracy(ex, item, out)
            if acc is not None:
                accs.append(acc)
        opt.step(params)
        rec = {
            "iteration": it,
            "loss": float(np.mean(losses)),
            "accuracy": float(np.mean(accs)) if accs else None,
            "wall_time": time.perf_counter() - t0,
        }
        if eval_set and run.eval_every and (it + 1) % run.eval_every == 0:
            ev = trainer.evaluate(eval_set)
            rec["eval_loss"], rec["eval_accuracy"] = ev["loss"], ev["accuracy"]
        run.metric_log.append(rec)
        if callback is not None:
            callback(rec)
        if run.output_dir and run.checkpoint_every and (it + 1) % run.checkpoint_every == 0:
            os.makedirs(run.output_dir, exist_ok=True)
            path = os.path.join(run.output_dir, f"ckpt_{it + 1:06d}.pnet")
            save_training_checkpoint(path, run, model, opt, it + 1)
            run.checkpoints.append(path)
    if run.output_dir:
        os.makedirs(run.output_dir, exist_ok=True)
        path = os.path.join(run.output_dir, "final.pnet")
        save_training_checkpoint(path, run, model, opt, run.iterations)
        run.checkpoints.append(path)
        write_metric_log(os.path.join(run.output_dir, "metrics.jsonl"), run.metric_log)
    return model, run.metric_log


def write_metric_log(path, log):
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec) + "\n")


def dataset_diagnostics(examples) -> list:
    return [asdict(validate(ex.mesh)) for ex in examples]
