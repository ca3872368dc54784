"""Command-line entry point: ``poissonnet <subcommand> ...``.

Exit codes: 0 success, 1 usage error (bad flags, missing files), 2 data
error (unreadable mesh, bad CSV contents, failed factorization, ...).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

logger = logging.getLogger("poissonnet")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# file helpers

def _require(path):
    if not os.path.isfile(path):
        raise UsageError(f"file not found: {path}")
    return path


def _load_mesh(path):
    from .mesh_io import load_obj

    return load_obj(_require(path))


def _read_json(path):
    with open(_require(path)) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None


def _read_table(path, columns):
    """Numeric CSV with a header row naming ``columns``; returns an ``(n, k)`` array."""
    with open(_require(path)) as fh:
        header = [h.strip() for h in fh.readline().strip().split(",")]
        if header != list(columns):
            raise DataError(f"{path}: expected header {','.join(columns)}, got {','.join(header)}")
        try:
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None
    if data.size == 0:
        data = np.zeros((0, len(columns)))
    if data.shape[1] != len(columns):
        raise DataError(f"{path}: expected {len(columns)} columns")
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: non-finite values")
    return data


def _index_column(col, n, what, path):
    idx = col.astype(np.int64)
    if np.any(idx != col) or np.any(idx < 0) or np.any(idx >= n):
        raise DataError(f"{path}: {what} index out of range [0, {n})")
    return idx


def read_vertex_csv(path, n_vertices) -> np.ndarray:
    """``vertex,channel,value`` rows to a dense ``(V, C)`` array."""
    data = _read_table(path, ("vertex", "channel", "value"))
    v = _index_column(data[:, 0], n_vertices, "vertex", path)
    c = _index_column(data[:, 1], 1 << 30, "channel", path)
    out = np.zeros((n_vertices, int(c.max()) + 1 if len(c) else 1))
    out[v, c] = data[:, 2]
    return out


def read_face_csv(path, n_faces) -> np.ndarray:
    """``face,channel,re,im`` rows to a complex ``(F, C)`` array."""
    data = _read_table(path, ("face", "channel", "re", "im"))
    f = _index_column(data[:, 0], n_faces, "face", path)
    c = _index_column(data[:, 1], 1 << 30, "channel", path)
    out = np.zeros((n_faces, int(c.max()) + 1 if len(c) else 1), dtype=np.complex128)
    out[f, c] = data[:, 2] + 1j * data[:, 3]
    return out


def write_vertex_csv(fh, values):
    values = np.asarray(values)
    if values.ndim == 1:
        values = values[:, None]
    fh.write("vertex,channel,value\n")
    for i, row in enumerate(values):
        for c, x in enumerate(row):
            fh.write(f"{i},{c},{x:.17g}\n")


def write_face_csv(fh, values):
    fh.write("face,channel,re,im\n")
    for t, row in enumerate(np.asarray(values)):
        for c, z in enumerate(row):
            fh.write(f"{t},{c},{z.real:.17g},{z.imag:.17g}\n")


def write_triplets(path, A):
    A = A.tocoo()
    with open(path, "w") as fh:
        fh.write("row,col,value\n")
        for r, c, v in zip(A.row, A.col, A.data):
            fh.write(f"{r},{c},{v:.17g}\n")


def mesh_hash(mesh) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(mesh.faces, dtype="<i8").tobytes())
    return h.hexdigest()


class _Output:
    """Context manager yielding a text handle for ``path`` or stdout."""

    def __init__(self, path):
        self.path = path

    def __enter__(self):
        self.fh = open(self.path, "w") if self.path else sys.stdout
        return self.fh

    def __exit__(self, *exc):
        if self.path:
            self.fh.close()


def _emit_json(obj, path=None):
    with _Output(path) as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_validate(args):
    from .mesh_io import validate

    mesh = _load_mesh(args.mesh)
    print(validate(mesh).to_json())
    return 0


def cmd_ops(args):
    from scipy import sparse

    from .operators import build_operators

    mesh = _load_mesh(args.mesh)
    ops = build_operators(mesh)
    os.makedirs(args.out, exist_ok=True)
    mats = {
        "grad": ops.grad,
        "laplacian": ops.laplacian,
        "mass_vertex": sparse.diags(ops.mass_vertex),
        "mass_face": sparse.diags(ops.mass_face),
    }
    for name, A in mats.items():
        write_triplets(os.path.join(args.out, f"{name}.csv"), A)
    header = {
        "meshHash": mesh_hash(mesh),
        "nVertices": mesh.n_vertices,
        "nFaces": mesh.n_faces,
        "operators": {name: {"file": f"{name}.csv", "shape": list(A.shape), "nnz": int(A.nnz)}
                      for name, A in mats.items()},
        "conventions": {
            "grad": "rows 2t and 2t+1 hold the u1 and u2 components of face t; u1 is the normalized first edge",
            "laplacian": "positive semi-definite cotan Laplacian, L = grad^T M_F grad",
            "mass_vertex": "barycentric lumped vertex areas",
            "mass_face": "each face area repeated for both gradient components",
        },
    }
    _emit_json(header, os.path.join(args.out, "header.json"))
    print(json.dumps({"out": args.out, "meshHash": header["meshHash"]}))
    return 0


def _factor(mesh, shift_scale=None):
    from .network import prepare_mesh

    kwargs = {} if shift_scale is None else {"shift_scale": shift_scale}
    return prepare_mesh(mesh, **kwargs)


def cmd_solve(args):
    from .operators import divergence_rhs
    from .poisson import solve_centered

    mesh = _load_mesh(args.mesh)
    ctx = _factor(mesh, args.shift_scale)
    f = read_face_csv(args.field, mesh.n_faces)
    u = solve_centered(ctx.fact, divergence_rhs(ctx.ops, f))
    with _Output(args.out) as fh:
        write_vertex_csv(fh, u)
    return 0


def cmd_greens(args):
    from .poisson import greens_column

    mesh = _load_mesh(args.mesh)
    if not 0 <= args.vertex < mesh.n_vertices:
        raise DataError(f"vertex {args.vertex} out of range [0, {mesh.n_vertices})")
    ctx = _factor(mesh, args.shift_scale)
    with _Output(args.out) as fh:
        write_vertex_csv(fh, greens_column(ctx.fact, args.vertex))
    return 0


def cmd_hks(args):
    from .operators import build_operators
    from .spectral import compute_eigenbasis, compute_hks, hks_times

    ops = build_operators(_load_mesh(args.mesh))
    eig = compute_eigenbasis(ops, args.k)
    target = compute_hks(ops, eig, hks_times(args.times))
    with _Output(args.out) as fh:
        write_vertex_csv(fh, target.raw if args.raw else target.fields)
    return 0


def cmd_spectrum(args):
    from .analysis import power_spectrum
    from .operators import build_operators
    from .spectral import compute_eigenbasis

    mesh = _load_mesh(args.mesh)
    ops = build_operators(mesh)
    feats = read_vertex_csv(args.features, mesh.n_vertices)
    k = min(args.k, mesh.n_vertices)
    rep = power_spectrum(feats, compute_eigenbasis(ops, k), ops.mass_vertex,
                         mesh_id=mesh_hash(mesh)[:16], layer_tag=args.layer)
    _emit_json(rep.to_json(), args.out)
    return 0


def _gradcheck_setup(args):
    from . import shapes
    from .network import NetworkConfig, PoissonNet, input_features, prepare_mesh
    from .training import njf_loss, njf_terms

    mesh = _load_mesh(args.mesh) if args.mesh else shapes.torus(24, 12)
    cfg = NetworkConfig.from_dict(_read_json(args.config)) if args.config else NetworkConfig(
        block_count=2, width=8, vec_mlp_depth=2, head=args.head,
        head_outputs=3 if args.head in ("segmentation", "classification") else 1,
        conditional_width=1 if args.head == "njf" else 0,
    )
    model = PoissonNet(cfg)
    rng = np.random.default_rng(args.seed)
    for p in model.parameters():
        p.value = p.value + args.noise * rng.normal(size=p.shape)
    ctx = prepare_mesh(mesh)
    inputs = input_features(ctx, cfg.input_features)
    cond = rng.normal(size=cfg.conditional_width) if cfg.conditional_width else None
    from . import autodiff as ad

    if cfg.head == "njf":
        from .shapes import bend

        terms = njf_terms(ctx, bend(mesh, 0.5, length=2.0).vertices)

        def loss(tape):
            return njf_loss(model.forward(ctx, inputs, cond, tape), terms, ctx.ops)
    elif cfg.head == "classification":
        def loss(tape):
            return ad.cross_entropy(model.forward(ctx, inputs, cond, tape), [0])
    elif cfg.head == "segmentation":
        labels = rng.integers(0, cfg.head_outputs, mesh.n_vertices)

        def loss(tape):
            return ad.cross_entropy(model.forward(ctx, inputs, cond, tape), labels)
    else:
        target = rng.normal(size=(mesh.n_vertices, cfg.head_outputs))

        def loss(tape):
            return ad.mse(model.forward(ctx, inputs, cond, tape), target)
    return model, loss


def cmd_gradcheck(args):
    from .autodiff import finite_diff_check

    model, loss = _gradcheck_setup(args)
    rep = finite_diff_check(loss, model.parameters(), h=args.h, tol=args.tol,
                            max_coords=args.max_coords, seed=args.seed)
    print(json.dumps(rep.to_dict(), indent=2))
    return 0


def cmd_train(args):
    from .training import TrainingRun, build_dataset, train_loop, write_metric_log

    doc = _read_json(args.config)
    if args.output:
        doc["output_dir"] = args.output
    if args.iterations is not None:
        doc.setdefault("optimizer", {})["iterations"] = args.iterations
    try:
        run = TrainingRun.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{args.config}: invalid run config ({exc})") from None
    train, test = build_dataset(run.dataset)
    if run.output_dir:
        os.makedirs(run.output_dir, exist_ok=True)
        _emit_json(run.to_dict(), os.path.join(run.output_dir, "run_config.json"))
    model, log = train_loop(run, train, eval_set=test,
                            callback=(lambda r: logger.info("%s", json.dumps(r))) if args.verbose else None)
    if args.metrics:
        write_metric_log(args.metrics, log)
    summary = {"iterations": len(log), "final_loss": log[-1]["loss"] if log else None,
               "checkpoints": run.checkpoints}
    if test:
        from .training import Trainer

        summary["eval"] = Trainer(model, run.augmentation).evaluate(test)
    print(json.dumps(summary))
    return 0


def cmd_eval(args):
    from .network import input_features, load_checkpoint, prepare_mesh

    model, header = load_checkpoint(_require(args.checkpoint))
    if args.mesh:
        mesh = _load_mesh(args.mesh)
        ctx = prepare_mesh(mesh)
        if args.inputs:
            inputs = read_vertex_csv(args.inputs, mesh.n_vertices)
        else:
            inputs = input_features(ctx, model.config.input_features)
        cond = np.array(args.cond, dtype=np.float64) if args.cond else None
        out = model.predict(ctx, inputs, cond)
        if model.config.head == "classification":
            _emit_json({"logits": out[0].tolist(), "label": int(out[0].argmax())}, args.out)
        else:
            with _Output(args.out) as fh:
                write_vertex_csv(fh, out)
        return 0
    from .training import AugmentationConfig, Trainer, build_dataset

    spec = _read_json(args.dataset) if args.dataset else header.get("run", {}).get("dataset")
    if not spec:
        raise UsageError("eval needs --mesh, --dataset, or a checkpoint that records its dataset")
    if "dataset" in spec:
        spec = spec["dataset"]
    train, test = build_dataset(spec)
    res = Trainer(model, AugmentationConfig()).evaluate(test if (test and not args.train_split) else train)
    res["split"] = "train" if (args.train_split or not test) else "test"
    _emit_json(res, args.out)
    return 0


def cmd_robustness(args):
    from .analysis import robustness_report
    from .network import load_checkpoint

    model, _ = load_checkpoint(_require(args.checkpoint))
    mesh = _load_mesh(args.mesh)
    perts = [("none", 0)]
    perts += [("subdivide", 1)] * args.subdivide
    perts += [("jitter", s) for s in args.jitter]
    perts += [("partial", f) for f in args.partial]
    perts += [("external", _load_mesh(p)) for p in args.external]
    cond = np.array(args.cond, dtype=np.float64) if args.cond else None
    reps = robustness_report(model, mesh, perts, seed=args.seed, cond=cond)
    _emit_json([r.to_json(with_matches=args.matches) for r in reps], args.out)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="poissonnet", description="Poisson-solve networks on triangle meshes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    s = sub.add_parser("validate", help="print mesh diagnostics as JSON")
    s.add_argument("mesh")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("ops", help="dump operators as row,col,value CSV plus a JSON header")
    s.add_argument("--mesh", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_ops)

    s = sub.add_parser("solve", help="integrate a face vector field (face,channel,re,im CSV)")
    s.add_argument("--mesh", required=True)
    s.add_argument("--field", required=True)
    s.add_argument("--out", help="output CSV (default stdout)")
    s.add_argument("--shift-scale", type=float, default=None)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("greens", help="centered Green's function column for one vertex")
    s.add_argument("--mesh", required=True)
    s.add_argument("--vertex", type=int, required=True)
    s.add_argument("--out")
    s.add_argument("--shift-scale", type=float, default=None)
    s.set_defaults(func=cmd_greens)

    s = sub.add_parser("gradcheck", help="finite-difference check of network gradients (JSON)")
    s.add_argument("--mesh", help="OBJ mesh (default: a 288-vertex torus)")
    s.add_argument("--config", help="network config JSON")
    s.add_argument("--head", default="njf", choices=["njf", "segmentation", "classification", "regression"])
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--max-coords", type=int, default=None, help="sample at most this many coordinates per parameter")
    s.add_argument("--noise", type=float, default=0.05, help="std of noise added to the initial parameters")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("train", help="train from a run config JSON")
    s.add_argument("--config", required=True)
    s.add_argument("--output", help="output directory (overrides output_dir)")
    s.add_argument("--iterations", type=int)
    s.add_argument("--metrics", help="also write the metric log (JSON lines) here")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a mesh or a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mesh")
    s.add_argument("--inputs", help="vertex,channel,value CSV of input features")
    s.add_argument("--cond", type=float, nargs="*")
    s.add_argument("--dataset", help="dataset spec or run config JSON")
    s.add_argument("--train-split", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("hks", help="heat kernel signatures as vertex,channel,value CSV")
    s.add_argument("--mesh", required=True)
    s.add_argument("--times", type=int, default=16)
    s.add_argument("--k", type=int, default=None, help="eigenbasis size (default: full)")
    s.add_argument("--raw", action="store_true", help="skip per-channel normalization")
    s.add_argument("--out")
    s.set_defaults(func=cmd_hks)

    s = sub.add_parser("spectrum", help="power spectrum of vertex features (JSON)")
    s.add_argument("--mesh", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--k", type=int, default=256)
    s.add_argument("--layer", default="")
    s.add_argument("--out")
    s.set_defaults(func=cmd_spectrum)

    s = sub.add_parser("robustness", help="compare outputs under remeshing and noise (JSON)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mesh", required=True)
    s.add_argument("--subdivide", type=int, default=0, help="number of subdivision entries")
    s.add_argument("--jitter", type=float, nargs="*", default=[], help="noise sigmas")
    s.add_argument("--partial", type=float, nargs="*", default=[], help="dropped face fractions")
    s.add_argument("--external", nargs="*", default=[], help="externally remeshed OBJ files")
    s.add_argument("--cond", type=float, nargs="*")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--matches", action="store_true", help="include vertex correspondences")
    s.add_argument("--out")
    s.set_defaults(func=cmd_robustness)
    return p


def _thread_limit():
    raw = os.environ.get("PNET_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"PNET_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"PNET_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    from .autodiff import TapeError
    from .mesh_io import MeshError
    from .poisson import FactorizationError
    from .training import TrainingError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        n_threads = _thread_limit()
        if n_threads is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(n_threads):
            return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (DataError, MeshError, FactorizationError, TrainingError, TapeError, ValueError,
            IndexError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
