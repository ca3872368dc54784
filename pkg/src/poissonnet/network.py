"""PoissonNet blocks, task heads and the stacked network.

A block takes vertex features ``s``, moves to the gradient domain, applies
per-face complex-linear layers (with optional scalar-driven modulation),
integrates back with a centered Poisson solve and mixes ``[s, u, c]`` with a
per-vertex MLP.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .mesh_io import TriMesh
from .operators import DifferentialOperators, build_operators
from .poisson import PoissonFactorization, factorize

HEADS = ("classification", "segmentation", "njf", "regression")
INPUTS = ("xyz", "hks", "custom")
MOD_EPS = 1e-4

_JSON_NAMES = {
    "block_count": "blockCount",
    "width": "width",
    "vec_mlp_depth": "vecMLPDepth",
    "use_modulation": "useModulation",
    "modulation_per_layer": "modulationPerLayer",
    "input_features": "inputFeatures",
    "input_width": "inputWidth",
    "conditional_width": "conditionalWidth",
    "head": "head",
    "head_outputs": "headOutputs",
    "seed": "seed",
}


@dataclass
class NetworkConfig:
    block_count: int = 2
    width: int = 32
    vec_mlp_depth: int = 1
    use_modulation: bool = True
    modulation_per_layer: bool = False
    input_features: str = "xyz"
    input_width: int = 3
    conditional_width: int = 0
    head: str = "regression"
    head_outputs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.block_count < 1 or self.width < 1 or self.vec_mlp_depth < 1:
            raise ValueError("blockCount, width and vecMLPDepth must be >= 1")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.input_features not in INPUTS:
            raise ValueError(f"unknown input features {self.input_features!r}")
        if self.head == "njf":
            self.head_outputs = 3

    def to_dict(self) -> dict:
        return {_JSON_NAMES[k]: v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        rev = {v: k for k, v in _JSON_NAMES.items()}
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            name = rev.get(key, key)
            if name not in known:
                raise ValueError(f"unknown network config field {key!r}")
            kwargs[name] = value
        return cls(**kwargs)


@dataclass
class MeshContext:
    """Per-mesh operators and the one factorization shared by every solve."""

    mesh: TriMesh
    ops: DifferentialOperators
    fact: PoissonFactorization

    @property
    def n_vertices(self):
        return self.mesh.n_vertices


def prepare_mesh(mesh: TriMesh, frames=None, **factor_kwargs) -> MeshContext:
    ops = build_operators(mesh, frames)
    return MeshContext(mesh, ops, factorize(ops.laplacian, ops.mass_vertex, **factor_kwargs))


def input_features(ctx: MeshContext, tag: str, n_hks: int = 16) -> np.ndarray:
    if tag == "xyz":
        return np.array(ctx.mesh.vertices)
    if tag == "hks":
        from .spectral import compute_hks, hks_times

        return compute_hks(ctx.ops, times=hks_times(n_hks)).fields
    raise ValueError(f"input features {tag!r} must be supplied by the caller")


# ---------------------------------------------------------------------------
# functional building blocks (accept numpy arrays or tape variables)

def _as_pair(f):
    """Complex ``(F, C)`` numpy field to stacked ``(2, F, C)``; tape vars pass through."""
    if isinstance(f, ad.Var):
        return f
    f = np.asarray(f)
    if np.iscomplexobj(f):
        return np.stack([f.real, f.imag])
    return f


def _to_complex(x):
    return x[0] + 1j * x[1]


def vector_linear(f, W_re, W_im, b):
    """Complex linear map followed by the magnitude gate ``relu(r + b) / r``."""
    return ad.magnitude_gate(ad.complex_linear(f, W_re, W_im), b)


def vector_linear_forward(f, W, b):
    """Numpy convenience form: complex ``f (F, C_in)``, complex ``W (C_out, C_in)``."""
    f = np.asarray(f)
    if f.shape[-1] != np.shape(W)[1]:
        raise ValueError(f"field has {f.shape[-1]} channels, W expects {np.shape(W)[1]}")
    W = np.asarray(W, dtype=np.complex128)
    return _to_complex(vector_linear(_as_pair(f), W.real, W.imag, np.asarray(b, dtype=np.float64)))


def mlp(x, layers, final_activation=False):
    """Stack of ``(W, b)`` dense layers with ReLU between them."""
    for i, (W, b) in enumerate(layers):
        x = ad.linear(x, W, b)
        if i < len(layers) - 1 or final_activation:
            x = ad.relu(x)
    return x


def modulate(f, s, ops: DifferentialOperators, mod_layers, eps=MOD_EPS):
    """``(softplus(gamma) + eps) * f * exp(i theta)`` with ``gamma, theta = MLP(s_face)``."""
    s_face = ad.spmm(ops.face_average, s)
    C = np.shape(ad._val(s))[1]
    out = mlp(s_face, mod_layers)
    gamma = ad.take_cols(out, 0, C)
    theta = ad.take_cols(out, C, 2 * C)
    scale = ad.add(ad.softplus(gamma), eps)
    return ad.rotate_scale(_as_pair(f), scale, theta)


def poisson_block(s, cond, ctx: MeshContext, block: dict, config: NetworkConfig):
    """One block. ``block`` maps short names (``mod0.W1``, ``vec0.W_re``, ...) to values."""
    ops = ctx.ops
    f = ad.face_grad(ops.grad, s)
    for k in range(config.vec_mlp_depth):
        if config.use_modulation and (k == 0 or config.modulation_per_layer):
            tag = f"mod{k if config.modulation_per_layer else 0}"
            layers = [(block[f"{tag}.W1"], block[f"{tag}.b1"]), (block[f"{tag}.W2"], block[f"{tag}.b2"])]
            f = modulate(f, s, ops, layers)
        f = vector_linear(f, block[f"vec{k}.W_re"], block[f"vec{k}.W_im"], block[f"vec{k}.b"])
    u = ad.poisson_solve(ctx.fact, ad.face_div(ops.divergence, f))
    parts = [s, u] if cond is None else [s, u, cond]
    x = ad.concat(parts, axis=1)
    n_mlp = sum(1 for key in block if key.startswith("mlp") and key.endswith(".W"))
    return mlp(x, [(block[f"mlp{i}.W"], block[f"mlp{i}.b"]) for i in range(n_mlp)]), u


def classification_head(s, mass_vertex, W, b):
    """Mass-weighted global average pooling followed by a linear layer, ``(1, K)``."""
    return ad.linear(ad.weighted_mean_rows(s, mass_vertex), W, b)


def integrate_jacobians(ctx: MeshContext, jac):
    """Poisson-integrate a ``(2, F, 3)`` Jacobian field to centered vertex positions."""
    return ad.poisson_solve(ctx.fact, ad.face_div(ctx.ops.divergence, jac))


def source_jacobians(ctx: MeshContext) -> np.ndarray:
    return ad.face_grad(ctx.ops.grad, np.array(ctx.mesh.vertices))


def njf_head(s, ctx: MeshContext, vec_layers, out_W_re, out_W_im):
    """Predict a Jacobian residual, add the source Jacobians, integrate.

    ``vec_layers`` are gated ``(W_re, W_im, b)`` width-preserving layers; the
    final complex map to three channels is linear so a zero output layer gives
    the identity deformation.
    """
    f = ad.face_grad(ctx.ops.grad, s)
    for W_re, W_im, b in vec_layers:
        f = vector_linear(f, W_re, W_im, b)
    residual = ad.complex_linear(f, out_W_re, out_W_im)
    return integrate_jacobians(ctx, ad.add(residual, source_jacobians(ctx)))


# ---------------------------------------------------------------------------

class PoissonNet:
    """Input lift, ``N`` Poisson blocks and a task head.

    Parameters are kept in an insertion-ordered dict of :class:`Parameter`.
    """

    def __init__(self, config: NetworkConfig, params: dict | None = None):
        self.config = config
        self.params = self._init_params(config) if params is None else params

    # -- parameters ---------------------------------------------------------
    @staticmethod
    def _init_params(cfg: NetworkConfig) -> dict:
        rng = np.random.default_rng(cfg.seed)
        C = cfg.width
        p = {}

        def dense(name, fan_in, fan_out, gain=2.0, zero=False):
            W = np.zeros((fan_in, fan_out)) if zero else rng.normal(0, np.sqrt(gain / fan_in), (fan_in, fan_out))
            p[f"{name}.W"] = Parameter(f"{name}.W", W)
            p[f"{name}.b"] = Parameter(f"{name}.b", np.zeros(fan_out))

        def vec(name, c_in, c_out, bias=True):
            std = np.sqrt(1.0 / c_in)
            p[f"{name}.W_re"] = Parameter(f"{name}.W_re", rng.normal(0, std, (c_out, c_in)))
            p[f"{name}.W_im"] = Parameter(f"{name}.W_im", rng.normal(0, std, (c_out, c_in)))
            if bias:
                p[f"{name}.b"] = Parameter(f"{name}.b", np.zeros(c_out))

        dense("lift", cfg.input_width, C, gain=1.0)
        for n in range(cfg.block_count):
            pre = f"block{n}"
            n_mod = (cfg.vec_mlp_depth if cfg.modulation_per_layer else 1) if cfg.use_modulation else 0
            for k in range(n_mod):
                W1 = rng.normal(0, np.sqrt(2.0 / C), (C, C))
                p[f"{pre}.mod{k}.W1"] = Parameter(f"{pre}.mod{k}.W1", W1)
                p[f"{pre}.mod{k}.b1"] = Parameter(f"{pre}.mod{k}.b1", np.zeros(C))
                p[f"{pre}.mod{k}.W2"] = Parameter(f"{pre}.mod{k}.W2", np.zeros((C, 2 * C)))
                p[f"{pre}.mod{k}.b2"] = Parameter(f"{pre}.mod{k}.b2", np.zeros(2 * C))
            for k in range(cfg.vec_mlp_depth):
                vec(f"{pre}.vec{k}", C, C)
            dense(f"{pre}.mlp0", 2 * C + cfg.conditional_width, C)
            dense(f"{pre}.mlp1", C, C)
            dense(f"{pre}.mlp2", C, C, gain=1.0)
        if cfg.head == "njf":
            for k in range(cfg.vec_mlp_depth - 1):
                vec(f"head.vec{k}", C, C)
            vec("head.out", C, 3, bias=False)
            p["head.out.W_re"].value[:] = 0.0
            p["head.out.W_im"].value[:] = 0.0
        else:
            dense("head", C, cfg.head_outputs, gain=1.0)
        return p

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def n_parameters(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    # -- forward -------------------------------------------------------------
    def _bind(self, tape):
        if tape is None:
            return {k: p.value for k, p in self.params.items()}
        return {k: tape.param(p) for k, p in self.params.items()}

    def features(self, ctx: MeshContext, inputs, cond=None, tape=None, bound=None):
        """Vertex features after the last block and the per-block Poisson solutions."""
        cfg = self.config
        P = self._bind(tape) if bound is None else bound
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.shape != (ctx.n_vertices, cfg.input_width):
            raise ValueError(
                f"inputs must have shape ({ctx.n_vertices}, {cfg.input_width}), got {inputs.shape}"
            )
        cond = self._broadcast_cond(cond, ctx.n_vertices)
        s = ad.linear(inputs, P["lift.W"], P["lift.b"])
        solutions = []
        for n in range(cfg.block_count):
            pre = f"block{n}."
            block = {k[len(pre):]: v for k, v in P.items() if k.startswith(pre)}
            s, u = poisson_block(s, cond, ctx, block, cfg)
            solutions.append(u)
        return s, solutions

    def _broadcast_cond(self, cond, n):
        cw = self.config.conditional_width
        if cw == 0:
            if cond is not None and np.size(cond):
                raise ValueError("network has conditionalWidth 0 but conditions were given")
            return None
        if cond is None:
            raise ValueError(f"network expects {cw} conditional features")
        cond = np.asarray(cond, dtype=np.float64)
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (n, cond.shape[0]))
        if cond.shape != (n, cw):
            raise ValueError(f"conditions must have shape ({n}, {cw}) or ({cw},)")
        return np.array(cond)

    def forward(self, ctx: MeshContext, inputs, cond=None, tape=None):
        """Head output: logits ``(1, K)``, per-vertex logits/values ``(V, K)`` or positions ``(V, 3)``."""
        P = self._bind(tape)
        s, _ = self.features(ctx, inputs, cond, bound=P)
        return self.head_forward(s, ctx, P)

    def head_forward(self, s, ctx, P):
        cfg = self.config
        if cfg.head == "classification":
            return classification_head(s, ctx.ops.mass_vertex, P["head.W"], P["head.b"])
        if cfg.head == "njf":
            layers = [
                (P[f"head.vec{k}.W_re"], P[f"head.vec{k}.W_im"], P[f"head.vec{k}.b"])
                for k in range(cfg.vec_mlp_depth - 1)
            ]
            return njf_head(s, ctx, layers, P["head.out.W_re"], P["head.out.W_im"])
        return ad.linear(s, P["head.W"], P["head.b"])

    def predict(self, ctx, inputs, cond=None) -> np.ndarray:
        return np.asarray(self.forward(ctx, inputs, cond))

    # -- persistence ----------------------------------------------------------
    def state(self) -> dict:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state: dict):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].value = np.array(v, dtype=np.float64)


CHECKPOINT_MAGIC = b"PNETCKPT"
CHECKPOINT_VERSION = 1


def _write_block(fh, name, value):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", value.ndim))
    fh.write(struct.pack(f"<{value.ndim}Q", *value.shape))
    fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def save_checkpoint(path, model: PoissonNet, extra: dict | None = None, arrays: dict | None = None):
    """Write the little-endian checkpoint.

    Layout: magic (8 bytes), version (u32), config JSON length (u32), config
    JSON (utf-8), then until EOF one block per parameter: name length (u32),
    name (utf-8), rank (u32), dims (u64 each), float64 data in C order.
    ``arrays`` adds further named blocks (e.g. optimizer state) after the
    parameters.
    """
    doc = {"network": model.config.to_dict()}
    if extra:
        doc.update(extra)
    cfg = json.dumps(doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
        fh.write(cfg)
        for name, p in model.params.items():
            _write_block(fh, name, p.value)
        for name, value in (arrays or {}).items():
            _write_block(fh, name, np.asarray(value, dtype=np.float64))


def read_checkpoint(path):
    """Return ``(header dict, {name: array})`` from a checkpoint file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a PoissonNet checkpoint")
    version, n = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n
    state = {}
    while pos < len(data):
        (ln,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
        pos += 8 * count
    return header, state


def load_checkpoint(path) -> tuple[PoissonNet, dict]:
    header, state = read_checkpoint(path)
    model = PoissonNet(NetworkConfig.from_dict(header["network"]))
    model.load_state({k: v for k, v in state.items() if not k.startswith("optim.")})
    return model, header
