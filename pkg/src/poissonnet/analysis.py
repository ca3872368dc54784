"""Power spectra of vertex features and robustness of trained models to remeshing."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .mesh_io import MeshError, TriMesh, drop_faces, jitter_vertices, subdivide_midpoint, validate
from .network import PoissonNet, input_features, prepare_mesh
from .spectral import Eigenbasis


@dataclass
class SpectrumReport:
    K: int
    perChannelPower: np.ndarray
    maxPower: np.ndarray
    coefficients: np.ndarray
    energy: np.ndarray
    meshId: str = ""
    layerTag: str = ""

    def power_above(self, k: int) -> np.ndarray:
        """Per-channel fraction of normalized power in modes ``k+1 .. K`` (1-based)."""
        return self.perChannelPower[k:].sum(axis=0)

    def to_json(self) -> dict:
        return {
            "K": self.K,
            "meshId": self.meshId,
            "layerTag": self.layerTag,
            "maxPower": self.maxPower.tolist(),
            "perChannelPower": self.perChannelPower.tolist(),
        }


def power_spectrum(features, eigen: Eigenbasis, mass_vertex, mesh_id="", layer_tag="") -> SpectrumReport:
    """Project each channel onto the eigenbasis and normalize its power to sum to one.

    Coefficients are ``phi_k^T M s``; ``energy`` is ``s^T M s`` per channel,
    which bounds the summed squared coefficients (equality for a full basis).
    Channels with zero projection get all-zero power.
    """
    s = np.asarray(features, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    m = np.asarray(mass_vertex, dtype=np.float64)
    if s.shape[0] != eigen.vectors.shape[0] or m.shape[0] != s.shape[0]:
        raise ValueError(
            f"features have {s.shape[0]} rows, eigenbasis {eigen.vectors.shape[0]}, mass {m.shape[0]}"
        )
    coef = eigen.vectors.T @ (m[:, None] * s)
    power = coef ** 2
    total = power.sum(axis=0)
    norm = np.where(total > 0, power / np.where(total > 0, total, 1.0), 0.0)
    energy = np.einsum("vc,v,vc->c", s, m, s)
    return SpectrumReport(eigen.k, norm, norm.max(axis=1), coef, energy, mesh_id, layer_tag)


def truncate(features, eigen: Eigenbasis, mass_vertex, k: int) -> np.ndarray:
    """Reconstruction of ``features`` from their first ``k`` spectral coefficients."""
    phi = eigen.vectors[:, :k]
    return phi @ (phi.T @ (np.asarray(mass_vertex)[:, None] * np.asarray(features)))


# ---------------------------------------------------------------------------
# robustness

@dataclass
class RobustnessReport:
    perturbation: str
    parameters: dict
    correspondence: str
    nBaselineVertices: int
    nPerturbedVertices: int
    nShared: int
    relativeL2: float | None = None
    agreement: float | None = None
    skipped: str | None = None
    matches: list = field(default_factory=list, repr=False)

    def to_json(self, with_matches=False) -> dict:
        d = asdict(self)
        if not with_matches:
            d.pop("matches")
        return d


def nearest_vertex(query, reference) -> np.ndarray:
    """Index of the Euclidean-nearest reference vertex for each query point.

    Ties are broken toward the lowest reference index.
    """
    reference = np.asarray(reference, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    k = min(8, len(reference))
    dist, idx = cKDTree(reference).query(query, k=k)
    dist = dist.reshape(len(query), k)
    idx = idx.reshape(len(query), k)
    tied = dist <= dist[:, :1]
    return np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)


def _perturb(mesh: TriMesh, tag: str, value, seed: int):
    """Perturbed mesh and identity correspondence (or ``None`` for nearest matching)."""
    n = mesh.n_vertices
    if tag == "none":
        return mesh, np.arange(n)
    if tag == "subdivide":
        out = mesh
        for _ in range(int(value or 1)):
            out = subdivide_midpoint(out)
        return out, np.arange(n)
    if tag == "jitter":
        return jitter_vertices(mesh, float(value), seed), np.arange(n)
    if tag == "partial":
        out, _ = drop_faces(mesh, float(value), seed)
        return out, None
    raise ValueError(f"unknown perturbation {tag!r}")


def _outputs(model: PoissonNet, mesh: TriMesh, cond):
    ctx = prepare_mesh(mesh)
    return model.predict(ctx, input_features(ctx, model.config.input_features), cond)


def robustness_report(model: PoissonNet, mesh: TriMesh, perturbations, seed: int = 0, cond=None,
                      baseline=None):
    """Compare model outputs on ``mesh`` against perturbed versions of it.

    ``perturbations`` holds ``(tag, value)`` pairs with tags ``none``,
    ``subdivide`` (levels), ``jitter`` (sigma), ``partial`` (dropped face
    fraction) or ``external`` (a :class:`TriMesh`, e.g. a decimated copy).
    Subdivision and jitter keep the original vertex ids as the shared set;
    partial and external meshes are matched vertex by vertex to the nearest
    baseline vertex. Per-vertex heads report the relative L2 difference of
    the outputs and, for segmentation, the fraction of matched vertices with
    the same predicted label.
    """
    per_vertex = model.config.head in ("segmentation", "regression", "njf")
    base = _outputs(model, mesh, cond) if baseline is None else baseline
    reports = []
    for tag, value in perturbations:
        params = {"value": value if not isinstance(value, TriMesh) else f"mesh({value.n_vertices} vertices)",
                  "seed": seed}
        try:
            if tag == "external":
                pert, ident = value, None
            else:
                pert, ident = _perturb(mesh, tag, value, seed)
        except (MeshError, ValueError) as exc:
            reports.append(RobustnessReport(tag, params, "none", mesh.n_vertices, 0, 0, skipped=str(exc)))
            continue
        diag = validate(pert)
        if diag.connectedComponents != 1:
            reports.append(RobustnessReport(
                tag, params, "none", mesh.n_vertices, pert.n_vertices, 0,
                skipped=f"perturbed mesh has {diag.connectedComponents} connected components",
            ))
            continue
        out = _outputs(model, pert, cond)
        if not per_vertex:
            rel = float(np.linalg.norm(out - base) / max(np.linalg.norm(base), 1e-300))
            agree = float(np.argmax(out) == np.argmax(base)) if model.config.head == "classification" else None
            reports.append(RobustnessReport(tag, params, "global", mesh.n_vertices, pert.n_vertices, 0, rel, agree))
            continue
        if ident is not None:
            pert_idx, base_idx, corr = ident, ident, "identity"
        else:
            pert_idx = np.arange(pert.n_vertices)
            base_idx = nearest_vertex(pert.vertices, mesh.vertices)
            corr = "nearest"
        a, b = out[pert_idx], base[base_idx]
        rel = float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
        agree = None
        if model.config.head == "segmentation":
            agree = float((a.argmax(1) == b.argmax(1)).mean())
        reports.append(RobustnessReport(
            tag, params, corr, mesh.n_vertices, pert.n_vertices, len(pert_idx), rel, agree,
            matches=np.stack([pert_idx, base_idx], 1).tolist(),
        ))
    return reports
