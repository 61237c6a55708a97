"""Dense numeric core: graph encoder, semantic encoder, gradients, updates.

The graph encoder stacks ``H <- act(M (H W) + b)`` layers where M is the
degree-normalized adjacency (self-loops included) restricted to the hop
neighborhood actually needed, so embeddings of a node depend on exactly its
L-hop surroundings. The final layer of both encoders is linear.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .graphstore import GraphSnapshot

__all__ = ["Layer", "GnnParams", "MlpParams", "ModelState", "init_gnn",
           "init_mlp", "init_model", "named_parameters", "gnn_forward",
           "mlp_forward", "compute_gradients", "apply_update",
           "finite_diff_check", "FiniteDiffReport", "save_model", "load_model",
           "clone_params", "NonFiniteError"]


class NonFiniteError(FloatingPointError):
    """A loss or update produced a non-finite value."""


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor
    att_src: Tensor | None = None   # attention backbone only
    att_dst: Tensor | None = None


@dataclass
class GnnParams:
    layers: list[Layer]
    negative_slope: float = 0.01
    backbone: str = "mean"          # "mean" | "attention"

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]


@dataclass
class MlpParams:
    layers: list[Layer]
    negative_slope: float = 0.01

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]


@dataclass
class ModelState:
    gnn: GnnParams
    mlp: MlpParams | None
    csd_projection: np.ndarray | None = None   # maps d_s -> gnn input dim
    seed: int = 0
    extra: dict = field(default_factory=dict)


def _init_layer(rng: np.random.Generator, d_in: int, d_out: int,
                attention: bool = False) -> Layer:
    bound = 1.0 / np.sqrt(d_in)
    w = ad.parameter(rng.uniform(-bound, bound, size=(d_in, d_out)))
    b = ad.parameter(rng.uniform(-bound, bound, size=(d_out,)))
    if not attention:
        return Layer(w, b)
    a_bound = 1.0 / np.sqrt(d_out)
    return Layer(w, b,
                 att_src=ad.parameter(rng.uniform(-a_bound, a_bound, size=(d_out,))),
                 att_dst=ad.parameter(rng.uniform(-a_bound, a_bound, size=(d_out,))))


def init_gnn(sizes, rng: np.random.Generator, negative_slope: float = 0.01,
             backbone: str = "mean") -> GnnParams:
    """sizes = [d_in, hidden..., d_out]; weights uniform in +-1/sqrt(fan_in)."""
    if backbone not in ("mean", "attention"):
        raise ValueError(f"unknown backbone {backbone!r}")
    layers = [_init_layer(rng, sizes[i], sizes[i + 1], backbone == "attention")
              for i in range(len(sizes) - 1)]
    return GnnParams(layers, negative_slope, backbone)


def init_mlp(sizes, rng: np.random.Generator,
             negative_slope: float = 0.01) -> MlpParams:
    layers = [_init_layer(rng, sizes[i], sizes[i + 1])
              for i in range(len(sizes) - 1)]
    return MlpParams(layers, negative_slope)


def init_model(feature_dim: int, hidden: int, out: int, num_layers: int,
               seed: int, *, csd_dim: int | None = None,
               negative_slope: float = 0.01, backbone: str = "mean",
               mlp_hidden: int | None = None) -> ModelState:
    rng = np.random.default_rng(seed)
    gnn_sizes = [feature_dim] + [hidden] * (num_layers - 1) + [out]
    gnn = init_gnn(gnn_sizes, rng, negative_slope, backbone)
    mlp = None
    proj = None
    if csd_dim is not None:
        mlp_sizes = [csd_dim, mlp_hidden or hidden, out]
        mlp = init_mlp(mlp_sizes, rng, negative_slope)
        if csd_dim != feature_dim:
            # fixed random map so the graph encoder can also consume CSDs
            proj = rng.standard_normal((csd_dim, feature_dim)) / np.sqrt(csd_dim)
    return ModelState(gnn=gnn, mlp=mlp, csd_projection=proj, seed=seed)


def named_parameters(model: ModelState) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for i, layer in enumerate(model.gnn.layers):
        out[f"gnn.{i}.weight"] = layer.weight
        out[f"gnn.{i}.bias"] = layer.bias
        if layer.att_src is not None:
            out[f"gnn.{i}.att_src"] = layer.att_src
            out[f"gnn.{i}.att_dst"] = layer.att_dst
    if model.mlp is not None:
        for i, layer in enumerate(model.mlp.layers):
            out[f"mlp.{i}.weight"] = layer.weight
            out[f"mlp.{i}.bias"] = layer.bias
    return out


def clone_params(model: ModelState) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in named_parameters(model).items()}


# -- forward passes ----------------------------------------------------------

def _hop_sets(graph: GraphSnapshot, nodes: np.ndarray, depth: int) -> list[np.ndarray]:
    """needed[l] = nodes whose layer-l activations are required; needed[depth]=nodes."""
    needed = [None] * (depth + 1)
    needed[depth] = nodes
    current = nodes
    for l in range(depth - 1, -1, -1):
        nbrs = [graph.indices[graph.indptr[u]:graph.indptr[u + 1]] for u in current]
        nbrs.append(current)
        current = np.unique(np.concatenate(nbrs))
        needed[l] = current
    return needed


def _restricted_mean_agg(graph: GraphSnapshot, rows: np.ndarray,
                         cols: np.ndarray) -> sp.csr_matrix:
    """Row-normalized adjacency block A[rows, cols] / degree[rows]."""
    col_pos = {int(c): i for i, c in enumerate(cols)}
    indptr = [0]
    indices = []
    data = []
    for u in rows:
        nbrs = graph.indices[graph.indptr[u]:graph.indptr[u + 1]]
        inv = 1.0 / graph.degree[u]
        for v in nbrs:
            indices.append(col_pos[int(v)])
            data.append(inv)
        indptr.append(len(indices))
    return sp.csr_matrix((np.asarray(data), np.asarray(indices, dtype=np.int64),
                          np.asarray(indptr, dtype=np.int64)),
                         shape=(rows.size, cols.size))


def gnn_forward(params: GnnParams, graph: GraphSnapshot, nodes) -> Tensor:
    """Embeddings for ``nodes`` (|nodes| x d_out), touching only L hops."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        return ad.constant(np.zeros((0, params.out_dim)))
    vis = graph.visible_mask
    if not vis[nodes].all():
        bad = nodes[~vis[nodes]]
        raise ValueError(f"nodes {bad.tolist()} are not visible in this snapshot")
    depth = len(params.layers)
    if graph.features.shape[1] != params.in_dim:
        raise ValueError(f"feature dim {graph.features.shape[1]} != "
                         f"encoder input dim {params.in_dim}")
    needed = _hop_sets(graph, nodes, depth)
    h = ad.constant(graph.features[needed[0]])
    for l, layer in enumerate(params.layers):
        rows, cols = needed[l + 1], needed[l]
        z = h @ layer.weight
        if params.backbone == "mean":
            z = ad.sparse_matmul(_restricted_mean_agg(graph, rows, cols), z)
        else:
            z = _attention_aggregate(params, layer, graph, rows, cols, z)
        z = z + layer.bias
        h = z if l == depth - 1 else ad.leaky_relu(z, params.negative_slope)
    # rows of h follow needed[depth]; reorder to the caller's node order
    pos = {int(u): i for i, u in enumerate(needed[depth])}
    order = np.asarray([pos[int(u)] for u in nodes], dtype=np.int64)
    return ad.gather_rows(h, order)


def _attention_aggregate(params: GnnParams, layer: Layer, graph: GraphSnapshot,
                         rows: np.ndarray, cols: np.ndarray, z: Tensor) -> Tensor:
    """Softmax-weighted aggregation over each row's neighbor set."""
    col_pos = {int(c): i for i, c in enumerate(cols)}
    mask = np.zeros((rows.size, cols.size))
    for i, u in enumerate(rows):
        for v in graph.indices[graph.indptr[u]:graph.indptr[u + 1]]:
            mask[i, col_pos[int(v)]] = 1.0
    row_idx = np.asarray([col_pos[int(u)] for u in rows], dtype=np.int64)
    zr = ad.gather_rows(z, row_idx)
    scores = (zr @ layer.att_src.reshape(-1, 1)) + \
             (z @ layer.att_dst.reshape(-1, 1)).transpose()
    scores = ad.leaky_relu(scores, params.negative_slope)
    # subtract the row max (constant w.r.t. grad) for numeric stability
    shift = (scores.data * mask).max(axis=1, keepdims=True)
    weights = ad.exp(scores - ad.constant(shift)) * ad.constant(mask)
    denom = weights.sum(axis=1).reshape(-1, 1)
    attn = weights / denom
    return attn @ z


def mlp_forward(params: MlpParams, vectors) -> Tensor:
    """Affine + leaky-ReLU chain with a linear final layer."""
    h = vectors if isinstance(vectors, Tensor) else ad.constant(vectors)
    if h.data.ndim == 1:
        h = h.reshape(1, -1)
    if h.data.shape[1] != params.in_dim:
        raise ValueError(f"input dim {h.data.shape[1]} != encoder input dim "
                         f"{params.in_dim}")
    last = len(params.layers) - 1
    for l, layer in enumerate(params.layers):
        h = h @ layer.weight + layer.bias
        if l != last:
            h = ad.leaky_relu(h, params.negative_slope)
    return h


# -- gradients and updates ---------------------------------------------------

def compute_gradients(params: dict[str, Tensor], loss: Tensor) -> dict[str, np.ndarray]:
    if not np.isfinite(loss.data):
        raise NonFiniteError(f"loss is {float(loss.data)}; refusing to differentiate")
    for t in params.values():
        t.grad = None
    ad.backward(loss)
    return {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for k, t in params.items()}


def apply_update(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                 lr: float, weight_decay: float = 0.0) -> None:
    """SGD step with decoupled L2: p <- p - lr * (g + wd * p)."""
    for name, t in params.items():
        g = grads[name]
        if g.shape != t.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        new = t.data - lr * (g + weight_decay * t.data)
        if not np.all(np.isfinite(new)):
            raise NonFiniteError(f"non-finite update for parameter {name}")
        t.data = new


# -- finite-difference verification ------------------------------------------

@dataclass
class FiniteDiffReport:
    max_rel_err: float
    worst: tuple[str, int] | None
    n_checked: int
    n_kink_skipped: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_err < self.tol


def finite_diff_check(params: dict[str, Tensor], loss_fn, h: float = 1e-4,
                      tol: float = 1e-4, rng=None, n_coords: int = 50,
                      denom_floor: float = 1e-2) -> FiniteDiffReport:
    """Central-difference check of analytic gradients on sampled coordinates.

    Coordinates whose one-sided slopes disagree by more than 1% (a hinge or
    activation kink inside the +-h window) are skipped, not failed.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    grads = compute_gradients(params, loss_fn())

    flat: list[tuple[str, int]] = []
    for name, t in params.items():
        flat.extend((name, i) for i in range(t.data.size))
    if len(flat) > n_coords:
        chosen = rng.choice(len(flat), size=n_coords, replace=False)
        coords = [flat[i] for i in sorted(chosen)]
    else:
        coords = flat

    f0 = loss_fn().item()
    max_rel, worst, kinks, checked = 0.0, None, 0, 0
    for name, idx in coords:
        t = params[name]
        orig = t.data.flat[idx]
        t.data.flat[idx] = orig + h
        fp = loss_fn().item()
        t.data.flat[idx] = orig - h
        fm = loss_fn().item()
        t.data.flat[idx] = orig

        d_plus = (fp - f0) / h
        d_minus = (f0 - fm) / h
        slope_scale = max(abs(d_plus), abs(d_minus), denom_floor)
        if abs(d_plus - d_minus) > 1e-2 * slope_scale:
            kinks += 1
            continue
        fd = (fp - fm) / (2.0 * h)
        analytic = grads[name].flat[idx]
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), denom_floor)
        checked += 1
        if rel > max_rel:
            max_rel, worst = rel, (name, idx)
    return FiniteDiffReport(max_rel_err=max_rel, worst=worst, n_checked=checked,
                            n_kink_skipped=kinks, tol=tol)


# -- checkpoints --------------------------------------------------------------

_MAGIC = b"GOTHAM1\n"


def save_model(model: ModelState, path) -> None:
    """JSON header line + little-endian float64 blob; bit-exact round trip."""
    params = named_parameters(model)
    entries = [{"name": k, "shape": list(v.data.shape)} for k, v in params.items()]
    header = {
        "params": entries,
        "gnn_negative_slope": model.gnn.negative_slope,
        "gnn_backbone": model.gnn.backbone,
        "mlp_negative_slope": model.mlp.negative_slope if model.mlp else None,
        "csd_projection_shape": (list(model.csd_projection.shape)
                                 if model.csd_projection is not None else None),
        "seed": model.seed,
        "extra": model.extra,
    }
    blob = b"".join(np.ascontiguousarray(v.data, dtype="<f8").tobytes()
                    for v in params.values())
    if model.csd_projection is not None:
        blob += np.ascontiguousarray(model.csd_projection, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        hdr = json.dumps(header, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        fh.write(blob)


def load_model(path) -> ModelState:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        blob = fh.read()

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 8
        arr = np.frombuffer(blob[offset:offset + size], dtype="<f8").reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
        offset += size
    proj = None
    if header["csd_projection_shape"] is not None:
        shape = tuple(header["csd_projection_shape"])
        size = int(np.prod(shape)) * 8
        proj = np.frombuffer(blob[offset:offset + size], dtype="<f8").reshape(shape).copy()
        offset += size

    gnn_layers: list[Layer] = []
    i = 0
    while f"gnn.{i}.weight" in arrays:
        gnn_layers.append(Layer(
            ad.parameter(arrays[f"gnn.{i}.weight"]),
            ad.parameter(arrays[f"gnn.{i}.bias"]),
            att_src=(ad.parameter(arrays[f"gnn.{i}.att_src"])
                     if f"gnn.{i}.att_src" in arrays else None),
            att_dst=(ad.parameter(arrays[f"gnn.{i}.att_dst"])
                     if f"gnn.{i}.att_dst" in arrays else None)))
        i += 1
    gnn = GnnParams(gnn_layers, header["gnn_negative_slope"], header["gnn_backbone"])

    mlp = None
    if "mlp.0.weight" in arrays:
        mlp_layers: list[Layer] = []
        i = 0
        while f"mlp.{i}.weight" in arrays:
            mlp_layers.append(Layer(ad.parameter(arrays[f"mlp.{i}.weight"]),
                                    ad.parameter(arrays[f"mlp.{i}.bias"])))
            i += 1
        mlp = MlpParams(mlp_layers, header["mlp_negative_slope"])
    return ModelState(gnn=gnn, mlp=mlp, csd_projection=proj,
                      seed=header["seed"], extra=header.get("extra", {}))
