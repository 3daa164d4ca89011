"""Scene graph autoencoder producing unit-norm scene embeddings.

Heterogeneous per-step node/edge features are projected by family-shared
MLPs, augmented with semantic and temporal-position embeddings, mean-pooled
over steps, refined by L gated multi-head attention layers (keys/values from
neighbor states concatenated with incoming-edge states), and read out at the
ego node. Training jointly minimizes Huber reconstruction of all node
sequences, a two-view contrastive term over random rigid perturbations, a
supervised contrastive term over (command, overlap) labels, and a pairwise
metric regression head.

Everything runs in float64 on CPU; internal MLPs use tanh so the objective is
smooth and analytic gradients can be checked against central finite
differences. ``loss_gradient`` differentiates via autograd; the finite
difference oracle lives in the test suite and stays independent of it.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from autoscale.rng import derive_rng
from autoscale.scenes import (
    DYNAMIC_NODE_KINDS,
    Dataset,
    NodeKind,
    SceneGraph,
)

logger = logging.getLogger(__name__)

torch.set_default_dtype(torch.float64)

NODE_KIND_ORDER = tuple(NodeKind)
_KIND_INDEX = {k: i for i, k in enumerate(NODE_KIND_ORDER)}

PARAMS_MAGIC = b"GRAE"
PARAMS_VERSION = 1


class EncoderError(RuntimeError):
    pass


class TrainingDiverged(EncoderError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    hidden_dim: int = 128
    num_layers: int = 2
    num_heads: int = 4
    t_len: int = 12
    t_hist: int = 8
    t_fut: int = 4
    mlp_hidden: int = 64
    metric_dim: int = 10
    huber_delta: float = 1.0
    temperature: float = 0.1
    lambda_weight: float = 5.0
    # fixed per-channel input scaling ([x, y, theta, kappa, nu]); meters are
    # damped so tanh layers start in their linear range
    input_scale: tuple[float, ...] = (0.05, 0.05, 1.0, 2.0, 0.1)
    # augmentation ranges: translation +-2 m per axis, rotation +-pi/6
    aug_translation: float = 2.0
    aug_rotation: float = math.pi / 6.0

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.t_hist + self.t_fut != self.t_len:
            raise ValueError("t_hist + t_fut must equal t_len")


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    simclr: float
    supcon: float
    metric: float
    total: float
    lambda_weight: float

    def __post_init__(self):
        expect = self.recon + self.lambda_weight * (self.simclr + self.supcon + self.metric)
        if abs(self.total - expect) > 1e-9:
            raise ValueError("loss breakdown identity violated")


# --- graph tensors -----------------------------------------------------------


@dataclass
class GraphTensors:
    """Torch view of one scene graph, grouped by node family."""

    kind_ids: torch.Tensor  # (n,) long
    dyn_index: torch.Tensor  # (n_dyn,) long, positions in node order
    map_index: torch.Tensor  # (n_map,) long
    dyn_feats: torch.Tensor  # (n_dyn, t_len, 5)
    map_feats: torch.Tensor  # (n_map, t_len, 4)
    edge_feats: torch.Tensor  # (m, t_len, 4)
    edge_src: torch.Tensor  # (m,) long
    edge_dst: torch.Tensor  # (m,) long
    ego_index: int
    t_len: int

    @property
    def num_nodes(self) -> int:
        return int(self.kind_ids.shape[0])

    @classmethod
    def from_scene_graph(cls, g: SceneGraph) -> "GraphTensors":
        kind_ids, dyn_index, map_index = [], [], []
        dyn_feats, map_feats = [], []
        for i, node in enumerate(g.nodes):
            kind_ids.append(_KIND_INDEX[node.kind])
            if node.kind in DYNAMIC_NODE_KINDS:
                dyn_index.append(i)
                dyn_feats.append(node.sequence)
            else:
                map_index.append(i)
                map_feats.append(node.sequence)
        edge_feats = [e.sequence for e in g.edges]
        return cls(
            kind_ids=torch.tensor(kind_ids, dtype=torch.long),
            dyn_index=torch.tensor(dyn_index, dtype=torch.long),
            map_index=torch.tensor(map_index, dtype=torch.long),
            dyn_feats=torch.tensor(np.array(dyn_feats).reshape(len(dyn_feats), g.t_len, 5)),
            map_feats=torch.tensor(np.array(map_feats).reshape(len(map_feats), g.t_len, 4)),
            edge_feats=torch.tensor(np.array(edge_feats).reshape(len(edge_feats), g.t_len, 4)),
            edge_src=torch.tensor([e.src for e in g.edges], dtype=torch.long),
            edge_dst=torch.tensor([e.dst for e in g.edges], dtype=torch.long),
            ego_index=g.ego_index,
            t_len=g.t_len,
        )


def _wrap_angle_t(theta: torch.Tensor) -> torch.Tensor:
    return -(torch.remainder(-theta + math.pi, 2.0 * math.pi) - math.pi)


def augment_graph(gt: GraphTensors, rng: np.random.Generator, config: EncoderConfig) -> GraphTensors:
    """Rigid random translation + rotation of all polylines of one scene."""
    phi = float(rng.uniform(-config.aug_rotation, config.aug_rotation))
    tx, ty = rng.uniform(-config.aug_translation, config.aug_translation, size=2)
    c, s = math.cos(phi), math.sin(phi)

    def move(feats: torch.Tensor) -> torch.Tensor:
        out = feats.clone()
        x, y = feats[..., 0], feats[..., 1]
        out[..., 0] = c * x - s * y + tx
        out[..., 1] = s * x + c * y + ty
        out[..., 2] = _wrap_angle_t(feats[..., 2] + phi)
        return out

    def rotate_rel(feats: torch.Tensor) -> torch.Tensor:
        out = feats.clone()
        x, y = feats[..., 0], feats[..., 1]
        out[..., 0] = c * x - s * y
        out[..., 1] = s * x + c * y
        return out

    return GraphTensors(
        kind_ids=gt.kind_ids,
        dyn_index=gt.dyn_index,
        map_index=gt.map_index,
        dyn_feats=move(gt.dyn_feats),
        map_feats=move(gt.map_feats),
        edge_feats=rotate_rel(gt.edge_feats),
        edge_src=gt.edge_src,
        edge_dst=gt.edge_dst,
        ego_index=gt.ego_index,
        t_len=gt.t_len,
    )


# --- model -------------------------------------------------------------------


def _mlp(in_dim: int, hidden: int, out_dim: int) -> torch.nn.Sequential:
    return torch.nn.Sequential(
        torch.nn.Linear(in_dim, hidden),
        torch.nn.Tanh(),
        torch.nn.Linear(hidden, out_dim),
    )


class GatedAttentionLayer(torch.nn.Module):
    """h_i' = h_i + sigmoid(g_i) * MHA(h_i, {[h_j ; e_ji]}) over in-edges.

    A node with no in-edges is returned unchanged (attention over the empty
    neighborhood is the zero vector).
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.query = torch.nn.Linear(dim, dim, bias=False)
        self.key = torch.nn.Linear(2 * dim, dim, bias=False)
        self.value = torch.nn.Linear(2 * dim, dim, bias=False)
        self.out = torch.nn.Linear(dim, dim, bias=False)
        self.gate = torch.nn.Parameter(torch.zeros(dim))

    def forward(self, h: torch.Tensor, e: torch.Tensor, src: torch.Tensor, dst: torch.Tensor):
        n = h.shape[0]
        if e.shape[0] == 0:
            return h
        q = self.query(h).view(n, self.heads, self.head_dim)
        kv_in = torch.cat([h[src], e], dim=1)
        k = self.key(kv_in).view(-1, self.heads, self.head_dim)
        v = self.value(kv_in).view(-1, self.heads, self.head_dim)
        logits = (q[dst] * k).sum(-1) / math.sqrt(self.head_dim)  # (m, heads)
        # softmax per destination node; the max shift cancels analytically
        with torch.no_grad():
            maxes = torch.zeros(n, self.heads).scatter_reduce(
                0, dst.unsqueeze(1).expand(-1, self.heads), logits.detach(),
                reduce="amax", include_self=False,
            )
        ex = torch.exp(logits - maxes[dst])
        denom = torch.zeros(n, self.heads).index_add(0, dst, ex)
        weights = ex / denom[dst]
        msg = torch.zeros(n, self.heads, self.head_dim).index_add(0, dst, weights.unsqueeze(-1) * v)
        mha = self.out(msg.reshape(n, self.dim))
        return h + torch.sigmoid(self.gate) * mha


class GraphAutoencoder(torch.nn.Module):
    """Parameter groups: family-shared node/edge MLPs, semantic and temporal
    position embeddings, L gated attention layers, per-family decoders, and
    the pairwise metric head."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.node_mlp_dyn = _mlp(5, config.mlp_hidden, d)
        self.node_mlp_map = _mlp(4, config.mlp_hidden, d)
        self.edge_mlp = _mlp(4, config.mlp_hidden, d)
        self.sem_emb = torch.nn.Parameter(torch.zeros(len(NODE_KIND_ORDER), d))
        self.pos_emb = torch.nn.Parameter(torch.zeros(config.t_len, d))
        self.layers = torch.nn.ModuleList(
            GatedAttentionLayer(d, config.num_heads) for _ in range(config.num_layers)
        )
        self.decoder_dyn = _mlp(d, config.mlp_hidden, config.t_len * 5)
        self.decoder_map = _mlp(d, config.mlp_hidden, config.t_len * 4)
        self.metric_head = _mlp(d, config.mlp_hidden, config.metric_dim)
        scale = torch.tensor(config.input_scale)
        self.register_buffer("dyn_scale", scale[:5], persistent=False)
        self.register_buffer("map_scale", scale[:4], persistent=False)
        self.register_buffer("edge_scale", scale[:4], persistent=False)
        self._init_weights(seed)

    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(seed & 0x7FFFFFFF)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if p.ndim >= 2:
                    fan_in = p.shape[1]
                    p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=gen)
                elif "emb" in name:
                    p.normal_(0.0, 0.1, generator=gen)
                else:  # biases and gates start at zero (gate opens halfway)
                    p.zero_()

    # -- forward pieces ---------------------------------------------------

    def encode_features(self, gt: GraphTensors) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-node and per-edge hidden states in R^d: family MLP per step,
        plus temporal position embedding, mean over steps; nodes also add
        their semantic (kind) embedding."""
        if gt.t_len != self.config.t_len:
            raise EncoderError(
                f"graph t_len {gt.t_len} does not match configured {self.config.t_len}"
            )
        d = self.config.hidden_dim
        h = torch.zeros(gt.num_nodes, d)
        if gt.dyn_index.numel():
            enc = self.node_mlp_dyn(gt.dyn_feats * self.dyn_scale) + self.pos_emb
            h = h.index_copy(0, gt.dyn_index, enc.mean(dim=1))
        if gt.map_index.numel():
            enc = self.node_mlp_map(gt.map_feats * self.map_scale) + self.pos_emb
            h = h.index_copy(0, gt.map_index, enc.mean(dim=1))
        h = h + self.sem_emb[gt.kind_ids]
        if gt.edge_feats.shape[0]:
            e = (self.edge_mlp(gt.edge_feats * self.edge_scale) + self.pos_emb).mean(dim=1)
        else:
            e = torch.zeros(0, d)
        return h, e

    def transformer_layer(self, h, e, gt: GraphTensors, layer_index: int) -> torch.Tensor:
        return self.layers[layer_index](h, e, gt.edge_src, gt.edge_dst)

    def node_states(self, gt: GraphTensors) -> torch.Tensor:
        h, e = self.encode_features(gt)
        for layer in self.layers:
            h = layer(h, e, gt.edge_src, gt.edge_dst)
        return h

    def scene_embedding(self, gt: GraphTensors) -> torch.Tensor:
        """Unit-norm final ego-node state."""
        h = self.node_states(gt)
        ego = h[gt.ego_index]
        norm = torch.linalg.vector_norm(ego)
        if norm.detach().item() < 1e-12:
            raise EncoderError("degenerate parameters: ego state has zero norm")
        return ego / norm

    def reconstruct(self, gt: GraphTensors) -> tuple[torch.Tensor, torch.Tensor]:
        """Predicted (dyn, map) node sequences with input shapes."""
        h = self.node_states(gt)
        t = self.config.t_len
        dyn = self.decoder_dyn(h[gt.dyn_index]).view(-1, t, 5)
        mp = self.decoder_map(h[gt.map_index]).view(-1, t, 4)
        return dyn, mp


# --- losses ------------------------------------------------------------------


def huber(residual: torch.Tensor, delta: float) -> torch.Tensor:
    absr = residual.abs()
    return torch.where(absr <= delta, 0.5 * residual**2, delta * (absr - 0.5 * delta))


def loss_recon(pred: torch.Tensor, target: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Sum of elementwise Huber over nodes and steps."""
    if pred.shape != target.shape:
        raise EncoderError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return huber(pred - target, delta).sum()


def loss_simclr(view_a: torch.Tensor, view_b: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean over view-A anchors of -log softmax over who is the paired view-B
    embedding; the other scenes' view-B embeddings are the negatives."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    logits = (view_a @ view_b.T) / tau
    targets = torch.arange(view_a.shape[0])
    return torch.nn.functional.cross_entropy(logits, targets)


def loss_supcon(embeddings: torch.Tensor, labels: Sequence[str], tau: float) -> torch.Tensor:
    """Supervised contrastive loss over joint semantic labels; anchors with
    no positives are skipped, and the denominator runs over all other
    samples."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    n = embeddings.shape[0]
    if n < 2:
        return torch.zeros(())
    sims = (embeddings @ embeddings.T) / tau
    labels = list(labels)
    total = torch.zeros(())
    for k in range(n):
        pos = [m for m in range(n) if m != k and labels[m] == labels[k]]
        if not pos:
            continue
        others = [m for m in range(n) if m != k]
        denom = torch.logsumexp(sims[k, others], dim=0)
        total = total - (sims[k, pos] - denom).mean()
    return total / n


def loss_metric(
    embeddings: torch.Tensor,
    metric_vectors: Sequence[np.ndarray | None],
    head: torch.nn.Module,
) -> tuple[torch.Tensor, int]:
    """Mean over valid pairs (both metric vectors present, i < j) of the
    squared error between the head's prediction on |z_i - z_j| and the true
    elementwise |m_i - m_j|. Returns (loss, pair count); no pairs gives 0."""
    valid = [i for i, m in enumerate(metric_vectors) if m is not None]
    if len(valid) < 2:
        return torch.zeros(()), 0
    ii, jj = zip(*[(a, b) for x, a in enumerate(valid) for b in valid[x + 1 :]])
    ii, jj = list(ii), list(jj)
    feats = (embeddings[ii] - embeddings[jj]).abs()
    pred = head(feats)
    true = torch.tensor(
        np.abs(np.stack([metric_vectors[a] for a in ii]) - np.stack([metric_vectors[b] for b in jj]))
    )
    return ((pred - true) ** 2).sum(dim=1).mean(), len(ii)


@dataclass
class BatchItem:
    graph: GraphTensors
    label: str | None = None
    metric: np.ndarray | None = None


def batch_from_dataset(dataset: Dataset, ids: Iterable[str], cache: dict | None = None):
    items = []
    for token_id in ids:
        if cache is not None and token_id in cache:
            gt = cache[token_id]
        else:
            gt = GraphTensors.from_scene_graph(dataset.graphs[token_id])
            if cache is not None:
                cache[token_id] = gt
        labels = dataset.labels.get(token_id)
        metric = dataset.metrics.get(token_id)
        items.append(
            BatchItem(
                graph=gt,
                label=labels.joint() if labels else None,
                metric=metric.as_array() if metric else None,
            )
        )
    return items


def total_loss(
    model: GraphAutoencoder,
    batch: Sequence[BatchItem],
    lambda_weight: float | None = None,
    tau: float | None = None,
    seed: int = 0,
) -> tuple[LossBreakdown, torch.Tensor]:
    """Joint objective over one batch: per-scene reconstruction sums averaged
    over the batch, plus lambda-weighted contrastive and metric terms on the
    scene embeddings. The two contrastive views come from seeded rigid
    augmentations, so a fixed seed makes the objective deterministic."""
    cfg = model.config
    lam = cfg.lambda_weight if lambda_weight is None else lambda_weight
    tau = cfg.temperature if tau is None else tau
    if lam < 0:
        raise ValueError("lambda_weight must be nonnegative")

    recon = torch.zeros(())
    z_orig, z_a, z_b = [], [], []
    for i, item in enumerate(batch):
        gt = item.graph
        h = model.node_states(gt)
        t = cfg.t_len
        if gt.dyn_index.numel():
            pred = model.decoder_dyn(h[gt.dyn_index]).view(-1, t, 5)
            recon = recon + loss_recon(pred, gt.dyn_feats, cfg.huber_delta)
        if gt.map_index.numel():
            pred = model.decoder_map(h[gt.map_index]).view(-1, t, 4)
            recon = recon + loss_recon(pred, gt.map_feats, cfg.huber_delta)
        ego = h[gt.ego_index]
        norm = torch.linalg.vector_norm(ego)
        if norm.detach().item() < 1e-12:
            raise EncoderError("degenerate parameters: ego state has zero norm")
        z_orig.append(ego / norm)
        rng = derive_rng(seed, "augment", i)
        z_a.append(model.scene_embedding(augment_graph(gt, rng, cfg)))
        z_b.append(model.scene_embedding(augment_graph(gt, rng, cfg)))
    recon = recon / len(batch)

    simclr = loss_simclr(torch.stack(z_a), torch.stack(z_b), tau)
    labeled = [i for i, item in enumerate(batch) if item.label is not None]
    if len(labeled) >= 2:
        supcon = loss_supcon(
            torch.stack([z_orig[i] for i in labeled]), [batch[i].label for i in labeled], tau
        )
    else:
        supcon = torch.zeros(())
    metric, n_pairs = loss_metric(
        torch.stack(z_orig), [item.metric for item in batch], model.metric_head
    )
    if n_pairs == 0:
        logger.debug("total_loss: no valid metric pairs in batch")

    total = recon + lam * (simclr + supcon + metric)
    parts = [t.detach().item() for t in (recon, simclr, supcon, metric)]
    breakdown = LossBreakdown(
        recon=parts[0],
        simclr=parts[1],
        supcon=parts[2],
        metric=parts[3],
        total=parts[0] + lam * (parts[1] + parts[2] + parts[3]),
        lambda_weight=lam,
    )
    return breakdown, total


def loss_gradient(
    model: GraphAutoencoder,
    batch: Sequence[BatchItem],
    lambda_weight: float | None = None,
    tau: float | None = None,
    seed: int = 0,
) -> dict[str, torch.Tensor]:
    """Gradient of the batch objective for every parameter group."""
    model.zero_grad(set_to_none=True)
    _, total = total_loss(model, batch, lambda_weight, tau, seed)
    total.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise EncoderError(f"non-finite gradient in parameter block {name!r}")
        grads[name] = g.clone()
    model.zero_grad(set_to_none=True)
    return grads


# --- training ----------------------------------------------------------------


@dataclass
class TrainSettings:
    steps: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-2  # plain gradient descent, fixed step
    seed: int = 0


def train_encoder(
    dataset: Dataset,
    config: EncoderConfig,
    settings: TrainSettings | None = None,
) -> tuple[GraphAutoencoder, list[float]]:
    """Plain fixed-step gradient descent over sequentially shuffled batches.

    Deterministic under the settings seed; raises TrainingDiverged (with a
    hint to lower the step) if the loss goes non-finite.
    """
    settings = settings or TrainSettings()
    ids = sorted(dataset.graphs)
    if not ids:
        raise ValueError("dataset has no scenes")
    model = GraphAutoencoder(config, seed=settings.seed)
    cache: dict[str, GraphTensors] = {}
    history: list[float] = []
    order: list[str] = []
    epoch = 0
    for step in range(settings.steps):
        if len(order) < settings.batch_size:
            rng = derive_rng(settings.seed, "shuffle", epoch)
            order.extend(np.array(ids)[rng.permutation(len(ids))].tolist())
            epoch += 1
        batch_ids, order = order[: settings.batch_size], order[settings.batch_size :]
        batch = batch_from_dataset(dataset, batch_ids, cache)
        model.zero_grad(set_to_none=True)
        _, total = total_loss(model, batch, seed=settings.seed * 1_000_003 + step)
        if not torch.isfinite(total):
            raise TrainingDiverged(
                f"loss became non-finite at step {step}; try a smaller learning rate"
            )
        total.backward()
        with torch.no_grad():
            for p in model.parameters():
                if p.grad is not None:
                    p.add_(p.grad, alpha=-settings.learning_rate)
        history.append(total.detach().item())
    return model, history


# --- serialization -----------------------------------------------------------


def save_params(path, model: GraphAutoencoder) -> None:
    """Binary layout: magic "GRAE", u32 version, then one length-prefixed
    little-endian f32 block per parameter group in state_dict order."""
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<I", PARAMS_VERSION))
        for _, tensor in model.state_dict().items():
            data = tensor.detach().numpy().astype("<f4").ravel()
            fh.write(struct.pack("<I", data.size))
            fh.write(data.tobytes())


def load_params(path, config: EncoderConfig) -> GraphAutoencoder:
    """Rebuild a model for ``config`` from a file written by save_params.

    The format stores no shapes; group order and sizes come from the config,
    and any mismatch is an error.
    """
    model = GraphAutoencoder(config, seed=0)
    with open(path, "rb") as fh:
        if fh.read(4) != PARAMS_MAGIC:
            raise EncoderError(f"{path}: bad magic; not an encoder params file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != PARAMS_VERSION:
            raise EncoderError(f"{path}: unsupported params version {version}")
        state = model.state_dict()
        for name, tensor in state.items():
            header = fh.read(4)
            if len(header) < 4:
                raise EncoderError(f"{path}: truncated before block {name!r}")
            (count,) = struct.unpack("<I", header)
            if count != tensor.numel():
                raise EncoderError(
                    f"{path}: block {name!r} has {count} values, config expects {tensor.numel()}"
                )
            raw = fh.read(4 * count)
            if len(raw) < 4 * count:
                raise EncoderError(f"{path}: truncated inside block {name!r}")
            values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(tensor.shape)
            state[name] = torch.from_numpy(values.copy())
        if fh.read(1):
            raise EncoderError(f"{path}: trailing bytes after final block")
    model.load_state_dict(state)
    return model


def write_embeddings_csv(path, embeddings: dict[str, np.ndarray]) -> None:
    import csv
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = sorted(embeddings)
    dim = len(np.asarray(embeddings[ids[0]]).ravel()) if ids else 0
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token_id"] + [f"e{i}" for i in range(dim)])
        for token_id in ids:
            writer.writerow([token_id] + [repr(float(v)) for v in np.asarray(embeddings[token_id])])


def read_embeddings_csv(path) -> dict[str, np.ndarray]:
    import csv

    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "token_id":
            raise ValueError(f"{path}: not an embeddings CSV")
        for row in reader:
            out[row[0]] = np.array([float(v) for v in row[1:]])
    return out


# --- estimator wrapper -------------------------------------------------------


class SceneEncoder(BaseEstimator, TransformerMixin):
    """sklearn-style wrapper: fit trains the autoencoder on a Dataset, and
    transform maps scene graphs (or a Dataset) to unit-norm embeddings."""

    def __init__(
        self,
        hidden_dim: int = 128,
        num_layers: int = 2,
        num_heads: int = 4,
        t_len: int = 12,
        t_hist: int = 8,
        t_fut: int = 4,
        mlp_hidden: int = 64,
        metric_dim: int = 10,
        huber_delta: float = 1.0,
        temperature: float = 0.1,
        lambda_weight: float = 5.0,
        steps: int = 200,
        batch_size: int = 8,
        learning_rate: float = 1e-2,
        seed: int = 0,
    ):
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.t_len = t_len
        self.t_hist = t_hist
        self.t_fut = t_fut
        self.mlp_hidden = mlp_hidden
        self.metric_dim = metric_dim
        self.huber_delta = huber_delta
        self.temperature = temperature
        self.lambda_weight = lambda_weight
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def _config(self) -> EncoderConfig:
        return EncoderConfig(
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            t_len=self.t_len,
            t_hist=self.t_hist,
            t_fut=self.t_fut,
            mlp_hidden=self.mlp_hidden,
            metric_dim=self.metric_dim,
            huber_delta=self.huber_delta,
            temperature=self.temperature,
            lambda_weight=self.lambda_weight,
        )

    def fit(self, X: Dataset, y=None):
        settings = TrainSettings(
            steps=self.steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
        )
        self.config_ = self._config()
        self.model_, self.loss_history_ = train_encoder(X, self.config_, settings)
        return self

    def transform(self, X) -> np.ndarray:
        graphs: list[SceneGraph]
        if isinstance(X, Dataset):
            graphs = [X.graphs[t] for t in sorted(X.graphs)]
        elif isinstance(X, SceneGraph):
            graphs = [X]
        else:
            graphs = list(X)
        out = np.empty((len(graphs), self.config_.hidden_dim))
        with torch.no_grad():
            for i, g in enumerate(graphs):
                gt = GraphTensors.from_scene_graph(g)
                out[i] = self.model_.scene_embedding(gt).numpy()
        return out

    def embed_tokens(self, dataset: Dataset) -> dict[str, np.ndarray]:
        ids = sorted(dataset.graphs)
        vecs = self.transform([dataset.graphs[t] for t in ids])
        return dict(zip(ids, vecs))
