"""Group-aware temporal fusion, score prediction, training, and export.

Group embeddings act as attention queries and keys over the per-clip
video features (the values).  Each fusion layer projects queries and
keys, forms per-head row-softmax attention over clips, applies the
weights to the values, and finishes with a residual add-and-normalize
block.  Mean-pooling the fused clips feeds a small sigmoid regression
head; the baseline variant skips fusion and pools raw clip features.

Training minimizes full-batch MSE on range-normalized scores with plain
gradient descent.  Batch-norm statistics are taken over the whole
training batch (all videos x clips): per-video statistics would center
every video to the same pooled vector and kill the learning signal.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import graph as gg
from .data import seeded_rng

__all__ = [
    "GoatConfig",
    "Diagnostics",
    "GoatModel",
    "AttentionTrace",
    "MissingActorFramesError",
    "DivergenceError",
    "CheckpointError",
    "init_model",
    "attention_layer",
    "temporal_fuse",
    "predict_score",
    "train_model",
    "training_loss_fn",
    "flatten_params",
    "export_attention",
    "read_attention_export",
    "write_checkpoint",
    "read_checkpoint",
    "save_model",
    "load_model",
]


class MissingActorFramesError(ValueError):
    """Group-aware prediction needs per-clip actor frames."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch
        self.loss = loss


class CheckpointError(ValueError):
    """Malformed or incompatible model checkpoint."""


@dataclass(frozen=True)
class GoatConfig:
    """Shapes and hyperparameters of the fusion model."""

    feature_dim: int = 64          # group embedding / attention width
    value_dim: int = 64            # clip feature width (projected if different)
    attention_layers: int = 2
    heads: int = 4
    gcn_layers: int = 1
    head_hidden: int = 32
    distance_threshold: float = 0.3
    activation: str = "relu"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.feature_dim < 1 or self.value_dim < 1 or self.head_hidden < 1:
            raise ValueError("dimensions must be positive")
        if self.heads < 1 or self.feature_dim % self.heads != 0:
            raise ValueError(
                f"feature_dim {self.feature_dim} must be divisible by "
                f"heads {self.heads}")
        if self.attention_layers < 0 or self.gcn_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.distance_threshold <= 0.0:
            raise ValueError("distance threshold must be positive")


@dataclass(frozen=True)
class Diagnostics:
    """Test hooks.

    ``identity_attention`` pins every attention matrix to the identity.
    ``bypass_norm`` disables the residual add-and-normalize block so a
    layer reduces to the bare weighted fusion; with both switches on the
    whole pipeline collapses to the average-pooling baseline.
    """

    identity_attention: bool = False
    bypass_norm: bool = False


@dataclass
class AttentionTrace:
    """Per-layer clip-to-clip attention matrices (head-averaged)."""

    layers: list = field(default_factory=list)

    def __post_init__(self):
        for i, mat in enumerate(self.layers):
            mat = np.asarray(mat, dtype=np.float64)
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
                raise ValueError(f"attention matrix {i} is not square")
            if not np.allclose(mat.sum(axis=1), 1.0, atol=1e-9):
                raise ValueError(f"attention matrix {i} rows do not sum to 1")
            self.layers[i] = mat

    @property
    def salience(self) -> np.ndarray:
        """How much each clip is attended to: column mean of the last layer."""
        if not self.layers:
            raise ValueError("empty attention trace has no salience")
        return self.layers[-1].mean(axis=0)


class GoatModel:
    """Parameter arrays plus batch-norm running statistics.

    ``variant`` is "goat" (graph + fusion + head) or "baseline" (head on
    mean-pooled clip features).  Parameters are canonical numpy arrays;
    every forward pass wraps them into fresh tape nodes.
    """

    def __init__(self, variant: str, config: GoatConfig, params: dict,
                 bn_states: list):
        if variant not in ("goat", "baseline"):
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.config = config
        self.params = params
        self.bn_states = bn_states

    def copy(self) -> "GoatModel":
        return GoatModel(self.variant, self.config,
                         {k: v.copy() for k, v in self.params.items()},
                         [s.copy() for s in self.bn_states])

    def param_names(self) -> list:
        return sorted(self.params)


def init_model(config: GoatConfig, variant: str = "goat",
               seed: int = 0) -> GoatModel:
    """Seeded Gaussian init, std 1/sqrt(fan_in); unit/zero affine for BN."""
    rng = seeded_rng(seed, "init")
    params: dict[str, np.ndarray] = {}

    def dense(name, rows, cols):
        params[name] = rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, cols))

    d, dv = config.feature_dim, config.value_dim
    bn_states = []
    if variant == "goat":
        dense("graph.src", d, d)
        dense("graph.dst", d, d)
        for i in range(config.gcn_layers):
            dense(f"graph.gcn{i}", d, d)
        if dv != d:
            dense("proj.value", dv, d)
        for layer in range(config.attention_layers):
            dense(f"attn{layer}.query", d, d)
            dense(f"attn{layer}.key", d, d)
            params[f"attn{layer}.gamma"] = np.ones((1, d))
            params[f"attn{layer}.beta"] = np.zeros((1, d))
            bn_states.append(ad.BatchNormState(d, config.bn_momentum, config.bn_eps))
        head_in = d
    else:
        head_in = dv
    dense("head.w1", head_in, config.head_hidden)
    params["head.b1"] = np.zeros((1, config.head_hidden))
    dense("head.w2", config.head_hidden, 1)
    params["head.b2"] = np.zeros((1, 1))
    return GoatModel(variant, config, params, bn_states)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _wrap_params(model: GoatModel) -> dict:
    return {name: ad.parameter(arr) for name, arr in model.params.items()}


def _attention_scores(q, k, v, w_q, w_k, heads: int,
                      identity_attention: bool = False):
    """Projected queries/keys, per-head attention applied to the values.

    Returns (q', k', weighted values, head-averaged attention matrix);
    the residual add-and-normalize is left to the caller so training can
    normalize over a whole batch of videos at once.
    """
    if q.shape != k.shape:
        raise ValueError(f"query/key shape mismatch: {q.shape} vs {k.shape}")
    if v.shape != q.shape:
        raise ValueError(f"value shape {v.shape} must match query {q.shape}")
    q2 = ad.matmul(q, w_q)
    k2 = ad.matmul(k, w_k)
    t, d = q2.shape
    if d % heads != 0:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    outs, mats = [], []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        if identity_attention:
            weights = ad.constant(np.eye(t))
        else:
            qh = ad.slice_cols(q2, lo, hi)
            kh = ad.slice_cols(k2, lo, hi)
            logits = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
            weights = ad.softmax_rows(logits)
        outs.append(ad.matmul(weights, ad.slice_cols(v, lo, hi)))
        mats.append(weights.value)
    attended = ad.concat_cols(outs) if heads > 1 else outs[0]
    return q2, k2, attended, np.mean(mats, axis=0)


def attention_layer(q, k, v, w_q, w_k, gamma, beta, bn_state, heads: int,
                    mode: str = "train", identity_attention: bool = False,
                    bypass_norm: bool = False, update_running: bool = True):
    """One fusion layer over a single video's clips.

    Returns (q', k', v', attention matrix).  Train mode normalizes over
    this video's clips and therefore needs at least two of them.
    """
    q2, k2, attended, trace = _attention_scores(q, k, v, w_q, w_k, heads,
                                                identity_attention)
    if bypass_norm:
        return q2, k2, attended, trace
    fused = ad.batch_norm(ad.add(attended, v), gamma, beta, bn_state,
                          mode=mode, update_running=update_running)
    return q2, k2, fused, trace


def _layer_params(nodes: dict, layer: int) -> tuple:
    return (nodes[f"attn{layer}.query"], nodes[f"attn{layer}.key"],
            nodes[f"attn{layer}.gamma"], nodes[f"attn{layer}.beta"])


def temporal_fuse(group, values, model: GoatModel, nodes: dict,
                  mode: str = "eval", diagnostics: Diagnostics = Diagnostics(),
                  update_running: bool = True):
    """Apply all fusion layers to one video; returns (fused, trace)."""
    q = k = group
    v = values
    layer_traces = []
    for layer in range(model.config.attention_layers):
        w_q, w_k, gamma, beta = _layer_params(nodes, layer)
        q, k, v, trace = attention_layer(
            q, k, v, w_q, w_k, gamma, beta, model.bn_states[layer],
            model.config.heads, mode=mode,
            identity_attention=diagnostics.identity_attention,
            bypass_norm=diagnostics.bypass_norm,
            update_running=update_running)
        layer_traces.append(trace)
    return v, AttentionTrace(layer_traces)


def _head(x, nodes: dict):
    hidden = ad.relu(ad.add(ad.matmul(x, nodes["head.w1"]), nodes["head.b1"]))
    return ad.sigmoid(ad.add(ad.matmul(hidden, nodes["head.w2"]), nodes["head.b2"]))


def _group_sequence(model: GoatModel, nodes: dict, sample):
    cfg = model.config
    gcn = [nodes[f"graph.gcn{i}"] for i in range(cfg.gcn_layers)]
    return gg.group_embedding_sequence(
        sample.actor_frames, cfg.distance_threshold,
        nodes["graph.src"], nodes["graph.dst"], gcn, cfg.activation)


def _value_sequence(model: GoatModel, nodes: dict, sample):
    values = ad.constant(sample.clip_features)
    if "proj.value" in nodes:
        values = ad.matmul(values, nodes["proj.value"])
    return values


def forward_sample(model: GoatModel, nodes: dict, sample, mode: str = "eval",
                   diagnostics: Diagnostics = Diagnostics(),
                   update_running: bool = True):
    """Normalized score prediction node for one sample; goat variant also
    returns the attention trace."""
    if model.variant == "baseline":
        pooled = ad.mean_rows(ad.constant(sample.clip_features))
        return _head(pooled, nodes), None
    if not sample.actor_frames:
        raise MissingActorFramesError(
            f"sample {sample.id}: group-aware prediction needs actor frames")
    group = _group_sequence(model, nodes, sample)
    values = _value_sequence(model, nodes, sample)
    fused, trace = temporal_fuse(group, values, model, nodes, mode=mode,
                                 diagnostics=diagnostics,
                                 update_running=update_running)
    return _head(ad.mean_rows(fused), nodes), trace


def predict_score(sample, model: GoatModel, mode: str = "eval",
                  diagnostics: Diagnostics = Diagnostics()):
    """Predict the normalized score in [0, 1] for one sample.

    Returns (prediction, AttentionTrace or None).  Callers denormalize
    with the manifest's score range.
    """
    nodes = _wrap_params(model)
    yhat, trace = forward_sample(model, nodes, sample, mode=mode,
                                 diagnostics=diagnostics, update_running=False)
    return float(yhat.value[0, 0]), trace


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _batched_training_loss(model: GoatModel, nodes: dict, samples,
                           targets, mode: str = "train",
                           update_running: bool = True):
    """Full-batch MSE with batch-norm statistics over all videos' clips."""
    cfg = model.config
    if model.variant == "baseline":
        losses = []
        for sample, y in zip(samples, targets):
            yhat, _ = forward_sample(model, nodes, sample, mode=mode)
            diff = ad.sub(yhat, ad.constant([[y]]))
            losses.append(ad.mul(diff, diff))
        return ad.mean_all(ad.concat_rows(losses))

    qs, ks, vs, sizes = [], [], [], []
    for sample in samples:
        if not sample.actor_frames:
            raise MissingActorFramesError(
                f"sample {sample.id}: group-aware training needs actor frames")
        group = _group_sequence(model, nodes, sample)
        qs.append(group)
        ks.append(group)
        vs.append(_value_sequence(model, nodes, sample))
        sizes.append(sample.clip_count)

    for layer in range(cfg.attention_layers):
        w_q, w_k, gamma, beta = _layer_params(nodes, layer)
        residuals = []
        for i in range(len(samples)):
            q2, k2, attended, _ = _attention_scores(qs[i], ks[i], vs[i],
                                                    w_q, w_k, cfg.heads)
            qs[i], ks[i] = q2, k2
            residuals.append(ad.add(attended, vs[i]))
        stacked = ad.concat_rows(residuals)
        normalized = ad.batch_norm(stacked, gamma, beta, model.bn_states[layer],
                                   mode=mode, update_running=update_running)
        vs, at = [], 0
        for size in sizes:
            vs.append(ad.slice_rows(normalized, at, at + size))
            at += size

    losses = []
    for i, y in enumerate(targets):
        yhat = _head(ad.mean_rows(vs[i]), nodes)
        diff = ad.sub(yhat, ad.constant([[y]]))
        losses.append(ad.mul(diff, diff))
    return ad.mean_all(ad.concat_rows(losses))


def train_model(samples, score_range, config: GoatConfig,
                variant: str = "goat", epochs: int = 200, lr: float = 1e-2,
                seed: int = 0):
    """Full-batch gradient descent on normalized-score MSE.

    Deterministic for a seed: init, sample order, and updates are all
    fixed.  Raises DivergenceError as soon as the loss leaves the reals.
    Returns (model, per-epoch loss history).
    """
    samples = list(samples)
    if not samples:
        raise ValueError("training set must be nonempty")
    if lr < 0.0:
        raise ValueError("learning rate must be non-negative")
    score_min, score_max = float(score_range[0]), float(score_range[1])
    if score_max <= score_min:
        raise ValueError("score range must be nondegenerate")
    targets = [(s.score - score_min) / (score_max - score_min) for s in samples]

    model = init_model(config, variant=variant, seed=seed)
    history: list[float] = []
    for epoch in range(epochs):
        nodes = _wrap_params(model)
        loss = _batched_training_loss(model, nodes, samples, targets)
        value = float(loss.value[0, 0])
        if not np.isfinite(value):
            raise DivergenceError(epoch, value)
        history.append(value)
        ad.backward(loss)
        for name, node in nodes.items():
            if node.grad is not None:
                model.params[name] = model.params[name] - lr * node.grad
    return model, history


def flatten_params(model: GoatModel):
    """Canonical flat view of all parameters (sorted by name)."""
    names = model.param_names()
    theta = np.concatenate([model.params[n].ravel() for n in names])
    shapes = [(n, model.params[n].shape) for n in names]
    return theta, shapes


def _assign_params(model: GoatModel, theta: np.ndarray) -> None:
    at = 0
    for name in model.param_names():
        shape = model.params[name].shape
        size = int(np.prod(shape))
        model.params[name] = theta[at:at + size].reshape(shape).copy()
        at += size
    if at != theta.size:
        raise ValueError("parameter vector length mismatch")


def training_loss_fn(model: GoatModel, samples, score_range,
                     mode: str = "train"):
    """(theta) -> (loss, grad) over the flattened parameters.

    Running statistics are never touched, so the function is pure and
    safe to probe with finite differences.
    """
    score_min, score_max = float(score_range[0]), float(score_range[1])
    targets = [(s.score - score_min) / (score_max - score_min) for s in samples]
    names = model.param_names()

    def f(theta):
        probe = model.copy()
        _assign_params(probe, np.asarray(theta, dtype=np.float64))
        nodes = _wrap_params(probe)
        loss = _batched_training_loss(probe, nodes, samples, targets,
                                      mode=mode, update_running=False)
        ad.backward(loss)
        grads = []
        for name in names:
            node = nodes[name]
            grads.append((node.grad if node.grad is not None
                          else np.zeros(node.shape)).ravel())
        return float(loss.value[0, 0]), np.concatenate(grads)

    return f


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------

def export_attention(trace: AttentionTrace, path, element_mask=None) -> None:
    """Tidy CSV: T salience records, then one record per weight entry.

    Values are written with 17 significant digits so parsing the file
    reproduces the trace exactly.  An optional element mask (synthetic
    data) is appended as 0/1 records for side-by-side comparison.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["record", "layer", "row", "col", "value"])
        for i, value in enumerate(trace.salience):
            writer.writerow(["salience", "", i, "", f"{value:.17g}"])
        for layer, mat in enumerate(trace.layers):
            for i in range(mat.shape[0]):
                for j in range(mat.shape[1]):
                    writer.writerow(["weight", layer, i, j, f"{mat[i, j]:.17g}"])
        if element_mask is not None:
            for i, flag in enumerate(element_mask):
                writer.writerow(["mask", "", i, "", str(int(bool(flag)))])


def read_attention_export(path) -> dict:
    """Parse an attention CSV back into salience, layers, and mask."""
    salience, weights, mask = {}, {}, {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["record", "layer", "row", "col", "value"]:
            raise ValueError(f"{path}: unexpected attention CSV header")
        for record, layer, row, col, value in reader:
            if record == "salience":
                salience[int(row)] = float(value)
            elif record == "weight":
                weights[(int(layer), int(row), int(col))] = float(value)
            elif record == "mask":
                mask[int(row)] = bool(int(value))
            else:
                raise ValueError(f"{path}: unknown record type {record!r}")
    t = len(salience)
    layer_count = 1 + max((k[0] for k in weights), default=-1)
    layers = []
    for layer in range(layer_count):
        mat = np.empty((t, t))
        for i in range(t):
            for j in range(t):
                mat[i, j] = weights[(layer, i, j)]
        layers.append(mat)
    out = {"salience": np.array([salience[i] for i in range(t)]),
           "layers": layers}
    if mask:
        out["element_mask"] = [mask[i] for i in range(t)]
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"GOAT"
CHECKPOINT_VERSION = 1


def write_checkpoint(kind: str, config: dict, arrays: dict, path,
                     metadata: dict | None = None) -> None:
    """Versioned binary container: JSON shape header + float64 payload."""
    names = sorted(arrays)
    header = {
        "kind": kind,
        "config": config,
        "arrays": [{"name": n, "rows": int(arrays[n].shape[0]),
                     "cols": int(arrays[n].shape[1])} for n in names],
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def read_checkpoint(path):
    """Returns (kind, config dict, arrays dict, metadata dict)."""
    from pathlib import Path
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header") from exc
    arrays = {}
    at = 12 + header_len
    for entry in header["arrays"]:
        size = entry["rows"] * entry["cols"] * 8
        chunk = blob[at:at + size]
        if len(chunk) < size:
            raise CheckpointError(f"{path}: truncated checkpoint payload")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(
            entry["rows"], entry["cols"]).copy()
        at += size
    if at != len(blob):
        raise CheckpointError(f"{path}: trailing bytes in checkpoint")
    return header["kind"], header["config"], arrays, header.get("metadata", {})


def save_model(model: GoatModel, path, metadata: dict | None = None) -> None:
    arrays = dict(model.params)
    for i, state in enumerate(model.bn_states):
        arrays[f"bn{i}.running_mean"] = state.running_mean
        arrays[f"bn{i}.running_var"] = state.running_var
    write_checkpoint(model.variant, asdict(model.config), arrays, path,
                     metadata=metadata)


def load_model(path) -> tuple:
    """Load a fusion checkpoint; returns (model, metadata)."""
    kind, config, arrays, metadata = read_checkpoint(path)
    if kind not in ("goat", "baseline"):
        raise CheckpointError(f"{path}: checkpoint holds a {kind!r} model, "
                              "expected an assessment model")
    cfg = GoatConfig(**config)
    bn_states = []
    params = {}
    for name, arr in arrays.items():
        if name.startswith("bn"):
            continue
        params[name] = arr
    if kind == "goat":
        for i in range(cfg.attention_layers):
            state = ad.BatchNormState(cfg.feature_dim, cfg.bn_momentum, cfg.bn_eps)
            try:
                state.running_mean = arrays[f"bn{i}.running_mean"]
                state.running_var = arrays[f"bn{i}.running_var"]
            except KeyError as exc:
                raise CheckpointError(f"{path}: missing running stats") from exc
            bn_states.append(state)
    model = GoatModel(kind, cfg, params, bn_states)
    return model, metadata
