"""Small residual 3D convolutional encoder with a linear regression head.

Three stages of conv-BN-ReLU residual blocks joined by stride-2
transitions, global average pooling, and a dense projection to a fixed
embedding dimension (L2-normalized by default). Roughly 100k parameters at
the default configuration; the stage outputs are retained by name so
saliency computation can target any of them.

Checkpoint format: u32 little-endian header length, JSON header (config,
epoch, scalar extras, ordered block descriptors), then the raw
little-endian array blocks in descriptor order. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .phantom import Volume


@dataclass
class EncoderConfig:
    input_dims: tuple = (32, 32, 32)
    widths: tuple = (8, 16, 32)
    blocks_per_stage: int = 1
    embedding_dim: int = 64
    normalize_embedding: bool = True
    init_seed: int = 0
    target_layer: str = "stage3"
    bn_momentum: float = 0.9

    def validate(self) -> None:
        if len(self.input_dims) != 3 or any(int(d) < 8 for d in self.input_dims):
            raise ValueError(f"input_dims must be three extents >= 8, got {self.input_dims}")
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ValueError("stage widths must be positive")
        if list(self.widths) != sorted(self.widths):
            raise ValueError("stage widths must be nondecreasing")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")

    def layer_names(self) -> list[str]:
        return ["stem"] + [f"stage{i + 1}" for i in range(len(self.widths))]


@dataclass
class RegressionHead:
    weight: np.ndarray  # (d,)
    bias: float

    @staticmethod
    def zeros(d: int) -> "RegressionHead":
        return RegressionHead(np.zeros(d, dtype=np.float32), 0.0)

    def copy(self) -> "RegressionHead":
        return RegressionHead(self.weight.copy(), float(self.bias))


def _he_conv(rng, cout, cin, k, dtype=np.float32):
    std = np.sqrt(2.0 / (cin * k ** 3))
    return rng.normal(0.0, std, size=(cout, cin, k, k, k)).astype(dtype)


class Encoder:
    """Parameter container plus the tape-based forward pass."""

    def __init__(self, config: EncoderConfig, params=None, buffers=None):
        config.validate()
        self.config = config
        if params is None:
            params, buffers = self._init_params()
        self.params = params
        self.buffers = buffers

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.init_seed), 17]))
        params, buffers = {}, {}

        def add_conv(name, cin, cout):
            params[f"{name}.w"] = _he_conv(rng, cout, cin, 3)
            params[f"{name}.b"] = np.zeros(cout, dtype=np.float32)

        def add_bn(name, c):
            params[f"{name}.gamma"] = np.ones(c, dtype=np.float32)
            params[f"{name}.beta"] = np.zeros(c, dtype=np.float32)
            buffers[f"{name}.running_mean"] = np.zeros(c, dtype=np.float32)
            buffers[f"{name}.running_var"] = np.ones(c, dtype=np.float32)

        add_conv("stem", 1, cfg.widths[0])
        add_bn("stem.bn", cfg.widths[0])
        prev = cfg.widths[0]
        for s, w in enumerate(cfg.widths):
            stage = f"stage{s + 1}"
            if w != prev or s > 0:
                add_conv(f"{stage}.down", prev, w)
                add_bn(f"{stage}.down.bn", w)
            for b in range(cfg.blocks_per_stage):
                blk = f"{stage}.block{b}"
                add_conv(f"{blk}.conv1", w, w)
                add_bn(f"{blk}.bn1", w)
                add_conv(f"{blk}.conv2", w, w)
                add_bn(f"{blk}.bn2", w)
            prev = w
        std = np.sqrt(2.0 / cfg.widths[-1])
        params["proj.w"] = rng.normal(0.0, std, size=(cfg.widths[-1],
                                                      cfg.embedding_dim)).astype(np.float32)
        params["proj.b"] = np.zeros(cfg.embedding_dim, dtype=np.float32)
        return params, buffers

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype) -> "Encoder":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return Encoder(self.config, params, buffers)

    def copy(self) -> "Encoder":
        return Encoder(self.config,
                       {k: v.copy() for k, v in self.params.items()},
                       {k: v.copy() for k, v in self.buffers.items()})

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].astype("<f8").tobytes())
        return h.hexdigest()

    # -- forward ----------------------------------------------------------

    def forward(self, tape: T.Tape, x: T.Tensor, training: bool = False,
                param_tensors=None):
        """Run the encoder on x (N,1,D,H,W); returns (embedding, activations).

        `param_tensors` maps parameter names to leaf tensors when gradients
        w.r.t. parameters are needed; otherwise constants are created here.
        """
        cfg = self.config
        if x.value.ndim != 5 or x.value.shape[1] != 1 or \
                tuple(x.value.shape[2:]) != tuple(cfg.input_dims):
            raise T.ShapeMismatchError(
                f"encoder input {x.value.shape}, expected (N,1,{cfg.input_dims})")

        pt = dict(param_tensors) if param_tensors else {}

        def p(name):
            if name not in pt:
                pt[name] = tape.tensor(self.params[name])
            return pt[name]

        def bn(h, name):
            return T.batch_norm3d(h, p(f"{name}.gamma"), p(f"{name}.beta"),
                                  self.buffers[f"{name}.running_mean"],
                                  self.buffers[f"{name}.running_var"],
                                  training=training, momentum=cfg.bn_momentum)

        acts = {}
        h = T.relu(bn(T.conv3d(x, p("stem.w"), p("stem.b"), stride=2, padding=1),
                      "stem.bn"))
        acts["stem"] = h
        prev = cfg.widths[0]
        for s, w in enumerate(cfg.widths):
            stage = f"stage{s + 1}"
            if w != prev or s > 0:
                h = T.relu(bn(T.conv3d(h, p(f"{stage}.down.w"), p(f"{stage}.down.b"),
                                       stride=2, padding=1), f"{stage}.down.bn"))
            for b in range(cfg.blocks_per_stage):
                blk = f"{stage}.block{b}"
                r = T.relu(bn(T.conv3d(h, p(f"{blk}.conv1.w"), p(f"{blk}.conv1.b"),
                                       stride=1, padding=1), f"{blk}.bn1"))
                r = bn(T.conv3d(r, p(f"{blk}.conv2.w"), p(f"{blk}.conv2.b"),
                                stride=1, padding=1), f"{blk}.bn2")
                h = T.relu(T.add(h, r))
            acts[stage] = h
            prev = w
        pooled = T.global_avg_pool(h)
        emb = T.dense(pooled, p("proj.w"), p("proj.b"))
        if cfg.normalize_embedding:
            emb = T.l2_normalize(emb)
        return emb, acts


def volumes_to_batch(volumes) -> np.ndarray:
    """Stack Volumes into an (N,1,D,H,W) float32 array."""
    return np.stack([v.voxels for v in volumes])[:, None, :, :, :].astype(np.float32)


def embed(encoder: Encoder, volumes, training: bool = False,
          chunk: int = 16) -> np.ndarray:
    """Embeddings for a list of Volumes; (N, d) float32.

    Eval-mode batches are processed in chunks to bound tape memory; results
    do not depend on the chunking."""
    if training:
        tape = T.Tape()
        x = tape.tensor(volumes_to_batch(volumes))
        emb, _ = encoder.forward(tape, x, training=True)
        out = emb.value.copy()
        tape.release()
        return out
    outs = []
    for start in range(0, len(volumes), chunk):
        tape = T.Tape()
        x = tape.tensor(volumes_to_batch(volumes[start:start + chunk]))
        emb, _ = encoder.forward(tape, x, training=False)
        outs.append(emb.value.copy())
        tape.release()
    return np.concatenate(outs, axis=0)


def head_predict_graph(emb: T.Tensor, head: RegressionHead):
    """Tape node for head predictions: (N,1)."""
    tape = emb.tape
    w = tape.tensor(head.weight.reshape(-1, 1))
    b = tape.tensor(np.array([head.bias], dtype=head.weight.dtype))
    return T.dense(emb, w, b)


def predict_age(encoder: Encoder, head: RegressionHead, volumes) -> np.ndarray:
    """Predicted ages for a list of Volumes (eval mode)."""
    emb = embed(encoder, volumes)
    return (emb @ head.weight + head.bias).astype(np.float64)


def forward_with_activations(encoder: Encoder, head: RegressionHead, volume: Volume,
                             target_layer: str | None = None):
    """Single-subject forward retaining the target activation and its gradient.

    Returns (prediction, activation array (C, d, h, w), gradient array of the
    prediction w.r.t. that activation).
    """
    layer = target_layer or encoder.config.target_layer
    if layer not in encoder.config.layer_names():
        raise ValueError(f"unknown layer {layer!r}; have {encoder.config.layer_names()}")
    tape = T.Tape()
    # the input requires grad so the whole chain is differentiable and the
    # retained activation receives its gradient during the backward sweep
    x = tape.tensor(volume.voxels[None, None].astype(np.float32), requires_grad=True)
    emb, acts = encoder.forward(tape, x, training=False)
    a = acts[layer]
    a.requires_grad = True
    pred = head_predict_graph(emb, head)
    tape.backward(pred, seed=np.ones_like(pred.value))
    grad = a.grad[0].copy() if a.grad is not None else np.zeros_like(a.value[0])
    out = float(pred.value[0, 0]), a.value[0].copy(), grad
    tape.release()
    return out


# ---------------------------------------------------------------------------
# checkpoint IO


def save_checkpoint(path: str, arrays: dict, config: dict, epoch: int,
                    extra: dict | None = None) -> None:
    """Write named arrays with a JSON header; bit-exact round trip."""
    names = sorted(arrays)
    descriptors = [{"name": k, "shape": list(arrays[k].shape),
                    "dtype": str(arrays[k].dtype)} for k in names]
    header = json.dumps({"config": config, "epoch": int(epoch),
                         "extra": extra or {}, "blocks": descriptors},
                        sort_keys=True).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for k in names:
            arr = arrays[k]
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str):
    """Read a checkpoint; returns (arrays, config, epoch, extra)."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise ValueError(f"{path}: truncated checkpoint")
    hlen, = struct.unpack_from("<I", data, 0)
    header = json.loads(data[4:4 + hlen].decode())
    arrays = {}
    off = 4 + hlen
    for d in header["blocks"]:
        dt = np.dtype(d["dtype"]).newbyteorder("<")
        count = int(np.prod(d["shape"])) if d["shape"] else 1
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off)
        arrays[d["name"]] = arr.reshape(d["shape"]).astype(np.dtype(d["dtype"]))
        off += arr.nbytes
    if off != len(data):
        raise ValueError(f"{path}: checkpoint payload size mismatch")
    return arrays, header["config"], header["epoch"], header["extra"]


def encoder_state_arrays(encoder: Encoder, head: RegressionHead) -> dict:
    arrays = {f"enc.{k}": v for k, v in encoder.params.items()}
    arrays.update({f"buf.{k}": v for k, v in encoder.buffers.items()})
    arrays["head.weight"] = head.weight
    arrays["head.bias"] = np.array([head.bias], dtype=np.float64)
    return arrays


def restore_encoder_state(arrays: dict, config: EncoderConfig):
    params = {k[4:]: v.copy() for k, v in arrays.items() if k.startswith("enc.")}
    buffers = {k[4:]: v.copy() for k, v in arrays.items() if k.startswith("buf.")}
    head = RegressionHead(arrays["head.weight"].copy(),
                          float(arrays["head.bias"][0]))
    return Encoder(config, params, buffers), head
