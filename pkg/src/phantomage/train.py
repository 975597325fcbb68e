"""Training pipelines: ranked-contrastive two-stage training and the
end-to-end L1 baseline.

Two-stage: stage 1 optimizes the encoder alone under the contrastive loss
with augmentation (SGD, lr 0.5, momentum 0.9, decay 0.1 at the milestone
fractions); stage 2 freezes the encoder bit-exactly and fits the linear
head under L1 on precomputed embeddings (SGD, lr 0.05, decay 0.2).
End-to-end: Adam (lr 0.001) on encoder + head under L1 with early stopping
on validation MAE and best-checkpoint restore.

All randomness derives from (seed, epoch, sample index), so interrupting
at a checkpoint and resuming reproduces the uninterrupted run bit-exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import augment as ag
from . import encoder as enc
from . import optim
from . import rnc
from . import tensor as T
from .phantom import read_manifest, read_volume

PIPELINES = ("rnc-two-stage", "end-to-end")


@dataclass
class TrainingConfig:
    pipeline: str = "rnc-two-stage"
    batch_size: int = 8
    stage1_epochs: int = 200
    stage1_lr: float = 0.5
    stage1_decay: float = 0.1
    stage1_momentum: float = 0.9
    stage2_epochs: int = 50
    stage2_lr: float = 0.05
    stage2_decay: float = 0.2
    stage2_momentum: float = 0.9
    baseline_epochs: int = 200
    baseline_lr: float = 0.001
    baseline_decay: float = 0.1
    patience: int = 30
    milestones: tuple = (0.6, 0.8)
    augment: bool = True
    checkpoint_every: int = 10
    seed: int = 0
    augment_seed: int | None = None  # None -> seed; shared across pipelines

    def validate(self) -> None:
        if self.pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        for lr in (self.stage1_lr, self.stage2_lr, self.baseline_lr):
            if lr <= 0:
                raise ValueError("learning rates must be > 0")
        for m in (self.stage1_momentum, self.stage2_momentum):
            if not 0.0 <= m < 1.0:
                raise ValueError("momentum must be in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")

    @property
    def effective_augment_seed(self) -> int:
        return self.seed if self.augment_seed is None else self.augment_seed


@dataclass
class SplitData:
    volumes: list
    ages: np.ndarray
    indices: np.ndarray   # positions in the source manifest (augment keys)
    ids: list
    groups: list
    sexes: list


@dataclass
class TrainResult:
    encoder: "enc.Encoder"
    head: "enc.RegressionHead"
    history: list
    meta: dict


def load_dataset(data_dir: str, manifest_name: str = "manifest.json") -> dict:
    """Load all splits of a generated dataset into memory."""
    manifest = read_manifest(os.path.join(data_dir, manifest_name))
    out = {}
    for split in ("train", "val", "test"):
        rows = [(i, s) for i, s in enumerate(manifest) if s.split == split]
        out[split] = SplitData(
            volumes=[read_volume(os.path.join(data_dir, s.path)) for _, s in rows],
            ages=np.array([s.age for _, s in rows], dtype=np.float64),
            indices=np.array([i for i, _ in rows], dtype=np.int64),
            ids=[s.id for _, s in rows],
            groups=[s.group for _, s in rows],
            sexes=[s.sex for _, s in rows],
        )
    return out


def _epoch_perm(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 7])).permutation(n)


def _batches(perm: np.ndarray, batch_size: int):
    for start in range(0, len(perm), batch_size):
        b = perm[start:start + batch_size]
        if len(b) >= 2:
            yield b


def _augmented_batch(data: SplitData, batch_idx, cfg: TrainingConfig,
                     aug_cfg: ag.AugmentConfig, epoch: int,
                     view_offsets=None) -> np.ndarray:
    vols = []
    for slot, i in enumerate(batch_idx):
        v = data.volumes[i]
        if cfg.augment:
            key = int(data.indices[i])
            if view_offsets is not None:
                key = key * 2 + view_offsets[slot]
            v = ag.augment(v, aug_cfg, ag.sample_rng(cfg.effective_augment_seed, epoch, key))
        vols.append(v)
    return enc.volumes_to_batch(vols)


def _history_row(epoch, stage, train_loss, val_metric, lr):
    return {"epoch": int(epoch), "stage": int(stage),
            "train_loss": float(train_loss), "val_metric": float(val_metric),
            "lr": float(lr)}


def write_history_csv(path: str, history: list, provenance: str = "") -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        if provenance:
            f.write(f"# {provenance}\n")
        f.write("epoch,stage,train_loss,val_metric,lr\n")
        for row in history:
            f.write(f"{row['epoch']},{row['stage']},{row['train_loss']!r},"
                    f"{row['val_metric']!r},{row['lr']!r}\n")
    os.replace(tmp, path)


def read_history_csv(path: str) -> list:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("epoch,"):
                continue
            e, s, tl, vm, lr = line.split(",")
            rows.append(_history_row(int(e), int(s), float(tl), float(vm), float(lr)))
    return rows


# ---------------------------------------------------------------------------
# checkpoint plumbing


def _save_state(path, encoder, head, opt, cfg_dict, stage, epoch, history,
                extra_arrays=None, extra_meta=None):
    arrays = enc.encoder_state_arrays(encoder, head)
    arrays.update(opt.state_arrays())
    if extra_arrays:
        arrays.update(extra_arrays)
    meta = {"stage": stage, "history": history}
    if extra_meta:
        meta.update(extra_meta)
    enc.save_checkpoint(path, arrays, cfg_dict, epoch, meta)


def _checkpoint_path(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, "checkpoint.bin")


# ---------------------------------------------------------------------------
# ranked-contrastive two-stage pipeline


def _stage1_epoch(encoder, train, cfg, rnc_cfg, aug_cfg, opt, epoch):
    perm = _epoch_perm(cfg.seed, epoch, len(train.volumes))
    two_views = rnc_cfg.batch_mode == "two-views"
    losses = []
    for batch_idx in _batches(perm, cfg.batch_size):
        if two_views:
            half = batch_idx[: max(1, len(batch_idx) // 2)]
            batch_idx = np.repeat(half, 2)
            view_offsets = np.tile([0, 1], len(half))
        else:
            view_offsets = None
        x = _augmented_batch(train, batch_idx, cfg, aug_cfg, epoch, view_offsets)
        labels = train.ages[batch_idx]
        tape = T.Tape()
        xt = tape.tensor(x)
        param_tensors = {k: tape.tensor(v, requires_grad=True, name=k)
                         for k, v in encoder.params.items()}
        emb, _ = encoder.forward(tape, xt, training=True, param_tensors=param_tensors)
        loss = rnc.rnc_loss_graph(emb, labels, rnc_cfg)
        tape.backward(loss)
        grads = {k: t.grad if t.grad is not None else np.zeros_like(encoder.params[k])
                 for k, t in param_tensors.items()}
        opt.step(encoder.params, grads)
        losses.append(loss.item())
        tape.release()   # break tape cycles; gc is too slow for these arrays
    return float(np.mean(losses))


def _val_rnc_loss(encoder, val, rnc_cfg):
    emb = enc.embed(encoder, val.volumes)
    return rnc.rnc_batch_loss(rnc.EmbeddingBatch(emb, val.ages), rnc_cfg)


def train_rnc_two_stage(data: dict, enc_cfg: enc.EncoderConfig, rnc_cfg: rnc.RncConfig,
                        aug_cfg: ag.AugmentConfig, cfg: TrainingConfig,
                        out_dir: str | None = None, resume: bool = False) -> TrainResult:
    cfg.validate()
    rnc_cfg.validate()
    train, val = data["train"], data["val"]
    if not train.volumes or not val.volumes:
        raise ValueError("train and val splits must be nonempty")

    encoder = enc.Encoder(enc_cfg)
    head = enc.RegressionHead.zeros(enc_cfg.embedding_dim)
    head.bias = float(train.ages.mean())  # start the head at the mean train age
    history: list = []
    stage, start_epoch = 1, 0
    opt1 = optim.SGD(encoder.params.keys(), cfg.stage1_lr, cfg.stage1_momentum)
    head_params = {"w": head.weight.astype(np.float64), "b": np.array([head.bias])}
    opt2 = optim.SGD(head_params.keys(), cfg.stage2_lr, cfg.stage2_momentum)

    ckpt = _checkpoint_path(out_dir) if out_dir else None
    if resume and ckpt and os.path.exists(ckpt):
        arrays, _, epoch, meta = enc.load_checkpoint(ckpt)
        encoder, head = enc.restore_encoder_state(arrays, enc_cfg)
        if "head64.w" in arrays:  # keep stage-2 float64 head state exact
            head_params = {"w": arrays["head64.w"].copy(), "b": arrays["head64.b"].copy()}
        else:
            head_params = {"w": head.weight.astype(np.float64), "b": np.array([head.bias])}
        history = [_history_row(**r) for r in meta["history"]]
        stage, start_epoch = int(meta["stage"]), int(epoch)
        opt1.load_state(arrays, prefix="opt1.")
        opt2.load_state(arrays, prefix="opt2.")

    cfg_dict = asdict(cfg)

    def checkpoint(stage_now, epoch_now, force=False):
        if ckpt is None:
            return
        if force or (cfg.checkpoint_every and epoch_now % cfg.checkpoint_every == 0):
            head.weight = head_params["w"].astype(np.float32)
            head.bias = float(head_params["b"][0])
            arrays = enc.encoder_state_arrays(encoder, head)
            arrays["head64.w"] = head_params["w"]
            arrays["head64.b"] = head_params["b"]
            arrays.update(opt1.state_arrays(prefix="opt1."))
            arrays.update(opt2.state_arrays(prefix="opt2."))
            enc.save_checkpoint(ckpt, arrays, cfg_dict, epoch_now,
                                {"stage": stage_now, "history": history})

    # stage 1: encoder under the contrastive loss
    if stage == 1:
        for epoch in range(start_epoch + 1, cfg.stage1_epochs + 1):
            opt1.lr = optim.lr_at_epoch(cfg.stage1_lr, cfg.stage1_decay,
                                        cfg.milestones, epoch, cfg.stage1_epochs)
            train_loss = _stage1_epoch(encoder, train, cfg, rnc_cfg, aug_cfg, opt1, epoch)
            val_loss = _val_rnc_loss(encoder, val, rnc_cfg)
            history.append(_history_row(epoch, 1, train_loss, val_loss, opt1.lr))
            checkpoint(1, epoch)
        stage, start_epoch = 2, 0
        checkpoint(2, 0, force=True)

    # stage 2: frozen encoder, head under L1 on precomputed embeddings
    train_emb = enc.embed(encoder, train.volumes).astype(np.float64)
    val_emb = enc.embed(encoder, val.volumes).astype(np.float64)
    for epoch in range(start_epoch + 1, cfg.stage2_epochs + 1):
        opt2.lr = optim.lr_at_epoch(cfg.stage2_lr, cfg.stage2_decay,
                                    cfg.milestones, epoch, cfg.stage2_epochs)
        perm = _epoch_perm(cfg.seed, 100000 + epoch, len(train.volumes))
        losses = []
        for batch_idx in _batches(perm, cfg.batch_size):
            e = train_emb[batch_idx]
            pred = e @ head_params["w"] + head_params["b"][0]
            loss, dpred = rnc.l1_loss(pred, train.ages[batch_idx])
            grads = {"w": e.T @ dpred, "b": np.array([dpred.sum()])}
            opt2.step(head_params, grads)
            losses.append(loss)
        val_pred = val_emb @ head_params["w"] + head_params["b"][0]
        val_mae = float(np.abs(val_pred - val.ages).mean())
        history.append(_history_row(epoch, 2, float(np.mean(losses)), val_mae, opt2.lr))
        checkpoint(2, epoch)

    head.weight = head_params["w"].astype(np.float32)
    head.bias = float(head_params["b"][0])
    checkpoint(2, cfg.stage2_epochs, force=True)
    return TrainResult(encoder, head, history, {"pipeline": cfg.pipeline})


# ---------------------------------------------------------------------------
# end-to-end baseline


def train_end_to_end(data: dict, enc_cfg: enc.EncoderConfig,
                     aug_cfg: ag.AugmentConfig, cfg: TrainingConfig,
                     out_dir: str | None = None, resume: bool = False) -> TrainResult:
    cfg.validate()
    train, val = data["train"], data["val"]
    if not train.volumes or not val.volumes:
        raise ValueError("train and val splits must be nonempty")

    encoder = enc.Encoder(enc_cfg)
    head = enc.RegressionHead.zeros(enc_cfg.embedding_dim)
    head.bias = float(train.ages.mean())
    all_names = list(encoder.params.keys()) + ["head.w", "head.b"]
    opt = optim.Adam(all_names, cfg.baseline_lr)
    history: list = []
    start_epoch = 0
    best = {"val": np.inf, "epoch": 0, "arrays": None, "stall": 0}

    ckpt = _checkpoint_path(out_dir) if out_dir else None
    if resume and ckpt and os.path.exists(ckpt):
        arrays, _, epoch, meta = enc.load_checkpoint(ckpt)
        encoder, head = enc.restore_encoder_state(arrays, enc_cfg)
        history = [_history_row(**r) for r in meta["history"]]
        start_epoch = int(epoch)
        opt.load_state(arrays)
        best["val"] = float(meta["best_val"])
        best["epoch"] = int(meta["best_epoch"])
        best["stall"] = int(meta["stall"])
        best["arrays"] = {k[5:]: v.copy() for k, v in arrays.items()
                          if k.startswith("best.")}

    head_w = head.weight.reshape(-1, 1).astype(np.float32)
    head_b = np.array([head.bias], dtype=np.float32)
    cfg_dict = asdict(cfg)

    def snapshot_arrays():
        out = {k: v.copy() for k, v in encoder.params.items()}
        out.update({f"_buf.{k}": v.copy() for k, v in encoder.buffers.items()})
        out["head.w"] = head_w.copy()
        out["head.b"] = head_b.copy()
        return out

    def checkpoint(epoch_now, force=False):
        if ckpt is None:
            return
        if force or (cfg.checkpoint_every and epoch_now % cfg.checkpoint_every == 0):
            head.weight = head_w[:, 0].copy()
            head.bias = float(head_b[0])
            arrays = enc.encoder_state_arrays(encoder, head)
            arrays.update(opt.state_arrays())
            if best["arrays"] is not None:
                arrays.update({f"best.{k}": v for k, v in best["arrays"].items()})
            enc.save_checkpoint(ckpt, arrays, cfg_dict, epoch_now,
                                {"stage": 1, "history": history,
                                 "best_val": float(best["val"]),
                                 "best_epoch": int(best["epoch"]),
                                 "stall": int(best["stall"])})

    stopped_epoch = None
    for epoch in range(start_epoch + 1, cfg.baseline_epochs + 1):
        opt.lr = optim.lr_at_epoch(cfg.baseline_lr, cfg.baseline_decay,
                                   cfg.milestones, epoch, cfg.baseline_epochs)
        perm = _epoch_perm(cfg.seed, epoch, len(train.volumes))
        losses = []
        for batch_idx in _batches(perm, cfg.batch_size):
            x = _augmented_batch(train, batch_idx, cfg, aug_cfg, epoch)
            tape = T.Tape()
            xt = tape.tensor(x)
            param_tensors = {k: tape.tensor(v, requires_grad=True)
                             for k, v in encoder.params.items()}
            emb, _ = encoder.forward(tape, xt, training=True, param_tensors=param_tensors)
            wt = tape.tensor(head_w, requires_grad=True)
            bt = tape.tensor(head_b, requires_grad=True)
            pred = T.dense(emb, wt, bt)
            loss = rnc.l1_loss_graph(pred, train.ages[batch_idx].reshape(-1, 1))
            tape.backward(loss)
            grads = {k: t.grad if t.grad is not None else np.zeros_like(encoder.params[k])
                     for k, t in param_tensors.items()}
            grads["head.w"] = wt.grad if wt.grad is not None else np.zeros_like(head_w)
            grads["head.b"] = bt.grad if bt.grad is not None else np.zeros_like(head_b)
            params = dict(encoder.params)
            params["head.w"] = head_w
            params["head.b"] = head_b
            opt.step(params, grads)
            losses.append(loss.item())
            tape.release()   # break tape cycles; gc is too slow for these arrays

        val_pred = _predict_raw(encoder, head_w, head_b, val.volumes)
        val_mae = float(np.abs(val_pred - val.ages).mean())
        history.append(_history_row(epoch, 1, float(np.mean(losses)), val_mae, opt.lr))

        if val_mae < best["val"]:
            best.update(val=val_mae, epoch=epoch, stall=0, arrays=snapshot_arrays())
        else:
            best["stall"] += 1
        checkpoint(epoch)
        if best["stall"] >= cfg.patience:
            stopped_epoch = epoch
            break

    if best["arrays"] is not None:
        for k in encoder.params:
            encoder.params[k][...] = best["arrays"][k]
        for k in encoder.buffers:
            encoder.buffers[k][...] = best["arrays"][f"_buf.{k}"]
        head_w[...] = best["arrays"]["head.w"]
        head_b[...] = best["arrays"]["head.b"]
    head.weight = head_w[:, 0].copy()
    head.bias = float(head_b[0])
    checkpoint(history[-1]["epoch"] if history else 0, force=True)
    return TrainResult(encoder, head, history,
                       {"pipeline": cfg.pipeline,
                        "early_stop_epoch": stopped_epoch,
                        "best_epoch": int(best["epoch"])})


def _predict_raw(encoder, head_w, head_b, volumes):
    emb = enc.embed(encoder, volumes)
    return (emb @ head_w[:, 0] + head_b[0]).astype(np.float64)


def run_training(data, enc_cfg, rnc_cfg, aug_cfg, cfg, out_dir=None, resume=False):
    """Dispatch on cfg.pipeline."""
    if cfg.pipeline == "rnc-two-stage":
        return train_rnc_two_stage(data, enc_cfg, rnc_cfg, aug_cfg, cfg, out_dir, resume)
    if cfg.pipeline == "end-to-end":
        return train_end_to_end(data, enc_cfg, aug_cfg, cfg, out_dir, resume)
    raise ValueError(f"unknown pipeline {cfg.pipeline!r}")
