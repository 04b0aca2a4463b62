"""Training loop: augmentation, lr schedule, batching, checkpointing."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .checkpoint import save_checkpoint
from .errors import ContractViolation
from .layers import SegmentationNet
from .meshio import Mesh, cell_descriptors, load_mesh, read_labels
from .metrics import iou_from_confusion, oa_from_confusion
from .optim import AdamState, adam_step


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    lr: float = 1e-3
    lr_decay: float = 0.5
    decay_every: int = 20
    K: int = 32
    classes: int = 8
    seed: int = 0
    augment: bool = True
    # harness conveniences, not part of the reference schedule
    target_oa: Optional[float] = None   # stop early once training OA reached
    translate_range: float = 10.0
    rotate_range: float = float(np.pi / 6)

    def validate(self):
        if min(self.epochs, self.batch_size, self.K, self.classes) <= 0:
            raise ContractViolation("config values must be positive")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ContractViolation("lr_decay must be in (0, 1]")
        if self.lr < 0 or self.decay_every <= 0:
            raise ContractViolation("bad lr schedule")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ContractViolation("epoch must be >= 0")
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every)


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def augment(mesh: Mesh, rng: np.random.Generator,
            translate_range=10.0, rotate_range=float(np.pi / 6)) -> Mesh:
    """Random per-axis translation and rotation about the y axis.

    Labels are untouched; normals are recomputed downstream from the
    transformed geometry.
    """
    shift = rng.uniform(-translate_range, translate_range, size=3)
    angle = rng.uniform(-rotate_range, rotate_range)
    verts = mesh.vertices @ rotation_y(angle).T + shift
    return Mesh(vertices=verts, faces=mesh.faces, labels=mesh.labels)


def load_dataset(data_dir):
    """Read a manifest.json written by the synth command."""
    manifest = os.path.join(data_dir, "manifest.json")
    with open(manifest) as f:
        info = json.load(f)
    meshes = []
    for item in info["items"]:
        mesh = load_mesh(os.path.join(data_dir, item["mesh"]))
        mesh.labels = read_labels(os.path.join(data_dir, item["labels"]),
                                  expected_count=mesh.n_faces)
        meshes.append(mesh)
    return meshes, int(info["classes"])


LOG_HEADER = "epoch,lr,loss,oa,miou"


def train(dataset: list[Mesh], cfg: TrainConfig, variant="full",
          ckpt_path=None, log_path=None, on_epoch=None):
    """Train a model; returns (model, log_rows).

    Deterministic given cfg.seed: mesh order and augmentation draws come from
    one data RNG that the variant never touches, so ablations are paired.
    Gradients are accumulated over batch_size meshes per Adam step; the best
    checkpoint (by training mIoU) is written to ckpt_path when given.
    """
    cfg.validate()
    if not dataset:
        raise ContractViolation("empty dataset")
    for mesh in dataset:
        if mesh.labels is None:
            raise ContractViolation("training meshes must be labeled")
        if mesh.labels.min() < 0 or mesh.labels.max() >= cfg.classes:
            raise ContractViolation("label out of range [0, C)")

    rng_data = np.random.default_rng(cfg.seed)
    model = SegmentationNet(cfg.classes, K=cfg.K, variant=variant,
                            rng=np.random.default_rng(cfg.seed + 1))
    params = model.named_parameters()
    state = AdamState(params)

    log_rows = []
    best_miou = -1.0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng_data.permutation(len(dataset))
        conf = np.zeros((cfg.classes, cfg.classes), dtype=np.int64)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            ad.zero_grads(params.values())
            for mi in batch:
                mesh = dataset[int(mi)]
                if cfg.augment:
                    mesh = augment(mesh, rng_data, cfg.translate_range,
                                   cfg.rotate_range)
                desc = cell_descriptors(mesh)
                with Tape() as tape:
                    probs = model.forward(desc, train=True)
                    loss = ad.cross_entropy(probs, mesh.labels)
                    tape.backward(loss)
                losses.append(float(loss.data))
                pred = np.argmax(probs.data, axis=1)
                flat = mesh.labels * cfg.classes + pred
                conf += np.bincount(flat, minlength=cfg.classes ** 2) \
                          .reshape(cfg.classes, cfg.classes)
            for p in params.values():
                if p.grad is not None:
                    p.grad /= len(batch)
            adam_step(params, state, lr)

        oa = oa_from_confusion(conf)
        miou = float(np.nanmean(iou_from_confusion(conf)))
        log_rows.append((epoch, lr, float(np.mean(losses)), oa, miou))
        if on_epoch is not None:
            on_epoch(log_rows[-1])
        if ckpt_path is not None and miou > best_miou:
            best_miou = miou
            save_checkpoint(ckpt_path, model, state)
        if cfg.target_oa is not None and oa >= cfg.target_oa:
            break

    if log_path is not None:
        write_log(log_path, log_rows)
    return model, log_rows


def write_log(path, log_rows):
    with open(path, "w") as f:
        f.write(LOG_HEADER + "\n")
        for epoch, lr, loss, oa, miou in log_rows:
            f.write(f"{epoch},{lr!r},{loss!r},{oa!r},{miou!r}\n")


def parse_config(path) -> TrainConfig:
    """Flat key = value text file mirroring TrainConfig fields."""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    kwargs = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractViolation(f"config line {lineno}: expected key = value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in kinds:
                raise ContractViolation(f"config line {lineno}: unknown key {key!r}")
            kwargs[key] = _coerce(key, value)
    return TrainConfig(**kwargs)


def _coerce(key, value):
    if key in ("epochs", "batch_size", "decay_every", "K", "classes", "seed"):
        return int(value)
    if key == "augment":
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ContractViolation(f"bad boolean {value!r} for augment")
    return float(value)
