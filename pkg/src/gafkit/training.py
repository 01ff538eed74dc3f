"""Two-stage training orchestration, cosine LR schedule, and checkpointing."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from types import SimpleNamespace

import numpy as np
import torch

from . import losses
from .data import INPUT_VARIANTS, ClipDataset
from .encoder import EncoderConfig, apply_freeze_policy
from .fileio import (FormatError, expect_eof, read_blob, read_f32_array, read_magic,
                     read_str, read_u32, write_blob, write_f32_array, write_magic,
                     write_str, write_u32)
from .gafnet import GafModel, HeadConfig, ModelConfig, pool_gaf

GAFC_MAGIC = b"GAFC"
GAFC_VERSION = 1

FLOW_MODES = ("person", "whole_image")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class StageConfig:
    """One training stage: epoch budget, initial LR (cosine-decayed to zero),
    active loss terms, and which input variant the encoder sees."""

    epochs: int
    initial_lr: float
    weights: losses.LossWeights
    input_variant: str = "inpainted"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.initial_lr < 0:
            raise ValueError("initial_lr must be nonnegative")
        if self.input_variant not in INPUT_VARIANTS:
            raise ValueError(f"input_variant must be one of {INPUT_VARIANTS}")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "initial_lr": self.initial_lr,
                "weights": self.weights.to_dict(), "input_variant": self.input_variant}

    @classmethod
    def from_dict(cls, data: dict) -> "StageConfig":
        return cls(epochs=data["epochs"], initial_lr=data["initial_lr"],
                   weights=losses.LossWeights(**data["weights"]),
                   input_variant=data["input_variant"])


def flow_stage(epochs: int = 15, initial_lr: float = 1e-3,
               input_variant: str = "inpainted") -> StageConfig:
    return StageConfig(epochs=epochs, initial_lr=initial_lr, input_variant=input_variant,
                       weights=losses.LossWeights(w_flow=1.0, w_object=0.0,
                                                  use_object_g=False, use_object_i=False))


def object_stage(epochs: int = 10, initial_lr: float = 5e-4,
                 input_variant: str = "inpainted") -> StageConfig:
    return StageConfig(epochs=epochs, initial_lr=initial_lr, input_variant=input_variant,
                       weights=losses.LossWeights(w_flow=0.0, w_object=1.0,
                                                  use_flow_g=False, use_flow_i=False))


def default_stages(paper_epochs: bool = False) -> list[StageConfig]:
    """Flow stage then object stage; the stage LRs keep a 2:1 ratio."""
    if paper_epochs:
        return [flow_stage(epochs=50), object_stage(epochs=30)]
    return [flow_stage(), object_stage()]


@dataclass(frozen=True)
class RunConfig:
    stages: tuple[StageConfig, ...] = field(default_factory=lambda: tuple(default_stages()))
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 8
    seed: int = 0
    frozen_blocks: int | None = None  # None -> the encoder config's default
    detection_noise_sigma: float = 0.0
    flow_mode: str = "person"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("at least one training stage is required")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.flow_mode not in FLOW_MODES:
            raise ValueError(f"flow_mode must be one of {FLOW_MODES}")
        if self.detection_noise_sigma < 0:
            raise ValueError("detection_noise_sigma must be nonnegative")

    @property
    def resolved_frozen_blocks(self) -> int:
        if self.frozen_blocks is None:
            return self.model.encoder.frozen_blocks
        return self.frozen_blocks

    def to_dict(self) -> dict:
        enc = self.model.encoder
        return {
            "stages": [s.to_dict() for s in self.stages],
            "model": {
                "encoder": {"patch_size": enc.patch_size, "depth": enc.depth,
                            "heads": enc.heads, "width": enc.width,
                            "frozen_blocks": enc.frozen_blocks, "mlp_ratio": enc.mlp_ratio},
                "head_hidden": list(self.model.head.hidden_dims),
                "num_objects": self.model.num_objects,
                "video_blocks": self.model.video_blocks,
                "video_heads": self.model.video_heads,
                "location_guidance": self.model.location_guidance,
                "feature_mode": self.model.feature_mode,
                "direct_pool": self.model.direct_pool,
            },
            "batch_size": self.batch_size,
            "seed": self.seed,
            "frozen_blocks": self.frozen_blocks,
            "detection_noise_sigma": self.detection_noise_sigma,
            "flow_mode": self.flow_mode,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        m = data["model"]
        model = ModelConfig(
            encoder=EncoderConfig(**m["encoder"]),
            head=HeadConfig(hidden_dims=tuple(m["head_hidden"])),
            num_objects=m["num_objects"], video_blocks=m["video_blocks"],
            video_heads=m["video_heads"], location_guidance=m["location_guidance"],
            feature_mode=m["feature_mode"], direct_pool=m["direct_pool"],
        )
        return cls(stages=tuple(StageConfig.from_dict(s) for s in data["stages"]),
                   model=model, batch_size=data["batch_size"], seed=data["seed"],
                   frozen_blocks=data["frozen_blocks"],
                   detection_noise_sigma=data["detection_noise_sigma"],
                   flow_mode=data["flow_mode"])


def lr_at(step: int, total_steps: int, initial_lr: float) -> float:
    """Cosine decay from ``initial_lr`` at step 0 to exactly 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return initial_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def build_model(run: RunConfig) -> GafModel:
    """Seeded model construction with the freeze policy applied."""
    torch.manual_seed(run.seed)
    model = GafModel(run.model)
    apply_freeze_policy(model.frame_encoder, run.resolved_frozen_blocks)
    return model


@dataclass
class TrainerState:
    run: RunConfig
    model: GafModel
    shuffle_rng: np.random.Generator
    history: list[dict] = field(default_factory=list)
    cursor_stage: int = 0
    cursor_epoch: int = 0
    optimizer: torch.optim.Adam | None = None
    done: bool = False

    def trainable_named_params(self) -> list[tuple[str, torch.nn.Parameter]]:
        return [(n, p) for n, p in self.model.named_parameters() if p.requires_grad]


def _fresh_state(run: RunConfig) -> TrainerState:
    model = build_model(run)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([run.seed, 7])))
    return TrainerState(run=run, model=model, shuffle_rng=rng)


def _prepare_labels(run: RunConfig, dataset: ClipDataset) -> SimpleNamespace:
    """Training targets with the detection-noise knob applied, plus the
    per-person location-encoding tables.

    Flow targets are scaled by 1/patch_size and object coordinates are
    normalized to [0, 1] so the loss magnitudes stay O(1).
    """
    cfg = dataset.config
    model = run.model
    noise_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([run.seed, 13])))
    centers = dataset.centers.copy()
    objects = dataset.objects.copy()
    if run.detection_noise_sigma > 0:
        sigma = run.detection_noise_sigma
        centers += noise_rng.normal(0.0, sigma, size=centers.shape).astype(np.float32)
        objects += noise_rng.normal(0.0, sigma, size=objects.shape).astype(np.float32)
        centers[..., 0] = np.clip(centers[..., 0], 0.0, cfg.width)
        centers[..., 1] = np.clip(centers[..., 1], 0.0, cfg.height)
        objects[..., 0::2] = np.clip(objects[..., 0::2], 0.0, cfg.width)
        objects[..., 1::2] = np.clip(objects[..., 1::2], 0.0, cfg.height)

    patch = model.encoder.patch_size
    flow_targets = dataset.flows / np.float32(patch)
    object_targets = objects.copy()
    object_targets[..., 0::2] /= np.float32(cfg.width)
    object_targets[..., 1::2] /= np.float32(cfg.height)

    from .encodings import location_encoding_batch

    loc_tables = location_encoding_batch(centers, model.width, cfg.width, cfg.height)

    boxes = None
    if model.feature_mode == "cropped":
        r = np.float32(cfg.agent_radius)
        boxes = np.concatenate([centers - r, centers + r], axis=-1)

    whole_flow_targets = None
    if run.flow_mode == "whole_image":
        whole_flow_targets = _rasterize_person_flows(centers, dataset.flows, cfg, patch)

    return SimpleNamespace(flow_targets=flow_targets, object_targets=object_targets,
                           loc_tables=loc_tables, boxes=boxes,
                           whole_flow_targets=whole_flow_targets)


def _rasterize_person_flows(centers: np.ndarray, flows: np.ndarray, cfg,
                            patch: int) -> np.ndarray:
    """Person flows painted onto the patch grid (background cells zero),
    scaled by 1/patch_size like the per-person targets."""
    n, p_n, t_n, _ = centers.shape
    gh, gw = cfg.height // patch, cfg.width // patch
    target = np.zeros((n, t_n, gh, gw, 2), dtype=np.float32)
    col = np.clip((centers[..., 0] // patch).astype(int), 0, gw - 1)
    row = np.clip((centers[..., 1] // patch).astype(int), 0, gh - 1)
    for i in range(n):
        for p in range(p_n):
            target[i, np.arange(t_n), row[i, p], col[i, p]] = flows[i, p] / patch
    return target


def _batch_loss(model: GafModel, run: RunConfig, stage: StageConfig,
                frames: torch.Tensor, labels: SimpleNamespace,
                idx: np.ndarray) -> tuple[torch.Tensor, dict[str, float]]:
    weights = stage.weights
    boxes = None
    if labels.boxes is not None:
        boxes = torch.from_numpy(labels.boxes[idx])
    feats, patches = model.frame_features(frames, boxes)
    g = None
    if weights.needs_gaf:
        g = pool_gaf(model.video_features(feats))

    terms: dict[str, torch.Tensor | None] = {k: None for k in losses.TERM_NAMES}
    logged: dict[str, float] = {}
    whole_term = None
    if weights.needs_flow:
        if run.flow_mode == "whole_image":
            target = torch.from_numpy(labels.whole_flow_targets[idx])
            pred = model.predict_whole_flow(patches, target.shape[2], target.shape[3])
            per_frame = ((pred - target) ** 2).mean(dim=(-3, -2, -1))
            whole_term = per_frame.sum(dim=1).mean()
            logged["flow_map"] = float(whole_term.detach())
        else:
            loc = torch.from_numpy(labels.loc_tables[idx])
            target = torch.from_numpy(labels.flow_targets[idx])
            pred_g = model.predict_flow_g(g, loc, _te(model, frames)) if weights.use_flow_g else None
            pred_i = model.predict_flow_i(feats, loc) if weights.use_flow_i else None
            terms["flow_g"], terms["flow_i"] = losses.flow_loss(pred_g, pred_i, target)
    if weights.needs_object:
        target = torch.from_numpy(labels.object_targets[idx])
        pred_g = model.predict_object_g(g, _te(model, frames)) if weights.use_object_g else None
        pred_i = model.predict_object_i(feats) if weights.use_object_i else None
        terms["object_g"], terms["object_i"] = losses.object_loss(pred_g, pred_i, target)

    for name, value in terms.items():
        if value is not None:
            logged[name] = float(value.detach())

    if run.flow_mode == "whole_image" and weights.needs_flow:
        # The whole-image variant swaps both per-person flow terms for one
        # patch-grid flow-map term under the same flow weight.
        total = weights.w_flow * whole_term
        for name in ("object_g", "object_i"):
            if terms[name] is not None and getattr(weights, f"use_{name}"):
                total = total + weights.w_object * terms[name]
    else:
        total = losses.total_loss(terms, weights)
    logged["total"] = float(total.detach())
    return total, logged


def _te(model: GafModel, frames: torch.Tensor) -> torch.Tensor:
    return model.temporal_table(frames.shape[1], device=frames.device)


def _check_finite(logged: dict[str, float], where: str) -> None:
    bad = [name for name, v in logged.items() if not math.isfinite(v)]
    if bad:
        raise TrainingDiverged(f"non-finite loss term(s) {bad} at {where}")


def train(run: RunConfig, dataset: ClipDataset, *, stop_after_epochs: int | None = None,
          log_path: str | None = None) -> TrainerState:
    """Run the staged training loop from scratch.

    ``stop_after_epochs`` halts after that many completed epochs (counted
    across stages) so the run can be checkpointed and resumed.
    """
    return _run_loop(_fresh_state(run), dataset, stop_after_epochs, log_path)


def resume_training(state: TrainerState, dataset: ClipDataset, *,
                    stop_after_epochs: int | None = None,
                    log_path: str | None = None) -> TrainerState:
    return _run_loop(state, dataset, stop_after_epochs, log_path)


def _run_loop(state: TrainerState, dataset: ClipDataset,
              stop_after_epochs: int | None, log_path: str | None) -> TrainerState:
    run = state.run
    model = state.model
    model.train()
    labels = _prepare_labels(run, dataset)
    n = len(dataset)
    bs = run.batch_size
    steps_per_epoch = math.ceil(n / bs)
    log_fh = open(log_path, "a") if log_path else None
    try:
        while state.cursor_stage < len(run.stages):
            stage = run.stages[state.cursor_stage]
            frames_all = dataset.frames(stage.input_variant)
            if state.optimizer is None:
                # Each stage declares its own schedule: fresh Adam moments.
                params = [p for _, p in state.trainable_named_params()]
                state.optimizer = torch.optim.Adam(params, lr=stage.initial_lr)
            total_steps = stage.epochs * steps_per_epoch
            while state.cursor_epoch < stage.epochs:
                if stop_after_epochs is not None and len(state.history) >= stop_after_epochs:
                    return state
                epoch = state.cursor_epoch
                perm = state.shuffle_rng.permutation(n)
                epoch_lr = lr_at(epoch * steps_per_epoch, total_steps, stage.initial_lr)
                sums: dict[str, float] = {}
                for b_i, start in enumerate(range(0, n, bs)):
                    idx = perm[start:start + bs]
                    lr = lr_at(epoch * steps_per_epoch + b_i, total_steps, stage.initial_lr)
                    for group in state.optimizer.param_groups:
                        group["lr"] = lr
                    frames = torch.from_numpy(frames_all[idx])
                    total, logged = _batch_loss(model, run, stage, frames, labels, idx)
                    _check_finite(logged, f"stage {state.cursor_stage} epoch {epoch} step {b_i}")
                    state.optimizer.zero_grad(set_to_none=True)
                    total.backward()
                    state.optimizer.step()
                    for k, v in logged.items():
                        sums[k] = sums.get(k, 0.0) + v
                record = {"stage": state.cursor_stage, "epoch": epoch, "lr": epoch_lr}
                record.update({k: v / steps_per_epoch for k, v in sorted(sums.items())})
                state.history.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                    log_fh.flush()
                state.cursor_epoch += 1
            state.cursor_stage += 1
            state.cursor_epoch = 0
            state.optimizer = None
        state.done = True
        return state
    finally:
        if log_fh:
            log_fh.close()


# -- checkpoint container ------------------------------------------------------


def save_checkpoint(state: TrainerState, path: str) -> None:
    """Serialize parameters, optimizer moments, cursor, and RNG state."""
    tensors: list[tuple[str, np.ndarray]] = []
    for name, param in state.model.named_parameters():
        tensors.append((f"model:{name}", param.detach().cpu().numpy()))
    opt_steps: dict[str, float] = {}
    if state.optimizer is not None:
        named = state.trainable_named_params()
        for (name, param) in named:
            st = state.optimizer.state.get(param)
            if not st:
                continue
            opt_steps[name] = float(st["step"])
            tensors.append((f"opt:{name}:exp_avg", st["exp_avg"].detach().cpu().numpy()))
            tensors.append((f"opt:{name}:exp_avg_sq", st["exp_avg_sq"].detach().cpu().numpy()))
    rng_state = state.shuffle_rng.bit_generator.state
    meta = {
        "run": state.run.to_dict(),
        "cursor": {"stage": state.cursor_stage, "epoch": state.cursor_epoch},
        "done": state.done,
        "has_optimizer": state.optimizer is not None,
        "opt_steps": opt_steps,
        "history": state.history,
        "np_rng": {"state": str(rng_state["state"]["state"]),
                   "inc": str(rng_state["state"]["inc"]),
                   "has_uint32": rng_state["has_uint32"],
                   "uinteger": rng_state["uinteger"]},
        "torch_rng": torch.get_rng_state().numpy().tobytes().hex(),
    }
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        write_magic(fh, GAFC_MAGIC, GAFC_VERSION)
        write_blob(fh, json.dumps(meta, sort_keys=True).encode("utf-8"))
        write_u32(fh, len(tensors))
        for name, arr in tensors:
            write_str(fh, name)
            write_u32(fh, arr.ndim)
            for dim in arr.shape:
                write_u32(fh, dim)
            write_f32_array(fh, arr)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> TrainerState:
    """Rebuild a :class:`TrainerState` exactly as saved."""
    with open(path, "rb") as fh:
        read_magic(fh, GAFC_MAGIC, GAFC_VERSION)
        meta = json.loads(read_blob(fh).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(read_u32(fh)):
            name = read_str(fh)
            ndim = read_u32(fh)
            shape = tuple(read_u32(fh) for _ in range(ndim))
            arrays[name] = read_f32_array(fh, shape)
        expect_eof(fh)

    run = RunConfig.from_dict(meta["run"])
    model = build_model(run)
    with torch.no_grad():
        for name, param in model.named_parameters():
            key = f"model:{name}"
            if key not in arrays:
                raise FormatError(f"checkpoint is missing tensor {key}")
            param.copy_(torch.from_numpy(arrays[key]))

    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(meta["np_rng"]["state"]), "inc": int(meta["np_rng"]["inc"])},
        "has_uint32": meta["np_rng"]["has_uint32"],
        "uinteger": meta["np_rng"]["uinteger"],
    }
    torch.set_rng_state(torch.from_numpy(
        np.frombuffer(bytes.fromhex(meta["torch_rng"]), dtype=np.uint8).copy()))

    state = TrainerState(run=run, model=model, shuffle_rng=rng,
                         history=list(meta["history"]),
                         cursor_stage=meta["cursor"]["stage"],
                         cursor_epoch=meta["cursor"]["epoch"], done=meta["done"])
    if meta["has_optimizer"]:
        stage = run.stages[state.cursor_stage]
        params = [p for _, p in state.trainable_named_params()]
        optimizer = torch.optim.Adam(params, lr=stage.initial_lr)
        for name, param in state.trainable_named_params():
            if name not in meta["opt_steps"]:
                continue
            optimizer.state[param] = {
                "step": torch.tensor(meta["opt_steps"][name]),
                "exp_avg": torch.from_numpy(arrays[f"opt:{name}:exp_avg"]),
                "exp_avg_sq": torch.from_numpy(arrays[f"opt:{name}:exp_avg_sq"]),
            }
        state.optimizer = optimizer
    return state
