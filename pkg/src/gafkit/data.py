"""Dataset generation, the GAFD clip file format, and in-memory loading."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import scenes
from .fileio import (FormatError, expect_eof, read_f32_array, read_magic, read_u16,
                     read_u32, write_f32_array, write_magic, write_u16, write_u32)

GAFD_MAGIC = b"GAFD"
GAFD_VERSION = 1
MANIFEST_NAME = "manifest.json"

# Disjoint per-split seed bases; a split may hold at most _SPLIT_SPAN clips.
_SPLIT_SPAN = 1 << 20
_SPLIT_BASE = {"train": 0, "test": _SPLIT_SPAN}

INPUT_VARIANTS = ("original", "inpainted", "masked")


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    seed: int
    label: str
    path: str  # relative to the dataset directory


@dataclass
class DatasetManifest:
    config: scenes.SceneConfig
    split: str
    records: list[ClipRecord]
    root: str = ""

    @property
    def class_set(self) -> tuple[str, ...]:
        return self.config.class_set

    def to_dict(self) -> dict:
        return {
            "format_version": GAFD_VERSION,
            "split": self.split,
            "config": self.config.to_dict(),
            "clips": [
                {"id": r.clip_id, "seed": r.seed, "class": r.label, "path": r.path}
                for r in self.records
            ],
        }


def write_clip_file(path: str, clip: scenes.Clip, class_index: int) -> None:
    cfg = clip.config
    with open(path, "wb") as fh:
        write_magic(fh, GAFD_MAGIC, GAFD_VERSION)
        for dim in (cfg.frames, cfg.height, cfg.width, 3, cfg.num_people, cfg.num_objects):
            write_u32(fh, dim)
        write_f32_array(fh, clip.frames)
        write_f32_array(fh, clip.person_tracks)
        write_f32_array(fh, clip.flows_gt)
        write_f32_array(fh, clip.object_track)
        write_u16(fh, class_index)


def read_clip_file(path: str, config: scenes.SceneConfig, seed: int) -> scenes.Clip:
    with open(path, "rb") as fh:
        read_magic(fh, GAFD_MAGIC, GAFD_VERSION)
        t_n, h, w, c, p_n, n_o = (read_u32(fh) for _ in range(6))
        if (t_n, h, w, c, p_n, n_o) != (config.frames, config.height, config.width, 3,
                                        config.num_people, config.num_objects):
            raise FormatError(
                f"clip dims {(t_n, h, w, c, p_n, n_o)} do not match the manifest config"
            )
        frames = read_f32_array(fh, (t_n, h, w, 3))
        tracks = read_f32_array(fh, (p_n, t_n, 4))
        flows = read_f32_array(fh, (p_n, t_n, 2))
        objects = read_f32_array(fh, (t_n, 2 * n_o))
        class_index = read_u16(fh)
        expect_eof(fh)
    if class_index >= len(config.class_set):
        raise FormatError(f"class index {class_index} outside the configured class set")
    return scenes.Clip(frames=frames, person_tracks=tracks, flows_gt=flows,
                       object_track=objects, label=config.class_set[class_index],
                       config=config, seed=seed)


def split_seeds(config: scenes.SceneConfig, n_per_class: int, split: str) -> dict[str, list[int]]:
    """Per-class clip seeds for a split; train and test ranges never collide."""
    if split not in _SPLIT_BASE:
        raise ValueError(f"split must be one of {sorted(_SPLIT_BASE)}, got {split!r}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    span = n_per_class * len(config.class_set)
    if span > _SPLIT_SPAN:
        raise ValueError(
            f"{span} clips would overflow the {split!r} seed range and collide "
            f"with the other split (max {_SPLIT_SPAN})"
        )
    base = _SPLIT_BASE[split]
    return {
        cls: [base + ci * n_per_class + i for i in range(n_per_class)]
        for ci, cls in enumerate(config.class_set)
    }


def generate_dataset(config: scenes.SceneConfig, n_per_class: int, split: str,
                     out_dir: str) -> DatasetManifest:
    """Generate ``n_per_class`` clips per class and write them under ``out_dir``."""
    seeds = split_seeds(config, n_per_class, split)
    os.makedirs(os.path.join(out_dir, "clips"), exist_ok=True)
    records = []
    for ci, cls in enumerate(config.class_set):
        for i, seed in enumerate(seeds[cls]):
            clip = scenes.generate_clip(config, seed, cls)
            clip_id = f"{split}-{ci:02d}-{i:05d}"
            rel = os.path.join("clips", clip_id + ".gafd")
            write_clip_file(os.path.join(out_dir, rel), clip, ci)
            records.append(ClipRecord(clip_id=clip_id, seed=seed, label=cls, path=rel))
    manifest = DatasetManifest(config=config, split=split, records=records, root=out_dir)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
    return manifest


def load_manifest(dataset_dir: str) -> DatasetManifest:
    with open(os.path.join(dataset_dir, MANIFEST_NAME)) as fh:
        data = json.load(fh)
    if data.get("format_version") != GAFD_VERSION:
        raise FormatError(f"unsupported manifest version {data.get('format_version')}")
    config = scenes.SceneConfig.from_dict(data["config"])
    records = [
        ClipRecord(clip_id=c["id"], seed=c["seed"], label=c["class"], path=c["path"])
        for c in data["clips"]
    ]
    return DatasetManifest(config=config, split=data["split"], records=records,
                           root=dataset_dir)


class ClipDataset:
    """In-memory view of a dataset split with derived training inputs.

    Frames for a given input variant (original / inpainted / masked) are
    rendered once and cached as a single float32 array; labels (box centers,
    flows, object coordinates) are precomputed for every clip.
    """

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.config = manifest.config
        self.class_set = manifest.class_set
        self.labels = np.array([self.class_set.index(r.label) for r in manifest.records],
                               dtype=np.int64)
        self.clip_ids = [r.clip_id for r in manifest.records]
        cfg = self.config
        n = len(manifest.records)
        self.centers = np.empty((n, cfg.num_people, cfg.frames, 2), dtype=np.float32)
        self.flows = np.empty((n, cfg.num_people, cfg.frames, 2), dtype=np.float32)
        self.objects = np.empty((n, cfg.frames, 2 * cfg.num_objects), dtype=np.float32)
        self._frame_cache: dict[str, np.ndarray] = {}
        for i, rec in enumerate(manifest.records):
            clip = self.load_clip(i)
            self.centers[i] = (clip.person_tracks[:, :, :2] + clip.person_tracks[:, :, 2:]) / 2.0
            self.flows[i] = clip.flows_gt
            self.objects[i] = clip.object_track

    def __len__(self) -> int:
        return len(self.manifest.records)

    def load_clip(self, index: int) -> scenes.Clip:
        rec = self.manifest.records[index]
        return read_clip_file(os.path.join(self.manifest.root, rec.path),
                              self.config, rec.seed)

    def frames(self, variant: str = "original") -> np.ndarray:
        """All frames under ``variant`` as one (N, T, H, W, 3) float32 array."""
        if variant not in INPUT_VARIANTS:
            raise ValueError(f"input variant must be one of {INPUT_VARIANTS}, got {variant!r}")
        cached = self._frame_cache.get(variant)
        if cached is not None:
            return cached
        cfg = self.config
        out = np.empty((len(self), cfg.frames, cfg.height, cfg.width, 3), dtype=np.float32)
        for i in range(len(self)):
            clip = self.load_clip(i)
            if variant == "inpainted":
                clip = scenes.remove_object(clip)
            elif variant == "masked":
                clip = scenes.mask_object(clip)
            out[i] = clip.frames
        self._frame_cache = {variant: out}  # keep at most one variant resident
        return out

    def drop_frame_cache(self) -> None:
        self._frame_cache = {}


def load_dataset(dataset_dir: str) -> ClipDataset:
    return ClipDataset(load_manifest(dataset_dir))
