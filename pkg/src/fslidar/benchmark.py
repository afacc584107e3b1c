"""The seeded synthetic benchmark: one base model, then per-seed few-shot fine-tuning runs."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

from .classspace import remap_for_stage
from .synthgen import SensorSpec, generate_sequence, standard_scene
from .tracker import TrackConfig, build_augmented_dataset
from .trainer import TrainConfig, base_train, evaluate, novel_finetune, sample_few_shot


@dataclass
class BenchmarkConfig:
    scene_seed: int = 0
    num_frames: int = 600
    ego_speed: float = 0.3
    noise_sigma: float = 0.0
    n_beams: int = 16
    azimuth_steps: int = 256
    val_seed: int = 1000
    val_frames: int = 120
    val_stride: int = 4
    base_stride: int = 2
    base: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=12, learning_rate=0.02, strategy="dynamic"))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=12, learning_rate=0.01))
    track: TrackConfig = field(default_factory=lambda: TrackConfig(frames_forward=10, frames_backward=10, gap=15))
    shot_min_points: int = 40

    def sensor(self) -> SensorSpec:
        return SensorSpec(n_beams=self.n_beams, azimuth_steps=self.azimuth_steps, noise_sigma=self.noise_sigma)

    def projection(self) -> dict:
        s = self.sensor()
        return {"height": s.n_beams, "width": s.azimuth_steps, "fov_up": s.fov_up, "fov_down": s.fov_down}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base"] = self.base.to_dict()
        d["finetune"] = self.finetune.to_dict()
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class Benchmark:
    """Holds the generated sequences and the shared base model."""

    def __init__(self, cfg: BenchmarkConfig | None = None, base_model=None):
        self.cfg = cfg = cfg or BenchmarkConfig()
        scene = standard_scene(cfg.scene_seed, cfg.num_frames, cfg.ego_speed, cfg.sensor())
        self.cs = scene.class_space()
        frames = generate_sequence(scene)
        self.scans = [f[0] for f in frames]
        self.labels = [f[1] for f in frames]
        val_scene = standard_scene(cfg.val_seed, cfg.val_frames, cfg.ego_speed, cfg.sensor())
        val = generate_sequence(val_scene)[::cfg.val_stride]
        self.val_scans = [f[0] for f in val]
        self.val_labels = [f[1] for f in val]
        self.seq_id = self.scans[0].sequence_id
        self._base_model = base_model
        self.base_history = []
        self._aug_cache = {}

    @property
    def base_model(self):
        if self._base_model is None:
            idx = range(0, len(self.scans), self.cfg.base_stride)
            self._base_model, self.base_history = base_train(
                [self.scans[i] for i in idx], [self.labels[i] for i in idx], self.cs, self.cfg.base,
                self.cfg.projection())
        return self._base_model

    def shots(self, seed: int, m: int | None = None) -> list[int]:
        m = m or self.cfg.finetune.shots
        frames = {self.seq_id: dict(enumerate(self.labels))}
        chosen = sample_few_shot(frames, m, self.cfg.finetune.min_scan_gap, self.cs, seed,
                                 self.cfg.shot_min_points)
        return sorted(pos for _, pos in chosen)

    def augmented(self, seed: int, track: TrackConfig | None = None):
        track = track or self.cfg.track
        key = (seed, track.frames_forward, track.frames_backward, track.gap, track.radius)
        if key not in self._aug_cache:
            gts = [(self.seq_id, t, remap_for_stage(self.labels[t], "novel", self.cs)) for t in self.shots(seed)]
            self._aug_cache[key] = build_augmented_dataset(gts, {self.seq_id: self.scans}, track, self.cs)
        return self._aug_cache[key]

    def run(self, seed: int, strategy: str | None = None, track: TrackConfig | None = None, **overrides):
        """Fine-tune from the shared base model and evaluate; returns (metrics row, model)."""
        cfg = replace(self.cfg.finetune, seed=seed, **({"strategy": strategy} if strategy else {}), **overrides)
        aug = self.augmented(seed, track)
        model, history = novel_finetune(self.base_model, aug, self.cs, cfg)
        _, scores = evaluate(model, self.val_scans, self.val_labels, self.cs)
        row = {"seed": seed, "strategy": cfg.strategy, "entries": len(aug), **scores}
        return row, model

    def evaluate_base(self) -> dict:
        return evaluate(self.base_model, self.val_scans, self.val_labels, self.cs)[1]


def track_config(base: TrackConfig, frames: int | None = None, gap: int | None = None) -> TrackConfig:
    """Split ``frames`` evenly into forward / backward (forward takes the odd one)."""
    kw = {}
    if frames is not None:
        kw["frames_forward"] = frames - frames // 2
        kw["frames_backward"] = frames // 2
    if gap is not None:
        kw["gap"] = gap
    return replace(base, **kw)
