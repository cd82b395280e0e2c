"""Training loop: alternating generator / discriminator updates with checkpoints and a metrics log."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace
from typing import Optional

import numpy as np

from .autodiff import NonFiniteError, Tape, backward, no_record, ops
from .hand.synth import GenConfig, sample_pose
from .io import Checkpoint, DatasetFile, generate_dataset
from .losses import Annotations, Discriminators, LossWeights, discriminator_loss, total_loss
from .metrics import pa_mpjpe
from .model import HambaModel, PipelineConfig, hamba_forward
from .optim import OptimizerState, adamw_step

log = logging.getLogger(__name__)

PRESETS = {"canonical": PipelineConfig, "desk": PipelineConfig.desk, "toy": PipelineConfig.toy}


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Optional[Path]):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    ablate: tuple = ()
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    data_seed: int = 0
    num_train: int = 512
    num_val: int = 64
    lr: float = 1e-5
    disc_lr: float = 1e-5
    weight_decay: float = 1e-4
    jr_loss_weight: float = 1.0
    use_adv: bool = True
    log_every: int = 10
    ckpt_every: int = 500
    out_dir: str = "runs/default"
    train_data: str = ""
    val_data: str = ""

    @classmethod
    def desk(cls, **overrides) -> "RunConfig":
        """Settings used for the single-CPU learning runs."""
        base = dict(preset="desk", lr=1e-3, disc_lr=1e-4)
        base.update(overrides)
        return cls(**base)

    def pipeline(self) -> PipelineConfig:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        return PRESETS[self.preset]().ablate(*[a for a in self.ablate if a])


@dataclass
class TrainResult:
    checkpoint: Path
    losses: list = field(default_factory=list)          # optimized objective per step (incl. auxiliary loss)
    total_losses: list = field(default_factory=list)    # total_loss of the final prediction per step
    final_step: int = 0


def annotations(records: np.ndarray) -> Annotations:
    return Annotations(joints2d=records["joints2d"], joints3d=records["joints3d"], theta=records["theta"],
                       beta=records["beta"], has_3d=records["has_3d"].astype(bool),
                       has_params=records["has_params"].astype(bool))


def sample_prior(rng: np.random.Generator, n: int, gen: GenConfig = GenConfig()):
    theta = np.stack([sample_pose(rng, gen) for _ in range(n)])
    beta = np.clip(rng.standard_normal((n, 10)), -gen.beta_clip, gen.beta_clip)
    return theta, beta


def predict_batches(model: HambaModel, images: np.ndarray, batch_size: int = 16):
    """Eval-mode forward passes over an image array; yields ForwardOutput per chunk."""
    was_training = model.training
    model.eval()
    try:
        with no_record():
            for start in range(0, len(images), batch_size):
                yield hamba_forward(images[start:start + batch_size].astype(np.float64), model)
    finally:
        model.train(was_training)


def validation_pa_mpjpe(model: HambaModel, data: DatasetFile, batch_size: int = 16) -> float:
    errors = []
    gt = data.records["joints3d"]
    for k, out in enumerate(predict_batches(model, data.records["image"], batch_size)):
        for i, j3d in enumerate(out.joints3d.data):
            errors.append(pa_mpjpe(j3d, gt[k * batch_size + i]))
    return float(np.mean(errors))


def _load_or_generate(path: str, count: int, seed: int) -> DatasetFile:
    if path:
        return DatasetFile.load(path)
    return generate_dataset(count, seed)


def _state_tensors(model, disc, opt_g, opt_d) -> dict:
    tensors = {f"model/{k}": v for k, v in model.store.state_arrays().items()}
    tensors.update({f"disc/{k}": v for k, v in disc.store.state_arrays().items()})
    for tag, opt in (("opt_g", opt_g), ("opt_d", opt_d)):
        tensors.update({f"{tag}/m/{k}": v for k, v in opt.m.items()})
        tensors.update({f"{tag}/v/{k}": v for k, v in opt.v.items()})
    return tensors


def _restore(ckpt: Checkpoint, model, disc, opt_g, opt_d) -> None:
    groups = {"model": {}, "disc": {}, "opt_g": {}, "opt_d": {}}
    for key, arr in ckpt.tensors.items():
        head, rest = key.split("/", 1)
        groups[head][rest] = arr
    model.store.load_state_arrays(groups["model"])
    disc.store.load_state_arrays(groups["disc"])
    for tag, opt in (("opt_g", opt_g), ("opt_d", opt_d)):
        opt.step = ckpt.optimizer[tag]["step"]
        opt.m = {k[2:]: v for k, v in groups[tag].items() if k.startswith("m/")}
        opt.v = {k[2:]: v for k, v in groups[tag].items() if k.startswith("v/")}


def build(cfg: RunConfig):
    model = HambaModel(cfg.pipeline(), seed=cfg.seed)
    disc = Discriminators(np.random.default_rng([cfg.seed, 1]))
    opt_g = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    opt_d = OptimizerState(lr=cfg.disc_lr, weight_decay=cfg.weight_decay)
    return model, disc, opt_g, opt_d


def train(cfg: RunConfig, train_data: Optional[DatasetFile] = None, resume: Optional[str] = None,
          weights: LossWeights = LossWeights()) -> TrainResult:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.gssk"
    metrics_path = out_dir / "metrics.jsonl"
    data = train_data if train_data is not None else _load_or_generate(cfg.train_data, cfg.num_train,
                                                                        cfg.data_seed)
    model, disc, opt_g, opt_d = build(cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    step = 0
    last_good: Optional[Path] = None
    if resume:
        ckpt = Checkpoint.load(resume)
        _restore(ckpt, model, disc, opt_g, opt_d)
        rng.bit_generator.state = ckpt.rng_state
        step = ckpt.step
        last_good = Path(resume)
    elif metrics_path.exists():
        metrics_path.unlink()

    def save(at_step: int) -> Path:
        config = {"run": dataclasses.asdict(cfg), "pipeline": cfg.pipeline().as_dict()}
        Checkpoint(config, at_step, _state_tensors(model, disc, opt_g, opt_d), rng.bit_generator.state,
                   {"opt_g": opt_g.hyper(), "opt_d": opt_d.hyper()}).save(ckpt_path)
        return ckpt_path

    losses, total_losses = [], []
    model.train()
    with metrics_path.open("a", encoding="utf-8") as metrics:
        while step < cfg.steps:
            idx = np.sort(rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False))
            batch = data.records[idx]
            gt = annotations(batch)
            real_theta, real_beta = sample_prior(rng, len(idx))
            try:
                with Tape() as tape:
                    out = hamba_forward(batch["image"].astype(np.float64), model)
                    loss, terms = total_loss(out, gt, weights, disc if cfg.use_adv else None)
                    if cfg.jr_loss_weight:
                        jr = SimpleNamespace(theta=out.jr_theta, beta=out.jr_beta,
                                             joints3d=out.jr_joints3d, joints2d=out.jr_joints2d)
                        jr_loss, jr_terms = total_loss(jr, gt, weights)
                        loss = ops.add(loss, ops.mul(jr_loss, cfg.jr_loss_weight))
                        terms["jr_total"] = jr_terms["total"]
                if not math.isfinite(float(loss.data)):
                    raise NonFiniteError("total loss is not finite")
                backward(loss, tape, model.store)
                disc.store.zero_grad()
                adamw_step(model.store, opt_g)
                with Tape() as dtape:
                    d_loss = discriminator_loss(disc, real_theta, real_beta, out.theta, out.beta)
                backward(d_loss, dtape, disc.store)
                adamw_step(disc.store, opt_d)
            except NonFiniteError as exc:
                raise TrainingAborted(f"non-finite values at step {step + 1}: {exc}", last_good) from exc
            step += 1
            terms["disc"] = float(d_loss.data)
            terms["objective"] = float(loss.data)
            losses.append(terms["objective"])
            total_losses.append(terms["total"])
            if step % cfg.log_every == 0 or step == cfg.steps:
                for term in sorted(terms):
                    metrics.write(json.dumps({"step": step, "term": term, "value": terms[term]}) + "\n")
                metrics.flush()
                log.info("step %d objective %.5f", step, terms["objective"])
            if step % cfg.ckpt_every == 0 or step == cfg.steps:
                last_good = save(step)
    return TrainResult(ckpt_path if last_good is None else last_good, losses=losses, final_step=step,
                       total_losses=total_losses)


def load_model(path) -> tuple[HambaModel, Checkpoint]:
    """Rebuild the model stored in a checkpoint."""
    ckpt = Checkpoint.load(path)
    pipe = dict(ckpt.config["pipeline"])
    pipe = {k: tuple(v) if isinstance(v, list) else v for k, v in pipe.items()}
    model = HambaModel(PipelineConfig(**pipe))
    model.store.load_state_arrays({k[len("model/"):]: v for k, v in ckpt.tensors.items()
                                   if k.startswith("model/")})
    return model, ckpt
