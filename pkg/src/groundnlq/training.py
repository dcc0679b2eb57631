"""Two-stage training (pretrain / finetune), checkpoints and gradient checking."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import AssignmentConfig, ConfigError, DecodeConfig, ModelConfig, TrainConfig, config_to_dict
from .data import GroundingDataset, GroundingSample, Moment
from .decode_eval import Candidate, decode_predictions, evaluate, soft_nms
from .heads_loss import total_loss
from .model import GroundNLQ, collate

logger = logging.getLogger(__name__)

MODEL_FILE = "model.pt"
MANIFEST_FILE = "manifest.json"
METRICS_FILE = "metrics.jsonl"


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite."""


def lr_at_step(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``max_lr`` then cosine decay reaching 0 at the last step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.warmup_epochs * steps_per_epoch
    last = cfg.total_epochs * steps_per_epoch - 1
    if step < warm:
        return cfg.max_lr * step / warm
    if step >= last:
        return 0.0 if last > warm else cfg.max_lr
    progress = (step - warm) / (last - warm)
    return 0.5 * cfg.max_lr * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    state_dict: dict
    manifest: dict = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.manifest["model"])

    def build_model(self) -> GroundNLQ:
        torch.manual_seed(0)
        model = GroundNLQ(self.model_config)
        model.load_state_dict(self.state_dict)
        return model

    def save(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict, out_dir / MODEL_FILE)
        (out_dir / MANIFEST_FILE).write_text(json.dumps(self.manifest, indent=2), encoding="utf-8")
        return out_dir

    @classmethod
    def load(cls, path: str | Path, expect: ModelConfig | None = None) -> "Checkpoint":
        path = Path(path)
        manifest = json.loads((path / MANIFEST_FILE).read_text(encoding="utf-8"))
        state = torch.load(path / MODEL_FILE, map_location="cpu", weights_only=True)
        ckpt = cls(state, manifest)
        if expect is not None and ckpt.model_config != expect:
            raise ConfigError(
                f"checkpoint {path} was trained with {ckpt.model_config}, incompatible with {expect}"
            )
        return ckpt


# ------------------------------------------------------------------ training


def _param_groups(model: torch.nn.Module, weight_decay: float):
    decay, no_decay = [], []
    for _, p in model.named_parameters():
        (decay if p.ndim >= 2 else no_decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


@torch.no_grad()
def predict(
    model: GroundNLQ,
    samples: Sequence[GroundingSample],
    dataset: GroundingDataset,
    decode_cfg: DecodeConfig,
    batch_size: int = 16,
) -> dict[str, list[Candidate]]:
    """Decode and soft-NMS the top ``keep_topk`` moments for each sample's query."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    preds = {}
    for i in range(0, len(samples), batch_size):
        batch = collate(samples[i : i + batch_size], dataset.features, dataset.queries, dtype=dtype)
        out = model(batch.video, batch.video_mask, batch.text, batch.text_mask)
        for b, s in enumerate(batch.samples):
            dur = batch.lengths[b] * batch.snippet_sec[b]
            cands = decode_predictions(out.sample(b), batch.snippet_sec[b], dur, decode_cfg)
            preds[s.query_id] = soft_nms(cands, decode_cfg)
    model.train(was_training)
    return preds


def ground_truth(samples: Sequence[GroundingSample]) -> dict[str, Moment]:
    return {s.query_id: s.moment for s in samples}


def build_manifest(cfg, model_cfg, assign_cfg, decode_cfg, **extra) -> dict:
    return {
        "model": config_to_dict(model_cfg),
        "train": config_to_dict(cfg),
        "assign": config_to_dict(assign_cfg),
        "decode": config_to_dict(decode_cfg),
        "seed": cfg.seed,
        **extra,
    }


def init_model(cfg: TrainConfig, model_cfg: ModelConfig) -> GroundNLQ:
    """Seeded model, warm-started from ``cfg.init_checkpoint`` when given.

    With ``reinit_heads`` the prediction heads are drawn fresh while every
    other parameter is copied exactly from the checkpoint.
    """
    torch.manual_seed(cfg.seed)
    model = GroundNLQ(model_cfg)
    if cfg.init_checkpoint:
        ckpt = Checkpoint.load(cfg.init_checkpoint, expect=model_cfg)
        model.load_state_dict(ckpt.state_dict)
        if cfg.reinit_heads:
            torch.manual_seed(cfg.seed + 1)
            model.reset_heads()
    return model


def run_stage(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    dataset: GroundingDataset,
    assign_cfg: AssignmentConfig | None = None,
    decode_cfg: DecodeConfig | None = None,
    out_dir: str | Path | None = None,
) -> Checkpoint:
    """Train one stage and return the checkpoint of the best validation epoch.

    Selection uses ``cfg.select_metric`` on ``cfg.eval_split``; without an
    evaluation split the last epoch is returned. Per-epoch records go to
    ``metrics.jsonl`` and the manifest when ``out_dir`` is given.
    """
    assign_cfg = assign_cfg or AssignmentConfig()
    decode_cfg = decode_cfg or DecodeConfig()
    train = dataset.split(cfg.train_split)
    if not train:
        raise ValueError(f"dataset has no samples in split {cfg.train_split!r}")
    evals = dataset.split(cfg.eval_split) if cfg.eval_split else []
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / METRICS_FILE).write_text("", encoding="utf-8")

    model = init_model(cfg, model_cfg)
    opt = torch.optim.AdamW(_param_groups(model, cfg.weight_decay), lr=0.0)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    label_cache: dict = {}
    trace, best, best_score = [], None, -math.inf
    step = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.total_epochs):
        model.train()
        order = rng.permutation(len(train))
        sums = {"loss_cls": 0.0, "loss_reg": 0.0}
        for i in range(0, len(train), cfg.batch_size):
            lr = lr_at_step(step, steps_per_epoch, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            batch = collate(
                [train[j] for j in order[i : i + cfg.batch_size]],
                dataset.features, dataset.queries, assign_cfg, model_cfg.n_levels, label_cache=label_cache,
            )
            out = model(batch.video, batch.video_mask, batch.text, batch.text_mask)
            loss, parts = total_loss(out, batch.targets, assign_cfg)
            if not torch.isfinite(loss):
                manifest = build_manifest(
                    cfg, model_cfg, assign_cfg, decode_cfg, epoch=epoch, step=step, metrics=trace,
                    diverged={"step": step, "lr": lr, **parts},
                )
                if out_dir:
                    (out_dir / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: {parts}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            sums["loss_cls"] += parts["loss_cls"]
            sums["loss_reg"] += parts["loss_reg"]
            step += 1
        record = {
            "epoch": epoch,
            "loss_cls": sums["loss_cls"] / steps_per_epoch,
            "loss_reg": sums["loss_reg"] / steps_per_epoch,
            "lr": lr,
        }
        if evals:
            result = evaluate(predict(model, evals, dataset, decode_cfg), ground_truth(evals))
            record.update(result.recall)
        trace.append(record)
        if out_dir:
            with (out_dir / METRICS_FILE).open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
        logger.info("epoch %d %s (%.1fs)", epoch, record, time.perf_counter() - t0)
        score = record.get(cfg.select_metric, epoch if not evals else -math.inf)
        if score > best_score or best is None:
            best_score, best = score, (epoch, copy.deepcopy(model.state_dict()))

    best_epoch, state = best
    manifest = build_manifest(
        cfg, model_cfg, assign_cfg, decode_cfg,
        epoch=best_epoch, metrics=trace, best={cfg.select_metric: best_score} if evals else {},
    )
    ckpt = Checkpoint(state, manifest)
    if out_dir:
        ckpt.save(out_dir)
    return ckpt


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    precision: str
    tolerance: float
    max_rel_err: float
    per_param: dict[str, float]
    grad_norms: dict[str, float]
    below_noise: dict[str, float]  # |fd - an| / noise floor, for tensors with no measurable slope
    noise_floor: float
    kink_retries: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance and all(r <= 1.0 for r in self.below_noise.values())


def _tiny_batch(model_cfg: ModelConfig, assign_cfg: AssignmentConfig, T: int, seed: int, dtype):
    from .data import FeatureSequence, QueryTokens

    rng = np.random.default_rng(seed)
    feats, queries, samples = {}, {}, []
    # one long, one medium and one short moment so several levels hold positives
    for b, (t_len, l_len, frac) in enumerate([(T, 5, 1.0), (max(2, T - 3), 3, 0.5), (T, 4, 0.15)]):
        vid, qid = f"v{b}", f"q{b}"
        feats[vid] = FeatureSequence(vid, rng.normal(size=(t_len, model_cfg.D_video_in)), 1.0)
        queries[qid] = QueryTokens(qid, rng.normal(size=(l_len, model_cfg.D_text_in)))
        w = max(1.0, round(frac * t_len))
        a = float(rng.integers(0, t_len - w + 1))
        samples.append(GroundingSample(vid, qid, Moment(a, a + w), "train"))
    return collate(samples, feats, queries, assign_cfg, model_cfg.n_levels, dtype=dtype)


def grad_check(
    model_cfg: ModelConfig,
    seed: int = 0,
    tolerance: float = 1e-6,
    precision: str = "f64",
    T: int = 16,
    h: float = 1e-5,
    assign_cfg: AssignmentConfig | None = None,
    max_retries: int = 5,
) -> GradCheckReport:
    """Compare autograd gradients of the total loss with central differences.

    The analytic gradient is computed in ``precision``. The finite-difference
    oracle always runs in float64 on an exact copy of the parameters: each
    tensor ``p`` is moved to ``p +- h * v`` and the slope ``(L+ - L-) / 2h``
    is compared with ``<grad, v>``. ``v`` is a unit direction blending the
    normalized analytic gradient with a random Gaussian direction, so the
    slope stays well above rounding noise while errors orthogonal to the
    gradient are still caught. ``h`` must stay small: ReLU and max-pool
    kinks make steps near 1e-3 disagree with the exact derivative at the
    1e-3 relative level regardless of precision.

    The slope is the Richardson combination of central differences at
    ``h`` and ``h / 2``. When those two disagree beyond smooth-function
    truncation the segment crosses a kink; the check is then retried with
    a fresh direction and a 4x smaller step (up to ``max_retries`` times;
    counts are reported). Kinks lie unusually close along the gradient
    direction, so shrinking the step matters more than redrawing.

    Tensors with zero true slope (key biases, which softmax ignores) are
    checked against the rounding-noise floor instead of relatively. The
    classification prior is set to 0.5 so negatives at every pyramid level
    carry gradient; dropout is disabled.
    """
    if T > 16 or model_cfg.d_model > 32:
        raise ConfigError("grad_check needs a tiny model: T <= 16 and d_model <= 32")
    dtype = {"f64": torch.float64, "f32": torch.float32}[precision]
    assign_cfg = assign_cfg or AssignmentConfig()
    cfg = ModelConfig(**{**model_cfg.__dict__, "dropout": 0.0, "cls_prior_prob": 0.5})
    torch.manual_seed(seed)
    model = GroundNLQ(cfg).to(dtype).eval()
    batch = _tiny_batch(cfg, assign_cfg, T, seed, dtype)
    model.zero_grad(set_to_none=True)
    out = model(batch.video, batch.video_mask, batch.text, batch.text_mask)
    loss = total_loss(out, batch.targets, assign_cfg)[0]
    loss.backward()

    ref = copy.deepcopy(model).to(torch.float64)
    ref_batch = _tiny_batch(cfg, assign_cfg, T, seed, torch.float64)

    def ref_loss() -> float:
        out = ref(ref_batch.video, ref_batch.video_mask, ref_batch.text, ref_batch.text_mask)
        return float(total_loss(out, ref_batch.targets, assign_cfg)[0].detach())

    base = ref_loss()
    floor32 = 64 * torch.finfo(torch.float32).eps if precision == "f32" else 0.0

    def noise_at(step: float) -> float:
        return max(64 * torch.finfo(torch.float64).eps * (abs(base) + 1.0) / step, floor32)

    gen = torch.Generator().manual_seed(seed)
    ref_params = dict(ref.named_parameters())
    per_param, norms, below, retries = {}, {}, {}, {}

    def slope(q, orig, v, step):
        q.copy_(orig + step * v)
        lp = ref_loss()
        q.copy_(orig - step * v)
        lm = ref_loss()
        q.copy_(orig)
        return (lp - lm) / (2 * step)

    with torch.no_grad():
        for name, p in model.named_parameters():
            g = (p.grad if p.grad is not None else torch.zeros_like(p)).to(torch.float64)
            norms[name] = float(g.norm())
            q = ref_params[name]
            orig = q.detach().clone()
            for attempt in range(max_retries + 1):
                v = torch.randn(p.shape, generator=gen, dtype=torch.float64)
                v = v / v.norm()
                if norms[name] > 0:
                    v = v + g / g.norm()
                    v = v / v.norm()
                an = float((g * v).sum())
                step = h / 4**attempt
                f1, f2 = slope(q, orig, v, step), slope(q, orig, v, step / 2)
                fd = (4 * f2 - f1) / 3
                scale = max(abs(fd), abs(an))
                noise = noise_at(step)
                # on a smooth segment f1 and f2 agree to O(h^2); a kink breaks that
                if abs(f1 - f2) <= max(0.25 * tolerance * scale, noise):
                    break
            retries[name] = attempt
            if scale < noise:
                below[name] = abs(fd - an) / noise
            else:
                per_param[name] = abs(fd - an) / scale
    max_err = max(per_param.values(), default=0.0)
    return GradCheckReport(precision, tolerance, max_err, per_param, norms, below, noise_at(h), retries)
