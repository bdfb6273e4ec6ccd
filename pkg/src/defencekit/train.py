"""Training loops, evaluation driver and the two-stage inference path.

Both loops are single-threaded and fully deterministic given the seed: batch
order comes from named random streams, every loss value is logged as
`step,term,value`, and training aborts on the first non-finite loss.  In each
GAN iteration the two critics are updated first, then the generator, with
monotonic counters recording the order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import Manifest, occlude
from .imageio import load_pgm, load_ppm, save_pgm, save_ppm
from .layers import Module
from .losses import (
    FeaturePyramid,
    StructureSmoother,
    bce_loss,
    d_structure_loss,
    d_texture_loss,
    g_adversarial_loss,
    perceptual_loss,
    rec_loss,
    structure_loss,
    total_generator_loss,
)
from .metrics import adaptive_threshold, dataset_report, f_measure, precision_recall
from .models import (
    Discriminator,
    DiscriminatorConfig,
    GeneratorConfig,
    InpaintGenerator,
    OccNet,
    OccNetConfig,
    composite_output,
)
from .optim import Adam, lr_schedule
from .tensor import Rng, Tape, Tensor

__all__ = [
    "TrainingDiverged",
    "TrainResult",
    "train_segmentation",
    "train_inpainting",
    "evaluate_segmentation",
    "infer",
    "batch_order",
    "load_split",
]


class TrainingDiverged(ArithmeticError):
    """A logged loss went non-finite; training stops immediately."""


@dataclass
class TrainResult:
    checkpoint_path: str
    loss_log: list[tuple[int, str, float]]
    metric_log: list[tuple[int, str, float]] = field(default_factory=list)
    # per-iteration (texture critic, structure critic, generator) update clocks
    update_order: list[tuple[int, int, int]] = field(default_factory=list)
    models: dict = field(default_factory=dict)


def load_split(manifest: Manifest, split: str):
    """Load a split fully into memory: (backgrounds, masks, observations)."""
    samples = manifest.split(split)
    if not samples:
        raise ValueError(f"manifest has no {split!r} samples")
    bgs = np.stack([load_ppm(s.background) for s in samples])
    masks = np.stack([load_pgm(s.mask) for s in samples])[:, None]
    obs = np.stack([load_ppm(s.observation) for s in samples])
    if not np.all((masks == 0.0) | (masks == 1.0)):
        raise ValueError("manifest masks must be strictly binary")
    return bgs, masks, obs


def batch_order(rng: Rng, epoch: int, count: int) -> np.ndarray:
    """Deterministic sample order for one epoch."""
    return rng.stream(f"epoch{epoch}").permutation(count)


def _write_log(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for step, term, value in rows:
            fh.write(f"{step},{term},{value:.17g}\n")


def _log(rows, step, term, value) -> float:
    if not np.isfinite(value):
        raise TrainingDiverged(f"loss {term!r} became non-finite at step {step}")
    rows.append((step, term, float(value)))
    return value


def _gather_state(models: dict[str, Module]):
    tensors = {}
    for prefix, model in models.items():
        for name, p in model.named_parameters():
            tensors[f"{prefix}.{name}"] = p.data.copy()
        for name, buf in model.named_buffers():
            tensors[f"{prefix}.buffer.{name}"] = np.asarray(buf).copy()
    return tensors


def _restore_state(models: dict[str, Module], tensors: dict[str, np.ndarray]) -> None:
    for prefix, model in models.items():
        for name, p in model.named_parameters():
            p.data[...] = tensors[f"{prefix}.{name}"]
        for name, buf in model.named_buffers():
            buf[...] = tensors[f"{prefix}.buffer.{name}"]


def _gather_optimizers(opts: dict[str, Adam]):
    table = {}
    for prefix, opt in opts.items():
        for name in opt.m:
            table[f"{prefix}.{name}"] = (opt.t, opt.m[name], opt.v[name])
    return table


def _checkpoint(cfg: TrainConfig, models, opts, rng: Rng, step: int, epoch: int,
                extra_meta=None) -> Checkpoint:
    meta = {f"cfg.{k}": v for k, v in
            (line.split(" = ", 1) for line in cfg.to_text().strip().splitlines())}
    meta["step"] = str(step)
    meta["epoch"] = str(epoch)
    seed, label, counter = rng.state()
    meta["rng"] = f"{seed}|{label}|{counter}"
    for key, value in (extra_meta or {}).items():
        meta[key] = value
    return Checkpoint(cfg.task, meta, _gather_state(models), _gather_optimizers(opts))


def build_segmentation_models(cfg: TrainConfig) -> dict[str, Module]:
    rng = Rng(cfg.seed, "model")
    return {"occnet": OccNet(OccNetConfig(width_multiplier=cfg.width_multiplier),
                             rng.stream("occnet"))}


def build_inpainting_models(cfg: TrainConfig) -> dict[str, Module]:
    rng = Rng(cfg.seed, "model")
    gen_cfg = GeneratorConfig(base_channels=cfg.base_channels, growth=cfg.growth,
                              block_layers=cfg.block_layers)
    d_cfg = DiscriminatorConfig(input_size=cfg.image_size)
    return {
        "generator": InpaintGenerator(gen_cfg, rng.stream("generator")),
        "d_texture": Discriminator(d_cfg, rng.stream("d_texture")),
        "d_structure": Discriminator(d_cfg, rng.stream("d_structure")),
    }


def _eval_segmentation_f(model: OccNet, obs: np.ndarray, masks: np.ndarray) -> float:
    model.eval()
    scores = []
    for i in range(obs.shape[0]):
        pred = model(Tensor(obs[i:i + 1], requires_grad=False)).data[0, 0]
        binary = adaptive_threshold(pred, 1.0)
        p, r = precision_recall(binary, masks[i, 0])
        scores.append(f_measure(p, r))
    model.train()
    return float(np.mean(scores))


def train_segmentation(cfg: TrainConfig) -> TrainResult:
    """Per-step pixel BCE against the fence masks, Adam with a halving
    learning-rate schedule, periodic eval-split F-measure."""
    manifest = Manifest.load(cfg.manifest)
    _, masks, obs = load_split(manifest, "train")
    try:
        _, eval_masks, eval_obs = load_split(manifest, "eval")
    except ValueError:
        eval_masks = eval_obs = None
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    models = build_segmentation_models(cfg)
    net: OccNet = models["occnet"]
    opt = Adam(list(net.named_parameters()), rate=cfg.base_rate)
    run_rng = Rng(cfg.seed, "train")
    n = obs.shape[0]
    loss_rows: list[tuple[int, str, float]] = []
    metric_rows: list[tuple[int, str, float]] = []
    step = 0
    last_saved = -1
    ckpt_path = out / "checkpoint.dfk"

    def save(step, epoch):
        save_checkpoint(ckpt_path, _checkpoint(
            cfg, models, {"occnet": opt}, run_rng, step, epoch,
            {"meanpixel": "{:.17g} {:.17g} {:.17g}".format(*manifest.mean_pixel)}))

    halve_every = max(1, cfg.effective_epochs // 4)
    for epoch in range(cfg.effective_epochs):
        opt.rate = lr_schedule(epoch, cfg.base_rate, halve_every)
        order = batch_order(run_rng, epoch, n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            x = Tensor(obs[idx], requires_grad=False)
            y = masks[idx]
            with Tape() as tape:
                pred = net(x)
                loss = bce_loss(pred, y)
                tape.backward(loss)
            _log(loss_rows, step, "bce", loss.item())
            opt.step()
            opt.zero_grad()
            step += 1
            if cfg.eval_every and step % cfg.eval_every == 0 and eval_obs is not None:
                metric_rows.append((step, "eval_f", _eval_segmentation_f(net, eval_obs, eval_masks)))
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save(step, epoch)
                last_saved = step
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    if last_saved != step:
        save(step, epoch)
    _write_log(out / "losses.csv", loss_rows)
    if metric_rows:
        _write_log(out / "metrics.csv", metric_rows)
    return TrainResult(str(ckpt_path), loss_rows, metric_rows, models=models)


def train_inpainting(cfg: TrainConfig, stop_when=None) -> TrainResult:
    """LSGAN loop: per iteration the texture critic, then the structure
    critic, then the generator (with both critics frozen) are updated.

    `stop_when(step, loss_rows)` may end the run early (used by overfit
    probes); all logged losses must stay finite or the loop aborts.
    """
    manifest = Manifest.load(cfg.manifest)
    bgs, masks, obs = load_split(manifest, "train")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    models = build_inpainting_models(cfg)
    gen: InpaintGenerator = models["generator"]
    d_tex: Discriminator = models["d_texture"]
    d_str: Discriminator = models["d_structure"]
    pyramid = FeaturePyramid(seed=cfg.perceptual_seed)
    smoother = StructureSmoother()

    opts = {
        "generator": Adam(list(gen.named_parameters()), rate=cfg.base_rate),
        "d_texture": Adam(list(d_tex.named_parameters()), rate=cfg.base_rate),
        "d_structure": Adam(list(d_str.named_parameters()), rate=cfg.base_rate),
    }
    run_rng = Rng(cfg.seed, "train")
    n = obs.shape[0]
    # files store [0, 1]; the generator works in [-1, 1]
    y_all = bgs * 2.0 - 1.0
    x_all = obs * 2.0 - 1.0

    loss_rows: list[tuple[int, str, float]] = []
    order_rows: list[tuple[int, int, int]] = []
    clock = 0
    step = 0
    last_saved = -1
    ckpt_path = out / "checkpoint.dfk"

    def save(step, epoch):
        save_checkpoint(ckpt_path, _checkpoint(
            cfg, models, opts, run_rng, step, epoch,
            {"meanpixel": "{:.17g} {:.17g} {:.17g}".format(*manifest.mean_pixel)}))

    stop = False
    for epoch in range(cfg.effective_epochs):
        order = batch_order(run_rng, epoch, n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            y = Tensor(y_all[idx], requires_grad=False)
            x = Tensor(x_all[idx], requires_grad=False)
            m = Tensor(masks[idx], requires_grad=False)

            with Tape() as g_tape:
                raw = gen(x, m)
                composite = composite_output(raw, x, m)
                l_rec = rec_loss(raw, y)
                l_per = perceptual_loss(pyramid, raw, y)
                l_str = structure_loss(smoother, raw, y)

                fake = composite.detach()
                # critics first: texture on images, structure on smoothed images
                with Tape() as d_tape:
                    ld_t = d_texture_loss(d_tex(y), d_tex(fake))
                    d_tape.backward(ld_t)
                _log(loss_rows, step, "d_t", ld_t.item())
                opts["d_texture"].step()
                opts["d_texture"].zero_grad()
                clock += 1
                t_tex = clock

                with Tape() as d_tape:
                    real_s = smoother(y)
                    fake_s = smoother(fake)
                    ld_s = d_structure_loss(d_str(real_s), d_str(fake_s))
                    d_tape.backward(ld_s)
                _log(loss_rows, step, "d_s", ld_s.item())
                opts["d_structure"].step()
                opts["d_structure"].zero_grad()
                clock += 1
                t_str = clock

                # generator sees the freshly updated critics; its adversarial
                # gradients flow through the composited fake only
                adv_t, adv_s = g_adversarial_loss(
                    d_tex(composite), d_str(smoother(composite)))
                _log(loss_rows, step, "rec", l_rec.item())
                _log(loss_rows, step, "per", l_per.item())
                _log(loss_rows, step, "str", l_str.item())
                _log(loss_rows, step, "adv_t", adv_t.item())
                _log(loss_rows, step, "adv_s", adv_s.item())
                total = total_generator_loss(cfg.weights, l_rec, l_per, l_str, adv_t, adv_s)
                g_tape.backward(total)
            opts["generator"].step()
            for opt in opts.values():
                opt.zero_grad()
            clock += 1
            order_rows.append((t_tex, t_str, clock))

            step += 1
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save(step, epoch)
                last_saved = step
            if stop_when is not None and stop_when(step, loss_rows):
                stop = True
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stop = True
            if stop:
                break
        if stop:
            break
    if last_saved != step:
        save(step, epoch)
    _write_log(out / "losses.csv", loss_rows)
    return TrainResult(str(ckpt_path), loss_rows, update_order=order_rows, models=models)


# ---------------------------------------------------------------------------
# Restore / evaluate / infer
# ---------------------------------------------------------------------------


def _config_from_meta(meta: dict[str, str], task: str) -> TrainConfig:
    from .config import TrainConfig as TC
    values = {k[4:]: v for k, v in meta.items() if k.startswith("cfg.")}
    values["task"] = task
    return TC.from_values(values)


def restore_models(path, expect_task: str | None = None):
    """Rebuild the models stored in a checkpoint; returns (models, cfg, meta)."""
    ckpt = load_checkpoint(path, expect_task)
    cfg = _config_from_meta(ckpt.meta, ckpt.task)
    if ckpt.task == "segmentation":
        models = build_segmentation_models(cfg)
    else:
        models = build_inpainting_models(cfg)
    _restore_state(models, ckpt.tensors)
    for model in models.values():
        model.eval()
    return models, cfg, ckpt.meta


def evaluate_segmentation(checkpoint_path, manifest_path, out_report, out_curve=None,
                          split: str = "eval"):
    """Run the segmenter over a manifest split and write the metrics report."""
    models, _, _ = restore_models(checkpoint_path, "segmentation")
    net: OccNet = models["occnet"]
    manifest = Manifest.load(manifest_path)
    samples = manifest.split(split)
    if not samples:
        raise ValueError(f"manifest has no {split!r} samples")
    entries = []
    outputs = {}
    for s in samples:
        obs = load_ppm(s.observation)
        truth = load_pgm(s.mask)
        pred = net(Tensor(obs[None], requires_grad=False)).data[0, 0]
        entries.append((s.observation, truth))
        outputs[s.observation] = pred
    report = dataset_report(entries, outputs)
    report.write(out_report, out_curve)
    return report


@dataclass
class InferResult:
    outputs: dict[str, str]
    segmentation_forwards: int
    generator_forwards: int


def infer(inpaint_checkpoint=None, image_path=None, mask_path=None,
          seg_checkpoint=None, out_dir="."):
    """Single-pass inference.

    With only a segmentation checkpoint: writes the probability map and its
    adaptive-threshold binarization.  With an inpainting checkpoint: uses the
    given mask, or runs the segmenter first when none is supplied (the full
    two-stage pipeline, one forward pass per stage); visible pixels of the
    output are bit-identical to the input.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image = load_ppm(image_path)
    outputs: dict[str, str] = {}
    seg_forwards = gen_forwards = 0

    seg_models = None
    if seg_checkpoint is not None:
        seg_models, _, _ = restore_models(seg_checkpoint, "segmentation")

    if inpaint_checkpoint is None:
        if seg_models is None:
            raise ValueError("need a segmentation checkpoint for mask prediction")
        net: OccNet = seg_models["occnet"]
        before = net.forward_count
        prob = net(Tensor(image[None], requires_grad=False)).data[0, 0]
        seg_forwards = net.forward_count - before
        mask = adaptive_threshold(prob, 1.0)
        outputs["probability"] = str(out / "probability.pgm")
        outputs["mask"] = str(out / "mask.pgm")
        save_pgm(outputs["probability"], prob)
        save_pgm(outputs["mask"], mask)
        return InferResult(outputs, seg_forwards, 0)

    models, cfg, meta = restore_models(inpaint_checkpoint, "inpainting")
    gen: InpaintGenerator = models["generator"]
    if mask_path is not None:
        mask = load_pgm(mask_path)
    else:
        if seg_models is None:
            raise ValueError("no mask given and no segmentation checkpoint supplied")
        net = seg_models["occnet"]
        before = net.forward_count
        prob = net(Tensor(image[None], requires_grad=False)).data[0, 0]
        seg_forwards = net.forward_count - before
        mask = adaptive_threshold(prob, 1.0)
        outputs["mask"] = str(out / "mask.pgm")
        save_pgm(outputs["mask"], mask)

    mean_pixel = np.array([float(v) for v in meta["meanpixel"].split()])
    filled = occlude(image, mask, mean_pixel)
    x = Tensor(filled[None] * 2.0 - 1.0, requires_grad=False)
    m = Tensor(mask[None, None], requires_grad=False)
    before = gen.forward_count
    raw = gen(x, m)
    gen_forwards = gen.forward_count - before
    raw01 = (raw.data[0] + 1.0) / 2.0
    final = np.where(mask[None] != 0.0, raw01, image)
    outputs["inpainted"] = str(out / "inpainted.ppm")
    save_ppm(outputs["inpainted"], final)
    return InferResult(outputs, seg_forwards, gen_forwards)
