"""Training loop wiring token labeling, MixToken and AdamW together, plus
top-1 evaluation and the paired with/without token-labeling experiment."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from . import autograd as ag
from .errors import ConfigError, TrainingError, UsageError
from .losses import one_hot, sample_participation, total_loss
from .mixtoken import mix_labels_batch, sample_mask
from .optim import OptimizerState, adamw_step, base_lr, clip_grad_norm, decay_mask, lr_at
from .scoremap import align_crop, densify, sparsify_topk
from .synth import SynthDataset, hflip_aligned, oracle_scoremap, random_erase, random_resized_crop_aligned
from .vit import TokenMix, build_model, model_forward, parse_bool, parse_kv, save_checkpoint, to_tensors

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    weight_decay: float = 0.05
    warmup_epochs: float = 5
    epochs: int = 20
    min_lr: float = 1e-5
    beta: float = 0.5
    participation_rate: float = 1.0
    mixtoken_enabled: bool = True
    cutmix_baseline: bool = False
    token_labeling_enabled: bool = True
    mixup_enabled: bool = False
    stoch_depth_rate: float = 0.1
    erase_prob: float = 0.25
    flip_prob: float = 0.5
    crop_scale_min: float = 0.35
    clip_norm: float = 0.0
    eval_batch_size: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.mixtoken_enabled and self.cutmix_baseline:
            raise ConfigError("mixtoken_enabled and cutmix_baseline are mutually exclusive", "cutmix_baseline")
        if self.mixup_enabled:
            raise ConfigError("MixUp is not implemented (it is not used with token labeling)", "mixup_enabled")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive", "batch_size")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative", "beta")
        if not 0 < self.participation_rate <= 1:
            raise ConfigError("participation_rate must lie in (0, 1]", "participation_rate")
        if self.min_lr <= 0:
            raise ConfigError("min_lr must be positive", "min_lr")

    @property
    def base_lr(self):
        return base_lr(self.batch_size, self.token_labeling_enabled)

    @property
    def effective_beta(self):
        return self.beta if self.token_labeling_enabled else 0.0

    @classmethod
    def from_text(cls, text):
        kv = parse_kv(text)
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in kv.items():
            if key not in types:
                raise ConfigError(f"unknown train config key {key!r}", key)
            try:
                t = types[key]
                if t == "bool":
                    kwargs[key] = parse_bool(raw)
                elif t == "int":
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}", key) from exc
        return cls(**kwargs)


def num_threads():
    raw = os.environ.get("TLKIT_THREADS")
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


def _seed_for(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def oracle_store(dataset, topk=5):
    """Score maps for every sample of ``dataset`` as the trainer sees them:
    oracle map -> top-k half precision -> renormalized dense map."""
    cfg = dataset.config
    grid = (cfg.scoremap_grid, cfg.scoremap_grid)
    return {
        dataset.ids[i]: densify(sparsify_topk(oracle_scoremap(dataset[i], grid, cfg.num_classes), topk))
        for i in range(len(dataset))
    }


@dataclass
class TrainResult:
    params: dict
    metrics: list
    initial_loss: float | None = None


class Trainer:
    def __init__(self, model_config, train_config, dataset, scoremaps=None, out_dir=None, threads=None):
        if train_config.token_labeling_enabled and scoremaps is None:
            raise ConfigError("token labeling needs a score-map store", "scoremaps")
        if dataset.config.image_size != model_config.image_size:
            raise ConfigError("dataset and model image sizes differ", "image_size")
        if dataset.config.num_classes != model_config.num_classes:
            raise ConfigError("dataset and model class counts differ", "num_classes")
        if scoremaps is not None and train_config.token_labeling_enabled:
            missing = [sid for sid in dataset.ids if sid not in scoremaps]
            if missing:
                raise ConfigError(f"{len(missing)} samples have no score map (first: {missing[0]})", "scoremaps")
        self.mcfg = model_config
        self.cfg = train_config
        self.dataset = dataset
        self.scoremaps = scoremaps
        self.out_dir = out_dir
        self.threads = threads or num_threads()
        self.dtype = np.float32

    # -- batch assembly

    def _prepare(self, epoch, index):
        cfg, mcfg = self.cfg, self.mcfg
        sample = self.dataset[index]
        seed = _seed_for(cfg.seed, epoch, sample.sample_id)
        rng = np.random.default_rng(seed)
        img, aug = random_resized_crop_aligned(sample.image, (cfg.crop_scale_min, 1.0), rng, mcfg.image_size, seed=seed)
        if rng.uniform() < cfg.flip_prob:
            img, aug = hflip_aligned(img, aug)
        img, aug = random_erase(img, rng, aug, prob=cfg.erase_prob)
        tok = None
        if cfg.token_labeling_enabled:
            tok = align_crop(self.scoremaps[sample.sample_id], aug.crop, mcfg.grid_side)
        return img, sample.class_label, tok

    def _batch(self, pool, epoch, indices):
        items = list(pool.map(lambda i: self._prepare(epoch, i), indices)) if pool else [
            self._prepare(epoch, i) for i in indices
        ]
        images = np.stack([it[0] for it in items]).astype(self.dtype)
        labels = np.array([it[1] for it in items])
        cls = one_hot(labels, self.mcfg.num_classes)
        tok = np.stack([it[2] for it in items]) if self.cfg.token_labeling_enabled else None
        return images, cls, tok

    # -- one optimisation step

    def step_loss(self, params, images, cls, tok, rng):
        """Forward + loss for one batch; returns ``(LossReport, leaf tensors)``."""
        cfg, mcfg = self.cfg, self.mcfg
        b = images.shape[0]
        mix = None
        if cfg.mixtoken_enabled and b > 1:
            m = sample_mask(mcfg.grid_side, rng)
            partner = np.arange(b)[::-1].copy()
            mix = TokenMix(partner, m.flat)
            if tok is not None:
                tok, cls = mix_labels_batch(tok, cls, partner, m)
            else:
                cls = m.mean * cls + (1.0 - m.mean) * cls[partner]
        elif cfg.cutmix_baseline and b > 1:
            images, cls, tok = cutmix_pixels(images, cls, tok, mcfg.grid_side, rng)
        leaves = to_tensors(params)
        cls_logits, tok_logits = model_forward(
            leaves, mcfg, images, rng=rng, training=True, token_mix=mix, drop_rate=cfg.stoch_depth_rate
        )
        beta = cfg.effective_beta
        participation = None
        if beta > 0 and cfg.participation_rate < 1.0:
            participation = sample_participation(mcfg.num_tokens, cfg.participation_rate, rng)
        report = total_loss(cls_logits, tok_logits, cls, tok, beta=beta, participation=participation)
        return report, leaves

    def train(self, params=None, log_lines=None):
        cfg, mcfg = self.cfg, self.mcfg
        if params is None:
            params = build_model(mcfg, cfg.seed, dtype=self.dtype)
        state = OptimizerState.zeros_like(params)
        decay = decay_mask(params)
        n = len(self.dataset)
        steps_per_epoch = max(1, n // cfg.batch_size)
        metrics = [] if log_lines is None else log_lines
        pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None
        metrics_file = timing_file = None
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            metrics_file = open(os.path.join(self.out_dir, "metrics.log"), "w")
            timing_file = open(os.path.join(self.out_dir, "epoch_times.log"), "w")
        ckpt = os.path.join(self.out_dir, "checkpoint.tlck") if self.out_dir else None
        try:
            gstep = 0
            for epoch in range(cfg.epochs):
                t0 = time.perf_counter()
                order = np.random.default_rng(_seed_for(cfg.seed, epoch, 1 << 30)).permutation(n)
                for step in range(steps_per_epoch):
                    idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
                    images, cls, tok = self._batch(pool, epoch, idx)
                    rng = np.random.default_rng(_seed_for(cfg.seed, epoch, step, 1 << 31))
                    report, leaves = self.step_loss(params, images, cls, tok, rng)
                    if not np.isfinite(report.l_total):
                        if ckpt:
                            log.error("loss diverged at epoch %d step %d; last good checkpoint: %s", epoch, step, ckpt)
                        raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
                    report.graph.backward()
                    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
                    if cfg.clip_norm > 0:
                        clip_grad_norm(grads, cfg.clip_norm)
                    lr = lr_at(cfg, epoch + step / steps_per_epoch)
                    adamw_step(params, grads, state, lr, cfg.weight_decay, decay=decay)
                    line = f"{epoch}\t{gstep}\t{report.l_cls!r}\t{report.l_tl!r}\t{report.l_total!r}\t{lr!r}"
                    metrics.append(line)
                    if metrics_file:
                        metrics_file.write(line + "\n")
                    gstep += 1
                elapsed = time.perf_counter() - t0
                log.info("epoch %d done in %.1fs (last l_total=%.4f)", epoch, elapsed, report.l_total)
                if timing_file:
                    timing_file.write(f"{epoch}\t{elapsed:.3f}\n")
                if ckpt:
                    save_checkpoint(ckpt, mcfg, params)
        finally:
            if pool:
                pool.shutdown()
            for f in (metrics_file, timing_file):
                if f:
                    f.close()
        return TrainResult(params, metrics)


def cutmix_pixels(images, cls, tok, grid_side, rng):
    """Pixel-space CutMix with the batch reversed as partner.

    Token labels take each token's covered-area fraction of the pasted box.
    """
    b, _, h, _ = images.shape
    m = sample_mask(h, rng)
    partner = np.arange(b)[::-1].copy()
    keep = m.mask.astype(images.dtype)
    images = images * keep + images[partner] * (1 - keep)
    cls = m.mean * cls + (1.0 - m.mean) * cls[partner]
    if tok is not None:
        cell = h // grid_side
        frac = m.mask.reshape(grid_side, cell, grid_side, cell).mean(axis=(1, 3)).reshape(1, -1, 1)
        tok = frac * tok + (1 - frac) * tok[partner]
    return images, cls, tok


def predictor(params, config, batch_size=250):
    """``images -> cls_logits`` in eval mode (no stochastic depth)."""
    dtype = next(iter(params.values())).dtype

    def predict(images):
        out = []
        for s in range(0, len(images), batch_size):
            cls_logits, _ = model_forward(params, config, np.asarray(images[s : s + batch_size], dtype=dtype))
            out.append(cls_logits.data)
        return np.concatenate(out)

    return predict


def evaluate_top1(predict, images, labels):
    """Fraction of samples whose arg-max class (ties -> lower index) is the label."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise UsageError("cannot evaluate an empty split")
    logits = np.asarray(predict(images))
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate_split(params, model_config, dataset):
    return evaluate_top1(predictor(params, model_config), dataset.images(), dataset.labels())


def class_loss_on(params, model_config, dataset):
    """Mean clean-image classification loss over a split (eval mode)."""
    logits = predictor(params, model_config)(dataset.images())
    labels = one_hot(dataset.labels(), model_config.num_classes)
    return float(ag.mean(ag.soft_cross_entropy(logits.astype(np.float64), labels)))


# -------------------------------------------------------------- A/B experiment

_STORE_CACHE = {}


def _ab_run(args):
    dataset_cfg, model_cfg, train_cfg, seed, with_tl = args
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        train_ds = SynthDataset(dataset_cfg, "train")
        val_ds = SynthDataset(dataset_cfg, "val")
        store = None
        if with_tl:
            key = dataset_cfg
            if key not in _STORE_CACHE:
                _STORE_CACHE[key] = oracle_store(train_ds)
            store = _STORE_CACHE[key]
        cfg = replace(train_cfg, seed=seed, token_labeling_enabled=with_tl)
        t0 = time.perf_counter()
        result = Trainer(model_cfg, cfg, train_ds, store, threads=1).train()
        acc = evaluate_split(result.params, model_cfg, val_ds)
        return seed, with_tl, acc, time.perf_counter() - t0


def run_ab(dataset_cfg, model_cfg, train_cfg, seeds, workers=None):
    """Paired training with and without token labeling for each seed.

    Returns a list of ``(seed, top1_with, top1_without)``.
    """
    jobs = [(dataset_cfg, model_cfg, train_cfg, s, tl) for s in seeds for tl in (True, False)]
    workers = workers or num_threads()
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_ab_run, jobs))
    else:
        results = [_ab_run(j) for j in jobs]
    by_seed = {}
    for seed, tl, acc, secs in results:
        log.info("seed %d token_labeling=%s top1=%.4f (%.0fs)", seed, tl, acc, secs)
        by_seed.setdefault(seed, {})[tl] = acc
    return [(s, by_seed[s][True], by_seed[s][False]) for s in seeds]
