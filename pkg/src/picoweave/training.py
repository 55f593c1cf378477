"""Training loop, flat key=value config files, and checkpoint glue."""

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from picoweave import tensor as pt
from picoweave.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from picoweave.corpus import VOCAB, CorpusSpec, read_corpus
from picoweave.lm import CausalLM, LMConfig
from picoweave.losses import LossReport, collapse_metrics, generation_loss
from picoweave.model import PretrainModel
from picoweave.optim import AdamW, lr_at_step
from picoweave.packing import collate_batch, pack_document, pack_pair_random, pack_stream_window
from picoweave.tensor import NonFiniteError
from picoweave.vision import VisionConfig

PACKING_MODES = ("document", "pair-random", "window")


@dataclass
class TrainConfig:
    # optimization
    peak_lr: float = 3e-4
    min_lr: float = 0.0
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_images: int = 32
    lam: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    seed: int = 0
    precision: str = "float32"
    # data
    data_path: str = ""
    packing: str = "document"
    max_len: int = 96
    max_images: int = 6
    gen_specials: bool = True
    exclude_same_doc_negatives: bool = False
    # vision encoder
    vision_image_size: int = 32
    vision_patch_size: int = 8
    vision_hidden_dim: int = 64
    vision_depth: int = 4
    vision_heads: int = 4
    vision_drop_path: float = 0.0
    # causal model
    lm_hidden_dim: int = 64
    lm_depth: int = 4
    lm_heads: int = 4
    lm_max_seq_len: int = 2048
    context_dim: int = 64
    proj_dim: int = 64
    tau_init: float = 0.07
    proj_std: float = 1.0
    layer_scale_init: float = 1.0
    mlp_ratio: int = 4
    # harness
    out_dir: str = ""
    ckpt_every: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must satisfy 0 <= warmup < total_steps")
        if self.packing not in PACKING_MODES:
            raise ValueError(f"packing must be one of {PACKING_MODES}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def vision_config(self) -> VisionConfig:
        return VisionConfig(
            image_size=self.vision_image_size,
            patch_size=self.vision_patch_size,
            channels=3,
            hidden_dim=self.vision_hidden_dim,
            depth=self.vision_depth,
            num_heads=self.vision_heads,
            drop_path_max=self.vision_drop_path,
            layer_scale_init=self.layer_scale_init,
            mlp_ratio=self.mlp_ratio,
        )

    def lm_config(self) -> LMConfig:
        return LMConfig(
            vocab_size=len(VOCAB),
            hidden_dim=self.lm_hidden_dim,
            depth=self.lm_depth,
            num_heads=self.lm_heads,
            max_seq_len=self.lm_max_seq_len,
            mlp_ratio=self.mlp_ratio,
            layer_scale_init=self.layer_scale_init,
            context_dim=self.context_dim,
        )


_CONFIG_ALIASES = {"lambda": "lam"}


def _convert(value: str, typ):
    if typ is bool:
        low = value.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    return typ(value)


def parse_kv_text(text: str, cls, aliases: dict | None = None):
    """Parse flat ``key=value`` lines into a dataclass; unknown keys error."""
    import typing

    aliases = aliases or {}
    hints = typing.get_type_hints(cls)
    types = {f.name: hints[f.name] for f in dataclasses.fields(cls)}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = aliases.get(key, key)
        if key not in types:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        kwargs[key] = _convert(value, types[key])
    return cls(**kwargs)


def load_train_config(path) -> TrainConfig:
    with open(path) as f:
        return parse_kv_text(f.read(), TrainConfig, _CONFIG_ALIASES)


def load_corpus_spec(path) -> CorpusSpec:
    with open(path) as f:
        return parse_kv_text(f.read(), CorpusSpec)


def build_model(cfg: TrainConfig) -> PretrainModel:
    return PretrainModel(cfg.vision_config(), cfg.lm_config(), proj_dim=cfg.proj_dim,
                         tau_init=cfg.tau_init, proj_std=cfg.proj_std, seed=cfg.seed, dtype=cfg.dtype)


def pack_corpus(docs, cfg: TrainConfig):
    patch_tokens = cfg.vision_config().num_patches
    if cfg.packing == "document":
        return [pack_document(d, patch_tokens, max_len=cfg.max_len, max_images=cfg.max_images,
                              seed=cfg.seed + i) for i, d in enumerate(docs)]
    if cfg.packing == "window":
        return pack_stream_window(docs, patch_tokens, window=cfg.max_len)
    pairs = []
    for d in docs:
        for seg in d.segments:
            if hasattr(seg, "pixels"):
                from picoweave.corpus import Sentence

                pairs.append((seg, Sentence(tokens=list(seg.caption_tokens()))))
    return pack_pair_random(pairs, patch_tokens, seed=cfg.seed, max_len=cfg.max_len)


def build_batches(docs, cfg: TrainConfig):
    """Group packed sequences into batches of roughly ``batch_images`` images.

    Packing and collation happen once; epochs reshuffle batch order only.
    """
    seqs = pack_corpus(docs, cfg)
    # bucket similar lengths together so collate pads as little as possible
    seqs = sorted(seqs, key=lambda s: s.length)
    patch_tokens = cfg.vision_config().num_patches
    batches = []
    cur, images = [], 0
    for s in seqs:
        cur.append(s)
        images += len(s.images)
        if images >= cfg.batch_images or len(cur) >= cfg.batch_images:
            batches.append(collate_batch(cur, patch_tokens, gen_specials=cfg.gen_specials,
                                         max_seq_len=cfg.lm_max_seq_len))
            cur, images = [], 0
    if cur:
        batches.append(collate_batch(cur, patch_tokens, gen_specials=cfg.gen_specials,
                                     max_seq_len=cfg.lm_max_seq_len))
    if not batches:
        raise ValueError("corpus produced no batches")
    return batches


def _report_for_step(step, bundle, out, lr, cfg, tau) -> LossReport:
    variance = alignment = uniformity = 0.0
    l_con = 0.0
    n_images = 0
    if out.image_global is not None:
        n_images = out.image_global.shape[0]
    if bundle.l_con is not None:
        l_con = float(bundle.l_con.data)
        metrics = collapse_metrics(out.image_global.data, out.image_context.data)
        variance, alignment, uniformity = metrics["variance"], metrics["alignment"], metrics["uniformity"]
    lam_effective = cfg.lam if bundle.l_con is not None else 0.0
    return LossReport(
        step=step,
        L_total=float(bundle.total.data),
        L_con=l_con,
        L_gen=float(bundle.l_gen.data),
        tau=tau,
        variance=variance,
        alignment=alignment,
        uniformity=uniformity,
        lr=lr,
        lam=lam_effective,
        con_c2i=bundle.con_c2i,
        con_i2c=bundle.con_i2c,
        n_images=n_images,
        n_targets=bundle.n_targets,
    )


@dataclass
class TrainResult:
    reports: list
    checkpoint_path: str
    diverged: bool = False
    log_path: str = ""
    model: object = None


def checkpoint_arrays(model: PretrainModel, opt: AdamW) -> dict:
    arrays = {name: p.data for name, p in model.named_parameters()}
    for k, v in opt.state_arrays().items():
        arrays[f"adamw/{k}"] = v
    return arrays


def run_training(cfg: TrainConfig, docs=None) -> TrainResult:
    """Optimize the full model; returns per-step reports and the final checkpoint.

    Fully deterministic for a fixed (config, corpus): the packing order,
    batch shuffle, drop-path draws, and parameter init all derive from
    ``cfg.seed``, and every step runs on one thread of control.
    """
    if docs is None:
        if not cfg.data_path:
            raise ValueError("run_training: no corpus (set data_path or pass docs)")
        docs, _ = read_corpus(cfg.data_path)
    model = build_model(cfg)
    batches = build_batches(docs, cfg)
    opt = AdamW(dict(model.named_parameters()), beta1=cfg.beta1, beta2=cfg.beta2,
                weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    droppath_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 29]))

    out_dir = cfg.out_dir
    log_f = None
    log_path = ckpt_path = ""
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "metrics.log")
        log_f = open(log_path, "w")
        ckpt_path = os.path.join(out_dir, "final.pwckpt")

    config_echo = dataclasses.asdict(cfg)
    reports = []
    order = []
    diverged = False
    try:
        for step in range(cfg.total_steps):
            if not order:
                order = list(shuffle_rng.permutation(len(batches)))
            batch = batches[order.pop()]
            lr = lr_at_step(step + 1, cfg.peak_lr, cfg.warmup_steps, cfg.total_steps, cfg.min_lr)
            try:
                out = model(batch, training=True, rng=droppath_rng)
                bundle = model.compute_losses(batch, out, lam=cfg.lam,
                                              exclude_same_doc_negatives=cfg.exclude_same_doc_negatives)
                rep = _report_for_step(step, bundle, out, lr, cfg, model.head.temperature())
                pt.backward(bundle.total)
                opt.step(lr)
            except NonFiniteError:
                diverged = True
                break
            opt.zero_grad()
            model.head.clamp_temperature()
            reports.append(rep)
            if log_f:
                log_f.write(rep.to_line() + "\n")
            if out_dir and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
                save_checkpoint(os.path.join(out_dir, f"step{step + 1:06d}.pwckpt"),
                                step + 1, config_echo, checkpoint_arrays(model, opt),
                                metrics={"L_total": rep.L_total}, opt_step=opt.t)
    finally:
        if log_f:
            log_f.close()
    if out_dir and not diverged:
        last = reports[-1] if reports else None
        save_checkpoint(ckpt_path, cfg.total_steps, config_echo, checkpoint_arrays(model, opt),
                        metrics={"L_total": last.L_total} if last else {}, opt_step=opt.t)
    result = TrainResult(reports=reports, checkpoint_path=ckpt_path if not diverged else "",
                         diverged=diverged, log_path=log_path)
    result.model = model
    return result


def run_plain_lm_training(cfg: TrainConfig, docs) -> list:
    """Bare next-token training over the same components, no image machinery.

    Used to check that the full pipeline on a text-only corpus reduces to
    ordinary causal language modeling: parameter init, batching, schedule,
    and optimizer are shared; only the loss path differs (no vision encode,
    no contrastive branch).
    """
    model = build_model(cfg)
    lm: CausalLM = model.lm
    batches = build_batches(docs, cfg)
    lm_params = {f"lm.{k}": p for k, p in lm.named_parameters()}
    opt = AdamW(lm_params, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    losses = []
    order = []
    for step in range(cfg.total_steps):
        if not order:
            order = list(shuffle_rng.permutation(len(batches)))
        batch = batches[order.pop()]
        lr = lr_at_step(step + 1, cfg.peak_lr, cfg.warmup_steps, cfg.total_steps, cfg.min_lr)
        emb = lm.assemble_embeddings(batch, None)
        y = lm.forward_causal(emb, batch)
        logits, _ = lm.extract_heads(y, batch)
        loss, _ = generation_loss(logits, batch)
        pt.backward(loss)
        opt.step(lr)
        opt.zero_grad()
        losses.append(float(loss.data))
    return losses


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[PretrainModel, TrainConfig]:
    cfg = TrainConfig(**ckpt.config)
    model = build_model(cfg)
    named = dict(model.named_parameters())
    missing = [k for k in named if k not in ckpt.arrays]
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {missing[:5]}")
    for name, p in named.items():
        arr = ckpt.arrays[name]
        if arr.shape != p.data.shape:
            raise ValueError(f"checkpoint array {name!r} has shape {arr.shape}, expected {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
    return model, cfg


STRUCTURAL_FIELDS = (
    "vision_image_size", "vision_patch_size", "vision_hidden_dim", "vision_depth", "vision_heads",
    "lm_hidden_dim", "lm_depth", "lm_heads", "lm_max_seq_len", "context_dim", "proj_dim", "precision",
)


def structural_config(cfg: TrainConfig) -> dict:
    full = dataclasses.asdict(cfg)
    return {k: full[k] for k in STRUCTURAL_FIELDS}


def load_model_checkpoint(path, current_cfg: TrainConfig | None = None) -> tuple[PretrainModel, TrainConfig]:
    expect = structural_config(current_cfg) if current_cfg is not None else None
    ckpt = load_checkpoint(path, expect_config=expect)
    return model_from_checkpoint(ckpt)
