"""Training loop, checkpointing, evaluation, and ablation tables.

Batches are a stateless function of (seed, step), so a resumed run replays
the exact batch sequence an unbroken run would have seen; together with the
optimizer state and normalization buffers stored in the checkpoint, resuming
continues the loss trajectory bit-for-bit.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import tensor as T
from .bfser import BFSer
from .ckler import CKLer, translation_loss
from .errors import ConfigError, ShapeMismatch
from .losses import total_seg_loss
from .metrics import evaluate_all
from .nn import Adam
from .tensor import (Tensor, backward, load_checkpoint, no_grad,
                     save_checkpoint, _sigmoid_np)

_REPORT_KEYS = (("M", "mae"), ("F_max", "f_max"), ("F_mean", "f_mean"),
                ("F_adp", "f_adaptive"), ("E_max", "e_max"),
                ("E_mean", "e_mean"), ("S", "s_measure"))


def batch_indices(seed, step, n, batch, tag=0):
    """The sample indices for one step, a pure function of its arguments."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, step, tag]))
    return rng.choice(n, size=batch, replace=n < batch)


def eval_threads():
    """Evaluation fan-out width, capped by the MULTICOS_THREADS env var."""
    raw = os.environ.get("MULTICOS_THREADS", "1")
    try:
        val = int(raw)
    except ValueError:
        raise ConfigError(f"MULTICOS_THREADS must be an integer, got {raw!r}")
    if val < 1:
        raise ConfigError(f"MULTICOS_THREADS must be >= 1, got {val}")
    return val


def _check_corpus(data, image_size, kinds):
    for kind in kinds:
        if kind not in data:
            raise ConfigError(f"corpus is missing the {kind!r} stream")
        arr = data[kind]
        if arr.ndim != 4 or arr.shape[2:] != (image_size, image_size):
            raise ShapeMismatch(
                f"{kind} stream must be (N, C, {image_size}, {image_size}), "
                f"got {arr.shape}")
    sizes = {data[k].shape[0] for k in kinds}
    if len(sizes) != 1:
        raise ShapeMismatch(f"stream lengths disagree: {sizes}")


class Trainer:
    """Owns the model(s), one Adam over their joint parameters, and the step
    counter; data stays outside as plain arrays."""

    def __init__(self, cfg, data, translation=None):
        _check_corpus(data, cfg.image_size, ("rgb", "aux", "mask", "edge"))
        if cfg.enable_ckler:
            if translation is None:
                raise ConfigError(
                    "translator training needs translation pairs")
            _check_corpus(translation, cfg.image_size, ("rgb", "aux"))
        self.cfg = cfg
        self.data = data
        self.translation = translation if cfg.enable_ckler else None
        rng = np.random.default_rng(cfg.seed)
        self.model = BFSer(rng, **cfg.segmenter_kwargs())
        self.translator = (CKLer(rng, latent_channels=cfg.knowledge_channels)
                           if cfg.enable_ckler else None)
        named = {f"seg.{k}": p for k, p in self.model.named_parameters()}
        if self.translator is not None:
            named.update({f"tr.{k}": p
                          for k, p in self.translator.named_parameters()})
        self.opt = Adam(named, lr=cfg.lr)
        self.step_count = 0

    # one optimizer step ------------------------------------------------

    def train_step(self):
        cfg = self.cfg
        k = self.step_count
        idx = batch_indices(cfg.seed, k, self.data["rgb"].shape[0],
                            cfg.batch_size)
        x_i = Tensor(self.data["rgb"][idx])
        x_u = Tensor(self.data["aux"][idx])
        l_l = None
        knowledge = None
        if self.translator is not None:
            tidx = batch_indices(cfg.seed, k,
                                 self.translation["rgb"].shape[0],
                                 cfg.batch_size, tag=1)
            recon, _ = self.translator(Tensor(self.translation["rgb"][tidx]))
            l_l = translation_loss(recon, self.translation["aux"][tidx])
            if cfg.enable_injection or cfg.pseudo_aux:
                recon_s, z_s = self.translator(x_i)
                if cfg.enable_injection:
                    knowledge = z_s
                if cfg.pseudo_aux:
                    x_u = recon_s
        out = self.model(x_i, None if cfg.rgb_only else x_u,
                         knowledge=knowledge)
        l_s = total_seg_loss(out, self.data["mask"][idx],
                             self.data["edge"][idx])
        l_t = l_s if l_l is None else l_s + l_l
        backward(l_t)
        self.opt.step()
        self.opt.zero_grad()
        self.step_count += 1
        return {"step": k,
                "l_s": float(l_s.data),
                "l_l": 0.0 if l_l is None else float(l_l.data),
                "l_t": float(l_t.data)}

    def run(self, steps=None, log_fn=None):
        """Advance to `steps` total optimizer steps (default: the config's)."""
        target = self.cfg.steps if steps is None else steps
        records = []
        while self.step_count < target:
            rec = self.train_step()
            records.append(rec)
            if log_fn is not None:
                log_fn(rec)
        return records

    # persistence --------------------------------------------------------

    def save(self, path):
        save_state(path, self.model, translator=self.translator,
                   opt=self.opt, step=self.step_count)

    def load(self, path):
        self.step_count = load_state(path, self.model,
                                     translator=self.translator,
                                     opt=self.opt)

    # evaluation ----------------------------------------------------------

    def evaluate(self, data, batch=8, threads=None):
        scores = evaluate_model(
            self.model, data, translator=self.translator,
            inject=self.cfg.enable_injection, rgb_only=self.cfg.rgb_only,
            pseudo_aux=self.cfg.pseudo_aux, batch=batch, threads=threads)
        self.model.train()
        if self.translator is not None:
            self.translator.train()
        return scores


# persistence of model + translator + optimizer state ----------------------


def save_state(path, model, translator=None, opt=None, step=0):
    named = {"meta/step": np.array(float(step))}
    for k, v in model.state_dict().items():
        named[f"seg/{k}"] = v
    if translator is not None:
        for k, v in translator.state_dict().items():
            named[f"tr/{k}"] = v
    if opt is not None:
        for k, v in opt.state_dict().items():
            named[f"opt/{k}"] = v
    save_checkpoint(path, named)


def load_state(path, model, translator=None, opt=None):
    """Restore from a checkpoint archive; returns the stored step count."""
    named = load_checkpoint(path)
    if "meta/step" not in named:
        raise ConfigError(f"{path} is not a training checkpoint")
    model.load_state_dict(
        {k[4:]: v for k, v in named.items() if k.startswith("seg/")})
    tr_state = {k[3:]: v for k, v in named.items() if k.startswith("tr/")}
    if translator is not None:
        if not tr_state:
            raise ConfigError(
                f"{path} has no translator state but the config wants one")
        translator.load_state_dict(tr_state)
    elif tr_state:
        raise ConfigError(
            f"{path} carries translator state the config does not use")
    if opt is not None:
        opt.load_state_dict(
            {k[4:]: v for k, v in named.items() if k.startswith("opt/")})
    return int(named["meta/step"])


def build_models(cfg):
    """Freshly initialized segmenter (and translator, when configured)."""
    rng = np.random.default_rng(cfg.seed)
    model = BFSer(rng, **cfg.segmenter_kwargs())
    translator = (CKLer(rng, latent_channels=cfg.knowledge_channels)
                  if cfg.enable_ckler else None)
    return model, translator


def predict_masks(model, rgb, aux=None, translator=None, inject=False,
                  pseudo_aux=False, batch=8, threads=None):
    """Soft full-resolution masks for a stack of images, in eval mode.

    With pseudo_aux the translator's reconstruction stands in for the aux
    stream. Forward passes fan out over disjoint sample blocks (thread cap
    from MULTICOS_THREADS unless given); results merge in index order.
    """
    if (inject or pseudo_aux) and translator is None:
        raise ConfigError("knowledge routing needs a translator")
    model.eval()
    if translator is not None:
        translator.eval()
    threads = eval_threads() if threads is None else threads
    h, w = rgb.shape[2], rgb.shape[3]
    blocks = [(i, min(i + batch, rgb.shape[0]))
              for i in range(0, rgb.shape[0], batch)]

    def run_block(span):
        i, j = span
        with no_grad():
            x_i = Tensor(rgb[i:j])
            knowledge = None
            x_u = Tensor(aux[i:j]) if aux is not None else None
            if translator is not None and (inject or pseudo_aux):
                recon, z = translator(x_i)
                if inject:
                    knowledge = z
                if pseudo_aux:
                    x_u = recon
            out = model(x_i, x_u, knowledge=knowledge)
            logits = T.interpolate(out.masks[0], (h, w), mode="bilinear")
        return _sigmoid_np(logits.data)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            preds = list(ex.map(run_block, blocks))
    else:
        preds = [run_block(b) for b in blocks]
    return np.concatenate(preds, axis=0)


def evaluate_model(model, data, translator=None, inject=False,
                   rgb_only=False, pseudo_aux=False, batch=8, threads=None):
    """All measures of the predicted masks against the corpus ground truth."""
    aux = None if (rgb_only or pseudo_aux) else data["aux"]
    preds = predict_masks(model, data["rgb"], aux=aux, translator=translator,
                          inject=inject, pseudo_aux=pseudo_aux, batch=batch,
                          threads=threads)
    return evaluate_all(preds, data["mask"])


def metric_record(scores, dataset):
    """The external report shape: spelled-out metric names plus provenance."""
    rec = {"dataset": dataset}
    for out_key, in_key in _REPORT_KEYS:
        rec[out_key] = scores[in_key]
    return rec


def format_table(rows):
    """Aligned plain-text table; rows are (label, record) pairs."""
    cols = ["config"] + [k for k, _ in _REPORT_KEYS]
    table = [cols]
    for label, rec in rows:
        table.append([label] + [f"{rec[k]:.4f}" for k, _ in _REPORT_KEYS])
    widths = [max(len(r[c]) for r in table) for c in range(len(cols))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def ablation_rows(cfg):
    """Leave-one-out fusion rows: full model, RGB-only, and one row per
    disabled fusion stage. This is the benefit-trend harness."""
    return [
        ("full", cfg),
        ("rgb_only", cfg.replace(rgb_only=True)),
        ("no_lsfm", cfg.replace(enable_lsfm=False)),
        ("no_ssfm", cfg.replace(enable_ssfm=False)),
        ("no_ffm", cfg.replace(enable_ffm=False)),
    ]


def fusion_rows(cfg):
    """Cumulative fusion build-up: RGB baseline, then the aux encoder,
    then one fusion stage at a time up to the full model."""
    return [
        ("rgb_only", cfg.replace(rgb_only=True)),
        ("aux_encoder", cfg.replace(enable_lsfm=False, enable_ssfm=False,
                                    enable_ffm=False)),
        ("plus_ssfm", cfg.replace(enable_lsfm=False, enable_ffm=False)),
        ("plus_lsfm", cfg.replace(enable_ffm=False)),
        ("full", cfg),
    ]


def submodule_rows(cfg):
    """Scan-fusion internals: drop the gate, the scan blocks, or the
    cross-coupled pass, against the full block."""
    return [
        ("no_gate", cfg.replace(enable_gate=False)),
        ("no_scan", cfg.replace(enable_scan_blocks=False)),
        ("no_cross", cfg.replace(enable_cssm=False)),
        ("full", cfg),
    ]


def knowledge_rows(cfg):
    """Knowledge-path variants: translator without injection, synthesized
    aux only, and the full arrangement with the real aux stream."""
    return [
        ("no_injection", cfg.replace(enable_ckler=True,
                                     enable_injection=False,
                                     pseudo_aux=False)),
        ("pseudo_aux_only", cfg.replace(enable_ckler=True,
                                        enable_injection=True,
                                        pseudo_aux=True)),
        ("full_knowledge", cfg.replace(enable_ckler=True,
                                       enable_injection=True,
                                       pseudo_aux=False)),
    ]


ABLATION_TABLES = {
    "effect": ablation_rows,
    "fusion": fusion_rows,
    "submodules": submodule_rows,
    "knowledge": knowledge_rows,
}


def run_ablation(cfg, train_data, test_data, rows=None, steps=None,
                 translation=None, log_fn=None):
    """Train and evaluate each configuration row on the same data."""
    rows = ablation_rows(cfg) if rows is None else rows
    out = []
    for label, row_cfg in rows:
        trainer = Trainer(row_cfg, train_data,
                          translation if row_cfg.enable_ckler else None)
        trainer.run(steps=steps)
        scores = trainer.evaluate(test_data)
        rec = metric_record(scores, dataset=label)
        if log_fn is not None:
            log_fn({"row": label, **{k: v for k, v in rec.items()
                                     if k != "dataset"}})
        out.append((label, rec))
    return out
