"""Three-phase training: source pretraining, CPCA adaptation, target self-training."""
from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .checkpoint import (Checkpoint, config_digest, pack_state, restore_bank, restore_model,
                         restore_optimizer)
from .config import TrainConfig
from .data import BatchStream, Dataset, IGNORE
from .errors import ContractError, TrainingError
from .intervention import make_counterfactual, sample_permutation
from .metrics import ConfusionMatrix, MetricReport, accumulate, scores
from .model import (BIAS, CAUSAL, ArchConfig, CPCANet, classify, encode_bias, encode_causal,
                    init_params, predict_logits, upsample_logits)
from .optim import SGD, lr_schedule
from .proto_bank import (PrototypeBank, aggregate_class, init_prototypes, momentum,
                         log_similarity, pick_own_class, update_prototypes)
from .self_training import PseudoLabelSet, pseudolabels_from_probs

log = logging.getLogger(__name__)

LOG_FIELDS = ["iteration", "lr", "m_t"] + L.LossBundle.field_names()

PHASE_SEEDS = {"pretrain": 1, "adapt": 2, "selftrain": 3, "handover": 4, "eval": 5}


def phase_seed(seed: int, phase: str) -> int:
    return int(np.random.SeedSequence([seed, PHASE_SEEDS[phase]]).generate_state(1)[0])


def configure_threads(serial: bool = False):
    """Serial mode pins torch to one thread so reductions are reproducible."""
    n = os.environ.get("CPCA_THREADS")
    if serial:
        torch.set_num_threads(1)
    elif n:
        torch.set_num_threads(max(1, int(n)))
    torch.use_deterministic_algorithms(True, warn_only=True)


def batch_tensors(ds: Dataset, idx, dtype=torch.float32):
    x = torch.from_numpy(np.ascontiguousarray(ds.images[idx])).to(dtype)
    y = torch.from_numpy(ds.labels[idx].astype(np.int64))
    return x, y


def inference_mode(cfg: TrainConfig) -> str:
    return "concat" if cfg.ablation.use_cfd else "causal"


@dataclass
class PhaseResult:
    net: CPCANet
    log: list = field(default_factory=list)
    optimizer: SGD | None = None
    bank: PrototypeBank | None = None
    iteration: int = 0
    history: list = field(default_factory=list)  # adaptation: (C', valid, m_t) per iteration


def _row(t, lr, m, bundle: L.LossBundle) -> dict:
    row = {"iteration": t, "lr": lr, "m_t": m}
    row.update(zip(L.LossBundle.field_names(), bundle.values()))
    return row


def _assert_finite(net: CPCANet, t: int):
    for n, p in net.named_parameters():
        if not torch.isfinite(p).all():
            raise TrainingError(f"parameter {n} became non-finite at iteration {t}")


def _check_loss(value, t, phase):
    if not torch.isfinite(value):
        raise TrainingError(f"{phase} loss diverged (value {float(value)}) at iteration {t}")


def write_log(rows, path, append=False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if not append or not path.exists():
        w.writerow(LOG_FIELDS)
    for r in rows:
        w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOG_FIELDS])
    if append and path.exists():
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(buf.getvalue())
    else:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(buf.getvalue(), encoding="utf-8")
        os.replace(tmp, path)


def read_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("iteration", "n_source", "n_target") else float(v))
             for k, v in r.items()} for r in rows]


# --------------------------------------------------------------------------
# phase 1

def source_seg_loss(net: CPCANet, x, y):
    """Segmentation cross-entropy through E_c and C_c with bias channels zeroed."""
    c = encode_causal(net, x)
    logits = classify(CAUSAL, net, torch.cat([c, torch.zeros_like(c)], dim=1))
    return L.ce_pixels(upsample_logits(logits, x.shape[2], x.shape[3]), y, return_count=True)


def pretrain_source(cfg: TrainConfig, source: Dataset, net: CPCANet, seed: int = 0,
                    optimizer: SGD | None = None, start: int = 0, stop: int | None = None
                    ) -> PhaseResult:
    ph = cfg.pretrain
    T = cfg.iterations("pretrain")
    stop = T if stop is None else min(stop, T)
    params = list(net.enc_c.named_parameters(prefix="enc_c")) + \
        list(net.head_c.named_parameters(prefix="head_c"))
    opt = optimizer or SGD(params, ph.momentum, ph.weight_decay)
    stream = BatchStream(len(source), ph.batch_size, phase_seed(seed, "pretrain"))
    dtype = next(net.parameters()).dtype
    rows = []
    net.train()
    for t in range(start, stop):
        x, y = batch_tensors(source, stream.indices(t), dtype)
        lr = lr_schedule(t, T, ph.lr, ph.lr_power, ph.lr_schedule)
        opt.zero_grad()
        loss, n = source_seg_loss(net, x, y)
        _check_loss(loss, t, "pretrain")
        loss.backward()
        opt.step(lr)
        _assert_finite(net, t)
        v = loss.item()
        rows.append(_row(t, lr, 0.0, L.LossBundle(l_seg=v, total=v, n_source=n)))
    return PhaseResult(net, rows, opt, iteration=stop)


# --------------------------------------------------------------------------
# handover and prototype init

@torch.no_grad()
def init_bias_encoder(net: CPCANet, sigma: float, seed: int):
    """E_b <- E_c + N(0, sigma^2) noise."""
    gen = torch.Generator().manual_seed(phase_seed(seed, "handover"))
    for pb, pc in zip(net.enc_b.parameters(), net.enc_c.parameters()):
        noise = torch.randn(pc.shape, generator=gen, dtype=torch.float64).to(pc.dtype)
        pb.copy_(pc + sigma * noise)
    return net


@torch.no_grad()
def source_feature_stream(net: CPCANet, source: Dataset, batch_size: int):
    s = net.arch.output_stride
    dtype = next(net.parameters()).dtype
    for i in range(0, len(source), batch_size):
        idx = np.arange(i, min(i + batch_size, len(source)))
        x, y = batch_tensors(source, idx, dtype)
        yield encode_causal(net, x), y[:, ::s, ::s]


def build_prototypes(net: CPCANet, source: Dataset, cfg: TrainConfig) -> PrototypeBank:
    net.eval()
    return init_prototypes(source_feature_stream(net, source, cfg.eval_batch_size),
                           net.arch.num_classes, T=max(1, cfg.iterations("adapt")),
                           m0=cfg.cpca.m0, alpha=cfg.cpca.alpha)


# --------------------------------------------------------------------------
# phase 2

@dataclass
class AdaptStep:
    """Loss tensors and detached by-products of one adaptation forward pass."""

    bundle: dict
    cs: torch.Tensor | None = None
    ct: torch.Tensor | None = None
    sim_s: torch.Tensor | None = None
    sim_t: torch.Tensor | None = None
    ys_ds: torch.Tensor | None = None
    yhat_t: torch.Tensor | None = None
    n_source: int = 0
    n_target: int = 0


@torch.no_grad()
def target_pseudo_labels(net: CPCANet, ct, bt, threshold: float = 0.0, rule: str = "argmax",
                         eta: float = 0.5):
    """Detached causal-head labels for target pixels at feature resolution.

    ``rule="argmax"`` labels every pixel whose confidence reaches ``threshold``;
    ``rule="class_rank"`` instead keeps, per predicted class, the ``eta``
    most confident pixels of the batch (the self-training selection rule).
    """
    prob = torch.softmax(classify(CAUSAL, net, torch.cat([ct, bt], dim=1)), dim=1)
    if rule == "class_rank":
        labels = pseudolabels_from_probs(prob.to(torch.float64), eta).labels
        return torch.from_numpy(labels.astype(np.int64))
    if rule != "argmax":
        raise ContractError(f"unknown pseudo-label rule {rule!r}")
    conf, yhat = prob.max(dim=1)
    if threshold > 0:
        yhat = torch.where(conf >= threshold, yhat, torch.full_like(yhat, IGNORE))
    return yhat


def adapt_losses(net: CPCANet, bank: PrototypeBank | None, xs, ys, xt, cfg: TrainConfig, t: int,
                 perm=None, yhat_t=None) -> AdaptStep:
    """All adaptation loss terms for one source/target batch pair.

    ``perm`` and ``yhat_t`` may be supplied to pin the stochastic and
    non-differentiable parts (used by gradient checks).
    """
    ab, cp = cfg.ablation, cfg.cpca
    s = net.arch.output_stride
    H, W = xs.shape[2:]
    zero = xs.new_zeros(())
    cs = encode_causal(net, xs)
    if ab.use_cfd:
        bs = encode_bias(net, xs)
    else:
        bs = torch.zeros_like(cs)
    ys_ds = ys[:, ::s, ::s]
    warm = L.in_warmup(t, cfg.warmup_iters())
    counterfactual = ab.use_ci and not warm
    out = AdaptStep(bundle={}, cs=cs.detach(), ys_ds=ys_ds)

    l_s = l_t = l_cc = zero
    if ab.use_cpc:
        if bank is None:
            raise ContractError("prototype contrast needs an initialised bank")
        ct = encode_causal(net, xt)
        bt = encode_bias(net, xt) if ab.use_cfd else torch.zeros_like(ct)
        if yhat_t is None:
            yhat_t = target_pseudo_labels(net, ct.detach(), bt.detach(), cp.pseudo_threshold,
                                          cp.pseudo_rule, cp.pseudo_eta)
        logsim_s = log_similarity(cs, bank, cp.tau_sim, cp.similarity)
        logsim_t = log_similarity(ct, bank, cp.tau_sim, cp.similarity)
        l_s, l_t, l_cc = L.contrast_loss(logsim_s, ys_ds, logsim_t, yhat_t, log_space=True)
        out.ct, out.yhat_t = ct.detach(), yhat_t
        out.sim_s, out.sim_t = logsim_s.detach().exp(), logsim_t.detach().exp()
        out.n_target = int((yhat_t != IGNORE).sum())

    up = lambda logits: upsample_logits(logits, H, W)
    b_in = bs.detach() if cp.stop_grad_cross else bs
    if counterfactual:
        if perm is None:
            perm = sample_permutation(xs.shape[0], [phase_seed(0, "adapt"), t], cp.derangement)
        f_b, f_u, y_sw = make_counterfactual(cs, b_in, ys, perm)
        l_c1, l_c2, l_c = L.causal_cls_loss(up(classify(CAUSAL, net, f_b)),
                                            up(classify(CAUSAL, net, f_u)), ys)
    else:
        l_c1 = L.ce_pixels(up(classify(CAUSAL, net, torch.cat([cs, b_in], 1))), ys)
        l_c2, l_c = zero, l_c1

    l_b1 = l_b2 = l_b = zero
    if ab.use_cfd:
        c_in = cs.detach() if cp.stop_grad_cross else cs
        sce = dict(alpha=cp.sce_alpha, beta=cp.sce_beta, log_floor=cp.sce_log_floor)
        l_b1 = L.sce(up(classify(BIAS, net, torch.cat([c_in, bs], 1))), ys, **sce)
        if counterfactual:
            _, f_u_b, y_sw = make_counterfactual(c_in, bs, ys, perm)
            l_b2 = L.sce(up(classify(BIAS, net, f_u_b)), y_sw, **sce)
        l_b = l_b1 + l_b2

    total = L.total_loss(l_cc, l_c1, l_c2, l_b1, l_b2, t, cfg.warmup_iters())
    out.bundle = dict(l_seg=zero, l_s=l_s, l_t=l_t, l_cc=l_cc, l_c1=l_c1, l_c2=l_c2,
                      l_b1=l_b1, l_b2=l_b2, l_c=l_c, l_b=l_b, total=total)
    out.n_source = int((ys != IGNORE).sum())
    return out


def prototype_targets(step: AdaptStep, K: int, weighting: str):
    """Class-wise aggregated causal features from this iteration's source + target pixels."""
    feats = [step.cs]
    sims = [pick_own_class(step.sim_s, step.ys_ds)]
    labels = [step.ys_ds]
    if step.ct is not None:
        feats.append(step.ct)
        sims.append(pick_own_class(step.sim_t, step.yhat_t))
        labels.append(step.yhat_t)
    d = step.cs.shape[1]
    f = torch.cat([x.permute(0, 2, 3, 1).reshape(-1, d) for x in feats])
    sv = torch.cat([x.reshape(-1) for x in sims])
    lv = torch.cat([x.reshape(-1) for x in labels])
    return aggregate_class(f, sv, lv, K, weighting)


def adapt_cpca(cfg: TrainConfig, net: CPCANet, bank: PrototypeBank | None, source: Dataset,
               target: Dataset, seed: int = 0, optimizer: SGD | None = None, start: int = 0,
               stop: int | None = None, lr_override: float | None = None) -> PhaseResult:
    ph, cp, ab = cfg.adapt, cfg.cpca, cfg.ablation
    T = cfg.iterations("adapt")
    stop = T if stop is None else min(stop, T)
    if ab.use_cpc:
        if bank is None or not bank.complete:
            raise ContractError("prototype bank incomplete at start of adaptation")
        bank = bank.clone()
    opt = optimizer or SGD(list(net.named_parameters()), ph.momentum, ph.weight_decay)
    pseed = phase_seed(seed, "adapt")
    s_stream = BatchStream(len(source), ph.batch_size, pseed)
    t_stream = BatchStream(len(target), ph.batch_size, pseed + 1)
    dtype = next(net.parameters()).dtype
    K = net.arch.num_classes
    rows, history = [], []
    net.train()
    for t in range(start, stop):
        xs, ys = batch_tensors(source, s_stream.indices(t), dtype)
        xt, _ = batch_tensors(target, t_stream.indices(t), dtype)
        lr = lr_schedule(t, T, ph.lr, ph.lr_power, ph.lr_schedule) if lr_override is None \
            else lr_override
        perm = sample_permutation(xs.shape[0], [pseed, t], cp.derangement)
        opt.zero_grad()
        step = adapt_losses(net, bank, xs, ys, xt, cfg, t, perm=perm)
        total = step.bundle["total"]
        _check_loss(total, t, "adapt")
        total.backward()
        opt.step(lr)
        _assert_finite(net, t)
        m_t = 0.0
        if ab.use_cpc:
            if bank.prototypes.requires_grad:
                raise TrainingError("prototype bank received gradients")
            m_t = momentum(t, T, bank.m0, bank.alpha)
            cf, valid = prototype_targets(step, K, cp.aggregation_weighting)
            bank = update_prototypes(bank, cf, valid, m_t)
            history.append((cf, valid, m_t))
        vals = {k: v.item() for k, v in step.bundle.items()}
        rows.append(_row(t, lr, m_t, L.LossBundle(**vals, n_source=step.n_source,
                                                  n_target=step.n_target)))
    return PhaseResult(net, rows, opt, bank, stop, history)


# --------------------------------------------------------------------------
# phase 3

@torch.no_grad()
def predict_probs(net: CPCANet, ds: Dataset, mode: str, batch_size: int = 25):
    net.eval()
    dtype = next(net.parameters()).dtype
    out = []
    for i in range(0, len(ds), batch_size):
        x, _ = batch_tensors(ds, np.arange(i, min(i + batch_size, len(ds))), dtype)
        out.append(torch.softmax(predict_logits(net, x, mode), dim=1).to(torch.float64))
    return torch.cat(out)


def make_pseudolabels(net: CPCANet, target: Dataset, cfg: TrainConfig) -> PseudoLabelSet:
    if len(target) == 0:
        raise ContractError("empty target dataset")
    probs = predict_probs(net, target, inference_mode(cfg), cfg.eval_batch_size)
    return pseudolabels_from_probs(probs, cfg.cpca.eta)


def self_train(cfg: TrainConfig, net: CPCANet, target: Dataset, seed: int = 0,
               optimizer: SGD | None = None, start: int = 0, stop: int | None = None
               ) -> PhaseResult:
    """Retrain E_c and C_c on pseudo-labelled target data (labels in ``target``).

    The bias encoder is frozen; its features still feed the causal head.
    """
    if not (target.labels != IGNORE).any():
        raise TrainingError("nothing to train on: every pseudo-label is IGNORE")
    ph = cfg.selftrain
    T = cfg.iterations("selftrain")
    stop = T if stop is None else min(stop, T)
    params = list(net.enc_c.named_parameters(prefix="enc_c")) + \
        list(net.head_c.named_parameters(prefix="head_c"))
    opt = optimizer or SGD(params, ph.momentum, ph.weight_decay)
    stream = BatchStream(len(target), ph.batch_size, phase_seed(seed, "selftrain"))
    dtype = next(net.parameters()).dtype
    use_bias = cfg.ablation.use_cfd
    rows = []
    net.train()
    for t in range(start, stop):
        x, y = batch_tensors(target, stream.indices(t), dtype)
        lr = lr_schedule(t, T, ph.lr, ph.lr_power, ph.lr_schedule)
        opt.zero_grad()
        c = encode_causal(net, x)
        if use_bias:
            with torch.no_grad():
                b = encode_bias(net, x)
        else:
            b = torch.zeros_like(c)
        logits = upsample_logits(classify(CAUSAL, net, torch.cat([c, b], 1)), x.shape[2], x.shape[3])
        loss, n = L.ce_pixels(logits, y, return_count=True)
        _check_loss(loss, t, "selftrain")
        loss.backward()
        opt.step(lr)
        _assert_finite(net, t)
        v = loss.item()
        rows.append(_row(t, lr, 0.0, L.LossBundle(l_seg=v, total=v, n_target=n)))
    return PhaseResult(net, rows, opt, iteration=stop)


# --------------------------------------------------------------------------
# evaluation

@torch.no_grad()
def predict_labels(net: CPCANet, ds: Dataset, mode: str = "concat", batch_size: int = 25):
    net.eval()
    dtype = next(net.parameters()).dtype
    preds = []
    for i in range(0, len(ds), batch_size):
        x, _ = batch_tensors(ds, np.arange(i, min(i + batch_size, len(ds))), dtype)
        preds.append(predict_logits(net, x, mode).argmax(1).numpy())
    return np.concatenate(preds)


def evaluate(net: CPCANet, ds: Dataset, mode: str = "concat", batch_size: int = 25,
             name: str = "") -> MetricReport:
    pred = predict_labels(net, ds, mode, batch_size)
    conf = ConfusionMatrix.empty(ds.num_classes)
    for p, g in zip(pred, ds.labels):
        conf = accumulate(conf, p, g)
    rep = scores(conf, ds.class_names or None)
    rep.name = name
    return rep


@torch.no_grad()
def intervention_agreement(net: CPCANet, ds: Dataset, seed: int = 0, batch_size: int = 25) -> float:
    """Fraction of pixels whose causal-head argmax survives swapping bias maps in the batch."""
    net.eval()
    dtype = next(net.parameters()).dtype
    same = total = 0
    for j, i in enumerate(range(0, len(ds), batch_size)):
        x, _ = batch_tensors(ds, np.arange(i, min(i + batch_size, len(ds))), dtype)
        perm = sample_permutation(x.shape[0], [phase_seed(seed, "eval"), j], derangement=True)
        a = predict_logits(net, x, "concat").argmax(1)
        b = predict_logits(net, x, "concat", perm=perm.perm).argmax(1)
        same += int((a == b).sum())
        total += a.numel()
    return same / total


# --------------------------------------------------------------------------
# checkpoint glue

def make_checkpoint(net, phase, iteration, bank=None, optimizer=None, meta=None) -> Checkpoint:
    return Checkpoint(pack_state(net, bank, optimizer), iteration, phase,
                      config_digest(net.arch), dict(meta or {}))


def net_from_checkpoint(ckpt: Checkpoint, arch: ArchConfig, dtype=torch.float32) -> CPCANet:
    return restore_model(init_params(arch, dtype), ckpt.tensors)


def optimizer_from_checkpoint(ckpt: Checkpoint, net: CPCANet, phase: str, cfg: TrainConfig):
    ph = getattr(cfg, phase)
    if phase == "adapt":
        params = list(net.named_parameters())
    else:
        params = list(net.enc_c.named_parameters(prefix="enc_c")) + \
            list(net.head_c.named_parameters(prefix="head_c"))
    return restore_optimizer(SGD(params, ph.momentum, ph.weight_decay), ckpt.tensors)


def bank_from_checkpoint(ckpt: Checkpoint):
    return restore_bank(ckpt.tensors)
