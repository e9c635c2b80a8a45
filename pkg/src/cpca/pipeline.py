"""In-memory end-to-end run of the three phases on one seed."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import torch

from .config import RunConfig
from .data import Dataset, gen_synthetic, gen_target_test
from .metrics import MetricReport
from .model import init_params
from .trainer import (PhaseResult, adapt_cpca, build_prototypes, configure_threads, evaluate,
                      inference_mode, init_bias_encoder, intervention_agreement, make_pseudolabels,
                      pretrain_source, self_train)

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    seed: int
    source_only: MetricReport
    adapted: MetricReport  # after the adaptation phase
    final: MetricReport  # after self-training (== adapted when self-training is off)
    agreement_before: float
    agreement_after: float
    logs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    pseudo_retained: float = 0.0

    @property
    def improvement(self):
        return 100.0 * (self.final.miou - self.source_only.miou)


def run_pipeline(cfg: RunConfig, seed: int | None = None,
                 data: tuple[Dataset, Dataset, Dataset] | None = None) -> RunResult:
    seed = cfg.seed if seed is None else seed
    configure_threads(serial=True)
    torch.manual_seed(seed)
    tc = cfg.train
    times = {}
    t0 = time.perf_counter()
    if data is None:
        source, target = gen_synthetic(cfg.synth, seed)
        test = gen_target_test(cfg.synth, seed)
    else:
        source, target, test = data
    times["data"] = time.perf_counter() - t0

    arch = cfg.model
    arch.seed = seed
    net = init_params(arch)
    t0 = time.perf_counter()
    p1 = pretrain_source(tc, source, net, seed)
    times["pretrain"] = time.perf_counter() - t0
    src_only = evaluate(net, test, "causal", tc.eval_batch_size, name="source-only")
    log.info("seed %d source-only target mIoU %.4f", seed, src_only.miou)

    if tc.ablation.use_cfd:
        init_bias_encoder(net, tc.cpca.eb_init_noise, seed)
    bank = build_prototypes(net, source, tc) if tc.ablation.use_cpc else None
    before = intervention_agreement(net, test, seed, tc.eval_batch_size) \
        if tc.ablation.use_cfd else 1.0

    t0 = time.perf_counter()
    p2 = adapt_cpca(tc, net, bank, source, target, seed)
    times["adapt"] = time.perf_counter() - t0
    mode = inference_mode(tc)
    adapted = evaluate(net, test, mode, tc.eval_batch_size, name="cpca")
    after = intervention_agreement(net, test, seed, tc.eval_batch_size) \
        if tc.ablation.use_cfd else 1.0
    log.info("seed %d adapted mIoU %.4f agreement %.4f -> %.4f", seed, adapted.miou, before, after)

    final, retained, p3 = adapted, 0.0, PhaseResult(net)
    if tc.ablation.use_selftrain and tc.iterations("selftrain") > 0:
        t0 = time.perf_counter()
        pl = make_pseudolabels(net, target, tc)
        retained = pl.retained / pl.labels.size
        p3 = self_train(tc, net, target.with_labels(pl.labels), seed)
        times["selftrain"] = time.perf_counter() - t0
        final = evaluate(net, test, mode, tc.eval_batch_size, name="cpca+st")
        log.info("seed %d self-trained mIoU %.4f", seed, final.miou)
    return RunResult(seed, src_only, adapted, final, before, after,
                     {"pretrain": p1.log, "adapt": p2.log, "selftrain": p3.log}, times, retained)
