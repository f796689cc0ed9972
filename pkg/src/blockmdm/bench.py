"""Throughput, latency and uncertainty measurements for the decoder.

Reports are split into deterministic fields (reproducible byte for byte
given seed and config) and timing fields, which are wall-clock
measurements and carry an explicit nondeterminism marker in the JSON
output. Throughput is tokens per second of decode wall time; the
real-time-factor analog divides wall time by a nominal output duration
(``tokens * seconds_per_token``), a labeling convention for comparing
trends, not a measured audio property.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import decode as decode_mod
from . import nd, synthtask, talker
from .decode import DecodeConfig
from .errors import ParameterError
from .schedule import row_entropy
from .talker import TalkerConfig, TalkerParams

NOMINAL_SECONDS_PER_TOKEN = 0.04

CSV_COLUMNS = ["checkpoint", "K", "tps", "rtf_analog", "err_rate",
               "conf_step1", "entropy_step1",
               "latency_stage_semantics", "latency_stage_talker", "latency_stage_post"]


@dataclass
class Metrics:
    """Aggregate decode metrics for one (checkpoint, K) cell."""

    checkpoint: str
    K: int
    tokens: int
    wall_time: float
    tps: float
    rtf_analog: float
    err_rate: float
    mean_confidence_per_step: list
    mean_entropy_per_step: list
    forwards_per_block: float
    latency_semantics: float
    latency_talker: float
    latency_post: float

    @property
    def conf_step1(self):
        return self.mean_confidence_per_step[0] if self.mean_confidence_per_step else float("nan")

    @property
    def entropy_step1(self):
        return self.mean_entropy_per_step[0] if self.mean_entropy_per_step else float("nan")


@dataclass
class ExperimentConfig:
    """A step sweep over one or more checkpoints."""

    checkpoints: dict  # label -> path
    steps: list = field(default_factory=lambda: [16, 8, 4, 2, 1])
    eval_path: str = None
    seed: int = 0
    repetitions: int = 1
    max_blocks: int = 8
    warmup: int = 2
    seconds_per_token: float = NOMINAL_SECONDS_PER_TOKEN

    def __post_init__(self):
        if not self.steps or any(k < 1 for k in self.steps):
            raise ParameterError(f"step list must be nonempty and positive, got {self.steps}")
        if self.repetitions < 1:
            raise ParameterError(f"repetitions must be >= 1, got {self.repetitions}")


def _first_chunk_stages(params: TalkerParams, tcfg: TalkerConfig, source, dcfg: DecodeConfig):
    """Per-stage wall times for producing the first completed block.

    Stages: building the aligned conditioning stream, the talker's
    diffusion steps, and post-processing (EOS scan plus trace/assembly).
    """
    canvas_T = min(dcfg.max_blocks * dcfg.B, (tcfg.T_max // dcfg.B) * dcfg.B)
    t0 = time.perf_counter()
    with nd.no_grad():
        aligned = talker.align_for_canvas(params, tcfg, source, canvas_T)
    t1 = time.perf_counter()
    block, btrace = decode_mod.decode_block(np.empty(0, dtype=np.intp), aligned, params, tcfg, dcfg)
    t2 = time.perf_counter()
    eos = dcfg.eos_id if dcfg.eos_id is not None else tcfg.vocab.eos_id
    hits = np.nonzero(block == eos)[0]
    emitted = block[:int(hits[0]) + 1] if hits.size else block
    _ = emitted.tolist()
    t3 = time.perf_counter()
    return {"semantics": t1 - t0, "talker": t2 - t1, "post": t3 - t2}, btrace


def first_chunk_breakdown(params: TalkerParams, tcfg: TalkerConfig, sources, K: int,
                          max_blocks: int = 8, warmup: int = 2) -> dict:
    """Mean and standard deviation of per-stage first-chunk latency."""
    dcfg = DecodeConfig(B=tcfg.B, K=K, max_blocks=max_blocks, eos_id=tcfg.vocab.eos_id)
    for source in sources[:warmup]:
        _first_chunk_stages(params, tcfg, source, dcfg)
    stages = {"semantics": [], "talker": [], "post": []}
    forwards = []
    for source in sources:
        timing, btrace = _first_chunk_stages(params, tcfg, source, dcfg)
        for name, value in timing.items():
            stages[name].append(value)
        forwards.append(btrace.forward_passes)
    report = {"K": K, "n_inputs": len(sources), "forwards_first_block": float(np.mean(forwards))}
    total = 0.0
    for name, values in stages.items():
        report[f"{name}_mean"] = float(np.mean(values))
        report[f"{name}_std"] = float(np.std(values))
        total += report[f"{name}_mean"]
    report["total_mean"] = total
    return report


def decode_eval(params: TalkerParams, tcfg: TalkerConfig, pairs, K: int,
                max_blocks: int = 8, warmup: int = 2, checkpoint_label: str = "model",
                seconds_per_token: float = NOMINAL_SECONDS_PER_TOKEN) -> Metrics:
    """Decode an eval set at ``K`` steps per block and aggregate metrics."""
    vocab = tcfg.vocab
    dcfg = DecodeConfig(B=tcfg.B, K=K, max_blocks=max_blocks, eos_id=vocab.eos_id)
    for p in pairs[:warmup]:
        decode_mod.decode_source(p.source, params, tcfg, dcfg)

    tokens = 0
    wall = 0.0
    errs = []
    conf_by_step = [[] for _ in range(K)]
    forwards = []
    for p in pairs:
        result = decode_mod.decode_source(p.source, params, tcfg, dcfg)
        tokens += len(result.tokens)
        wall += result.trace.total_time
        hyp = synthtask.strip_eos(result.tokens, vocab.eos_id)
        ref = synthtask.strip_eos(p.target, vocab.eos_id)
        errs.append(synthtask.token_error_rate(hyp, ref).rate)
        for btrace in result.trace.blocks:
            forwards.append(btrace.forward_passes)
            for strace in btrace.steps:
                conf_by_step[strace.step - 1].extend(strace.confidences)
    mean_conf = [float(np.mean(v)) if v else float("nan") for v in conf_by_step]
    return Metrics(
        checkpoint=checkpoint_label,
        K=K,
        tokens=tokens,
        wall_time=wall,
        tps=tokens / wall if wall > 0 else float("inf"),
        rtf_analog=wall / (tokens * seconds_per_token) if tokens else float("inf"),
        err_rate=float(np.mean(errs)),
        mean_confidence_per_step=mean_conf,
        mean_entropy_per_step=[float("nan")] * K,  # filled by uncertainty_profile
        forwards_per_block=float(np.mean(forwards)) if forwards else 0.0,
        latency_semantics=float("nan"),
        latency_talker=float("nan"),
        latency_post=float("nan"),
    )


def uncertainty_profile(params: TalkerParams, tcfg: TalkerConfig, sources, K: int,
                        max_blocks: int = 8) -> dict:
    """Mean confidence and entropy of the positions revealed at each step.

    Replays decoding and scores the logits rows of positions at the moment
    they are revealed (step 1 reflects the fully masked block state).
    """
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    dcfg = DecodeConfig(B=tcfg.B, K=K, max_blocks=max_blocks, eos_id=tcfg.vocab.eos_id)
    conf_by_step = [[] for _ in range(K)]
    ent_by_step = [[] for _ in range(K)]
    canvas_T = min(dcfg.max_blocks * dcfg.B, (tcfg.T_max // dcfg.B) * dcfg.B)
    for source in sources:
        with nd.no_grad():
            aligned = talker.align_for_canvas(params, tcfg, source, canvas_T)
        _replay_uncertainty(params, tcfg, dcfg, aligned, conf_by_step, ent_by_step)
    return {
        "K": K,
        "mean_confidence_per_step": [float(np.mean(v)) if v else float("nan") for v in conf_by_step],
        "mean_entropy_per_step": [float(np.mean(v)) if v else float("nan") for v in ent_by_step],
        "n_sources": len(sources),
    }


def _replay_uncertainty(params, tcfg, dcfg, aligned, conf_by_step, ent_by_step):
    """Replay the decode loop, scoring revealed rows at their reveal step."""
    from .schedule import pick_reveal, schedule_step

    eos = dcfg.eos_id if dcfg.eos_id is not None else tcfg.vocab.eos_id
    mask_id = tcfg.vocab.mask_id
    capacity = min(dcfg.max_blocks, aligned.T // dcfg.B)
    prefix = np.empty(0, dtype=np.intp)
    for _ in range(capacity):
        lo = len(prefix)
        canvas = np.concatenate([prefix, np.full(dcfg.B, mask_id, dtype=np.intp)])
        for j in range(1, dcfg.K + 1):
            masked_local = np.nonzero(canvas[lo:lo + dcfg.B] == mask_id)[0]
            if masked_local.size == 0:
                break
            logits = talker.forward_array(params, tcfg, canvas, aligned)
            rows = logits[lo + masked_local]
            conf = nd.softmax_array(rows).max(axis=1)
            n_j = schedule_step(len(masked_local), j, dcfg.K)
            reveal = pick_reveal(masked_local, conf, n_j)
            conf_local = dict(zip(masked_local.tolist(), conf.tolist()))
            for r in reveal:
                conf_by_step[j - 1].append(conf_local[int(r)])
                ent_by_step[j - 1].append(row_entropy(logits[lo + int(r)]))
            canvas[lo + reveal] = logits[lo + reveal].argmax(axis=1)
        block = canvas[lo:lo + dcfg.B]
        if (block == eos).any():
            return
        prefix = canvas


def bench_sweep(cfg: ExperimentConfig, pairs=None) -> dict:
    """Run the full (checkpoint, K) grid and aggregate over repetitions."""
    if pairs is None:
        if cfg.eval_path is None:
            raise ParameterError("bench_sweep needs an eval corpus (eval_path) or explicit pairs")
        _, pairs = synthtask.read_corpus(cfg.eval_path)
    loaded = {}
    ref_cfg = None
    for label, path in cfg.checkpoints.items():
        tcfg, params = talker.load_checkpoint(path)
        if ref_cfg is None:
            ref_cfg = tcfg
        else:
            talker.check_compatible(ref_cfg, tcfg, path=path)
        loaded[label] = (tcfg, params)

    rows = []
    for label, (tcfg, params) in loaded.items():
        sources = [p.source for p in pairs]
        for K in cfg.steps:
            reps = []
            for rep in range(cfg.repetitions):
                m = decode_eval(params, tcfg, pairs, K, max_blocks=cfg.max_blocks,
                                warmup=cfg.warmup, checkpoint_label=label,
                                seconds_per_token=cfg.seconds_per_token)
                reps.append(m)
            breakdown = first_chunk_breakdown(params, tcfg, sources, K,
                                              max_blocks=cfg.max_blocks, warmup=cfg.warmup)
            profile = uncertainty_profile(params, tcfg, sources, K, max_blocks=cfg.max_blocks)
            rows.append({
                "checkpoint": label,
                "K": K,
                "tps": float(np.mean([m.tps for m in reps])),
                "tps_std": float(np.std([m.tps for m in reps])),
                "rtf_analog": float(np.mean([m.rtf_analog for m in reps])),
                "err_rate": reps[0].err_rate,  # decoding is deterministic across reps
                "tokens": reps[0].tokens,
                "forwards_per_block": reps[0].forwards_per_block,
                "conf_step1": profile["mean_confidence_per_step"][0],
                "entropy_step1": profile["mean_entropy_per_step"][0],
                "mean_confidence_per_step": profile["mean_confidence_per_step"],
                "mean_entropy_per_step": profile["mean_entropy_per_step"],
                "latency_stage_semantics": breakdown["semantics_mean"],
                "latency_stage_talker": breakdown["talker_mean"],
                "latency_stage_post": breakdown["post_mean"],
            })
    return {
        "seconds_per_token": cfg.seconds_per_token,
        "repetitions": cfg.repetitions,
        "seed": cfg.seed,
        "rows": rows,
    }


TIMING_FIELDS = ("tps", "tps_std", "rtf_analog", "wall_time",
                 "latency_stage_semantics", "latency_stage_talker", "latency_stage_post",
                 "semantics_mean", "semantics_std", "talker_mean", "talker_std",
                 "post_mean", "post_std", "total_mean")


def report_to_json(report: dict) -> str:
    """Serialize a report, tagging wall-clock fields as nondeterministic.

    Timing values are wrapped as ``{"value": x, "nondeterministic": true}``
    so byte-level comparisons of reports can exclude them mechanically.
    """
    def wrap(obj):
        if isinstance(obj, dict):
            return {k: ({"value": wrap(v), "nondeterministic": True} if k in TIMING_FIELDS else wrap(v))
                    for k, v in obj.items()}
        if isinstance(obj, list):
            return [wrap(v) for v in obj]
        if isinstance(obj, float) and (np.isnan(obj) or np.isinf(obj)):
            return None
        return obj

    return json.dumps(wrap(report), indent=2, sort_keys=True)


def strip_timing(report: dict) -> dict:
    """The deterministic part of a report (for reproducibility checks)."""
    def walk(obj):
        if isinstance(obj, dict):
            return {k: walk(v) for k, v in obj.items() if k not in TIMING_FIELDS}
        if isinstance(obj, list):
            return [walk(v) for v in obj]
        return obj

    return walk(report)


def write_sweep_csv(path, report: dict) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in report["rows"]:
            w.writerow(row)
