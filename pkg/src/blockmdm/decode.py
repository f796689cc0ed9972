"""Streaming block-by-block decoding with confidence-ranked unmasking.

Each block starts fully masked and is denoised in ``K`` steps: every step
runs one forward pass conditioned on the committed prefix and the
conditioning stream, then reveals the scheduled number of highest
confidence positions with their argmax tokens. Completed blocks are final:
they are emitted immediately and never change. Generation stops at the
first block containing an end-of-sequence token (output truncated at the
earliest one) or when the block budget runs out.

``B = 1`` with ``K = 1`` degenerates to greedy next-token decoding.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nd, talker
from .errors import DecodeError, ParameterError
from .schedule import pick_reveal, schedule_step
from .semantics import AlignedSemantics
from .talker import TalkerConfig, TalkerParams


@dataclass(frozen=True)
class DecodeConfig:
    B: int = 16
    K: int = 4
    max_blocks: int = 16
    eos_id: int = None

    def __post_init__(self):
        if self.B < 1 or self.K < 1:
            raise ParameterError(f"B and K must be >= 1, got B={self.B}, K={self.K}")
        if self.max_blocks < 1:
            raise ParameterError(f"max_blocks must be >= 1, got {self.max_blocks}")


@dataclass
class StepTrace:
    step: int
    revealed_positions: list
    confidences: list
    wall_time: float


@dataclass
class BlockTrace:
    block_index: int
    steps: list = field(default_factory=list)
    forward_passes: int = 0
    wall_time: float = 0.0


@dataclass
class DecodeTrace:
    blocks: list = field(default_factory=list)
    tokens_emitted: int = 0
    total_forwards: int = 0
    total_time: float = 0.0
    stopped_on_eos: bool = False
    truncated_by_limit: bool = False


@dataclass
class DecodeResult:
    tokens: np.ndarray
    trace: DecodeTrace

    @property
    def stopped_on_eos(self):
        return self.trace.stopped_on_eos

    @property
    def truncated_by_limit(self):
        return self.trace.truncated_by_limit


def decode_block(prefix, aligned: AlignedSemantics, params: TalkerParams, tcfg: TalkerConfig,
                 dcfg: DecodeConfig) -> tuple:
    """Denoise the next block after ``prefix``; returns ``(tokens, trace)``.

    The prefix must consist of whole committed blocks (length a multiple of
    ``B``, possibly zero).
    """
    prefix = np.asarray(prefix, dtype=np.intp)
    B, K = dcfg.B, dcfg.K
    if B != tcfg.B:
        raise ParameterError(f"decode block size {B} does not match model block size {tcfg.B}")
    if len(prefix) % B != 0:
        raise ParameterError(f"prefix length {len(prefix)} is not a multiple of B={B}")
    lo = len(prefix)
    mask_id = tcfg.vocab.mask_id
    canvas = np.concatenate([prefix, np.full(B, mask_id, dtype=np.intp)])
    trace = BlockTrace(block_index=lo // B)
    block_start = time.perf_counter()
    for j in range(1, K + 1):
        masked_local = np.nonzero(canvas[lo:lo + B] == mask_id)[0]
        if masked_local.size == 0:
            break
        t0 = time.perf_counter()
        logits = talker.forward_array(params, tcfg, canvas, aligned)
        trace.forward_passes += 1
        if not np.isfinite(logits[lo:lo + B]).all():
            trace.wall_time = time.perf_counter() - block_start
            raise DecodeError(f"non-finite logits in block {trace.block_index} at step {j}", trace=trace)
        rows = logits[lo + masked_local]
        conf = nd.softmax_array(rows).max(axis=1)
        n_j = schedule_step(len(masked_local), j, K)
        reveal_local = pick_reveal(masked_local, conf, n_j)
        canvas[lo + reveal_local] = logits[lo + reveal_local].argmax(axis=1)
        conf_by_pos = dict(zip(masked_local.tolist(), conf.tolist()))
        trace.steps.append(StepTrace(
            step=j,
            revealed_positions=(lo + reveal_local).tolist(),
            confidences=[conf_by_pos[int(p)] for p in reveal_local],
            wall_time=time.perf_counter() - t0,
        ))
    trace.wall_time = time.perf_counter() - block_start
    return canvas[lo:lo + B], trace


def stream_blocks(aligned: AlignedSemantics, params: TalkerParams, tcfg: TalkerConfig,
                  dcfg: DecodeConfig, trace: DecodeTrace):
    """Generator yielding ``(tokens, block_trace)`` per completed block.

    The final chunk is truncated at the earliest end-of-sequence token when
    one appears. Trace flags are finalized when the generator is exhausted.
    """
    if aligned.T < dcfg.B:
        raise ParameterError(f"conditioning stream length {aligned.T} is shorter than one block ({dcfg.B})")
    eos = dcfg.eos_id if dcfg.eos_id is not None else tcfg.vocab.eos_id
    capacity = min(dcfg.max_blocks, aligned.T // dcfg.B)
    prefix = np.empty(0, dtype=np.intp)
    t0 = time.perf_counter()
    for _ in range(capacity):
        block, btrace = decode_block(prefix, aligned, params, tcfg, dcfg)
        trace.blocks.append(btrace)
        trace.total_forwards += btrace.forward_passes
        eos_hits = np.nonzero(block == eos)[0]
        if eos_hits.size:
            emitted = block[:int(eos_hits[0]) + 1]
            trace.tokens_emitted += len(emitted)
            trace.stopped_on_eos = True
            trace.total_time = time.perf_counter() - t0
            yield emitted, btrace
            return
        prefix = np.concatenate([prefix, block])
        trace.tokens_emitted += len(block)
        yield block, btrace
    trace.truncated_by_limit = True
    trace.total_time = time.perf_counter() - t0


def decode(aligned: AlignedSemantics, params: TalkerParams, tcfg: TalkerConfig,
           dcfg: DecodeConfig) -> DecodeResult:
    """Drive the stream to completion and assemble the full output."""
    trace = DecodeTrace()
    chunks = [chunk for chunk, _ in stream_blocks(aligned, params, tcfg, dcfg, trace)]
    tokens = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.intp)
    if trace.total_time == 0.0 and trace.blocks:
        trace.total_time = sum(b.wall_time for b in trace.blocks)
    return DecodeResult(tokens=tokens, trace=trace)


def decode_source(source_tokens, params: TalkerParams, tcfg: TalkerConfig,
                  dcfg: DecodeConfig) -> DecodeResult:
    """Convenience wrapper: build the conditioning stream for a source
    sequence over the full block budget, then decode."""
    canvas_T = min(dcfg.max_blocks * dcfg.B, (tcfg.T_max // dcfg.B) * dcfg.B)
    with nd.no_grad():
        aligned = talker.align_for_canvas(params, tcfg, source_tokens, canvas_T)
    return decode(aligned, params, tcfg, dcfg)
