"""The mask-predictor transformer and its checkpoint format.

Block-causal attention: tokens attend bidirectionally inside their own
block and causally to every earlier block, never to later blocks. The
model input is the fused sum of token embeddings and the aligned
conditioning stream; the output is a full grid of vocabulary logits, one
row per position.

Checkpoint format (binary, little-endian):

* line 1: magic ``blockmdm-checkpoint v1``
* line 2: JSON header with the config and an ordered parameter manifest
  (name and shape per entry)
* body: the parameter arrays concatenated as raw ``<f8`` bytes, in
  exactly the manifest order (see ``TalkerParams.ordered``).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nd
from .errors import CheckpointError, InputError, ParameterError
from .masking import partition
from .semantics import AlignedSemantics, FusionParams, align, build_anchors, fuse

MAGIC = b"blockmdm-checkpoint v1\n"


@dataclass(frozen=True)
class Vocabulary:
    """Token id space: data tokens first, then MASK/EOS/PAD."""

    size: int
    mask_id: int
    eos_id: int
    pad_id: int

    def __post_init__(self):
        ids = (self.mask_id, self.eos_id, self.pad_id)
        if len(set(ids)) != 3 or any(not (0 <= i < self.size) for i in ids):
            raise ParameterError(f"special ids must be distinct and < {self.size}, got {ids}")

    @classmethod
    def with_specials(cls, data_tokens: int) -> "Vocabulary":
        return cls(size=data_tokens + 3, mask_id=data_tokens, eos_id=data_tokens + 1, pad_id=data_tokens + 2)

    @property
    def data_tokens(self) -> int:
        return self.size - 3


@dataclass(frozen=True)
class TalkerConfig:
    """Everything needed to rebuild the model shapes from scratch."""

    data_tokens: int = 64
    src_vocab: int = 32
    d: int = 64
    d_ff: int = 256
    n_layers: int = 4
    n_heads: int = 4
    B: int = 16
    Q: int = 4
    T_max: int = 256

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ParameterError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        if not (1 <= self.Q <= self.B):
            raise ParameterError(f"Q must satisfy 1 <= Q <= B, got Q={self.Q}, B={self.B}")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary.with_specials(self.data_tokens)

    @property
    def V(self) -> int:
        return self.data_tokens + 3


_MASK_CACHE: dict = {}


def build_block_causal_mask(T: int, B: int) -> np.ndarray:
    """Boolean visibility grid: row ``t`` sees column ``t'`` iff
    ``block(t') <= block(t)``. ``B=1`` is plain causal attention; ``B>=T``
    is full bidirectional visibility."""
    if T < 1 or B < 1:
        raise ParameterError(f"mask requires T >= 1 and B >= 1, got T={T}, B={B}")
    key = (T, B)
    cached = _MASK_CACHE.get(key)
    if cached is None:
        blk = np.arange(T) // B
        cached = blk[None, :] <= blk[:, None]
        cached.setflags(write=False)
        _MASK_CACHE[key] = cached
    return cached


@dataclass
class LayerParams:
    wq: nd.Param
    wk: nd.Param
    wv: nd.Param
    wo: nd.Param
    ffn_in: nd.Param
    ffn_out: nd.Param

    def params(self):
        return [self.wq, self.wk, self.wv, self.wo, self.ffn_in, self.ffn_out]


@dataclass
class TalkerParams:
    """All trainable tensors, in checkpoint order via :meth:`ordered`."""

    src_embed: nd.Param
    fusion: FusionParams
    tok_embed: nd.Param
    pos_embed: nd.Param
    layers: list = field(default_factory=list)
    head: nd.Param = None

    def ordered(self):
        out = [self.src_embed] + self.fusion.params() + [self.tok_embed, self.pos_embed]
        for lp in self.layers:
            out.extend(lp.params())
        out.append(self.head)
        return out

    def copy(self) -> "TalkerParams":
        clones = [nd.param(p.name, p.data.copy()) for p in self.ordered()]
        return _params_from_ordered(clones, n_layers=len(self.layers))

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.ordered():
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.ordered())


def _params_from_ordered(plist, n_layers):
    src, w1, b1, w2, b2, tok, pos = plist[:7]
    layers = []
    for i in range(n_layers):
        base = 7 + 6 * i
        layers.append(LayerParams(*plist[base:base + 6]))
    return TalkerParams(src_embed=src, fusion=FusionParams(W1=w1, b1=b1, W2=w2, b2=b2),
                        tok_embed=tok, pos_embed=pos, layers=layers, head=plist[-1])


def init_params(cfg: TalkerConfig, rng, std: float = 0.02) -> TalkerParams:
    """Fresh normally-initialized parameters; shapes depend only on ``cfg``."""
    def mat(name, r, c):
        return nd.param(name, rng.normal(0.0, std, size=(r, c)))

    layers = []
    for i in range(cfg.n_layers):
        layers.append(LayerParams(
            wq=mat(f"layer{i}.wq", cfg.d, cfg.d),
            wk=mat(f"layer{i}.wk", cfg.d, cfg.d),
            wv=mat(f"layer{i}.wv", cfg.d, cfg.d),
            wo=mat(f"layer{i}.wo", cfg.d, cfg.d),
            ffn_in=mat(f"layer{i}.ffn_in", cfg.d, cfg.d_ff),
            ffn_out=mat(f"layer{i}.ffn_out", cfg.d_ff, cfg.d),
        ))
    return TalkerParams(
        src_embed=mat("src_embed", cfg.src_vocab, cfg.d),
        fusion=FusionParams.init(cfg.d, cfg.d_ff, rng, std=std),
        tok_embed=mat("tok_embed", cfg.V, cfg.d),
        pos_embed=mat("pos_embed", cfg.T_max, cfg.d),
        layers=layers,
        head=mat("head", cfg.d, cfg.V),
    )


def semantic_states(params: TalkerParams, source_tokens) -> nd.Tensor:
    """Conditioning vectors for a source sequence: rows of the learned
    source embedding table."""
    source_tokens = np.asarray(source_tokens, dtype=np.intp)
    if source_tokens.size and source_tokens.max() >= params.src_embed.data.shape[0]:
        raise InputError(f"source token id >= src_vocab ({params.src_embed.data.shape[0]})")
    return nd.embedding(params.src_embed.value, source_tokens)


def align_for_canvas(params: TalkerParams, cfg: TalkerConfig, source_tokens, T: int) -> AlignedSemantics:
    """Build the aligned conditioning stream for a length-``T`` canvas."""
    part = partition(T, cfg.B)
    anchors = build_anchors(part, cfg.Q)
    return align(semantic_states(params, source_tokens), anchors, T)


def forward(params: TalkerParams, cfg: TalkerConfig, tokens, aligned: AlignedSemantics) -> nd.Tensor:
    """Logits for every position of a (possibly corrupted) token sequence.

    Positions in block ``k`` are a function of blocks ``<= k`` only, given
    the conditioning stream.
    """
    tokens = np.asarray(tokens, dtype=np.intp)
    T = len(tokens)
    if T < 1 or T > cfg.T_max:
        raise InputError(f"sequence length {T} outside [1, {cfg.T_max}]")
    if tokens.min() < 0 or tokens.max() >= cfg.V:
        raise InputError(f"token id outside vocabulary [0, {cfg.V})")
    if aligned.T < T:
        raise InputError(f"conditioning stream covers {aligned.T} positions, need {T}")
    h_prime = aligned
    if aligned.T > T:
        h_prime = AlignedSemantics(T=T, d=aligned.d,
                                   h_prime=nd.take_rows(aligned.h_prime, np.arange(T)),
                                   anchor_positions=aligned.anchor_positions,
                                   n_assigned=aligned.n_assigned)

    emb = nd.embedding(params.tok_embed.value, tokens)
    x = fuse(emb, h_prime, params.fusion)
    x = nd.add(x, nd.embedding(params.pos_embed.value, np.arange(T)))

    mask = build_block_causal_mask(T, cfg.B)
    dh = cfg.d // cfg.n_heads
    for lp in params.layers:
        h = nd.rmsnorm_rows(x)
        q = nd.matmul(h, lp.wq.value)
        k = nd.matmul(h, lp.wk.value)
        v = nd.matmul(h, lp.wv.value)
        heads = []
        for i in range(cfg.n_heads):
            lo, hi = i * dh, (i + 1) * dh
            heads.append(nd.masked_attention(nd.slice_cols(q, lo, hi),
                                             nd.slice_cols(k, lo, hi),
                                             nd.slice_cols(v, lo, hi), mask))
        att = nd.concat_cols(heads)
        x = nd.add(x, nd.matmul(att, lp.wo.value))
        h = nd.rmsnorm_rows(x)
        x = nd.add(x, nd.matmul(nd.relu(nd.matmul(h, lp.ffn_in.value)), lp.ffn_out.value))
    x = nd.rmsnorm_rows(x)
    return nd.matmul(x, params.head.value)


def forward_array(params: TalkerParams, cfg: TalkerConfig, tokens, aligned: AlignedSemantics) -> np.ndarray:
    """Forward pass without tape recording; returns a plain logits array."""
    with nd.no_grad():
        return forward(params, cfg, tokens, aligned).data


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def save_checkpoint(path, cfg: TalkerConfig, params: TalkerParams) -> None:
    ordered = params.ordered()
    header = {
        "config": asdict(cfg),
        "params": [{"name": p.name, "shape": list(p.data.shape)} for p in ordered],
    }
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for p in ordered:
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns ``(config, params)``."""
    with open(path, "rb") as f:
        magic = f.readline()
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic[:40]!r}")
        try:
            header = json.loads(f.readline().decode("utf-8"))
            cfg = TalkerConfig(**header["config"])
        except (ValueError, TypeError, KeyError) as e:
            raise CheckpointError(f"{path}: malformed header ({e})") from e
        plist = []
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape))
            raw = f.read(n * 8)
            if len(raw) != n * 8:
                raise CheckpointError(f"{path}: truncated data for parameter {entry['name']!r}")
            plist.append(nd.param(entry["name"], np.frombuffer(raw, dtype="<f8").reshape(shape).copy()))
    return cfg, _params_from_ordered(plist, n_layers=cfg.n_layers)


def check_compatible(expected: TalkerConfig, actual: TalkerConfig, path="checkpoint") -> None:
    """Raise a CheckpointError naming any field that differs."""
    mismatched = [f for f in ("data_tokens", "d", "B", "src_vocab", "Q", "n_layers", "n_heads", "d_ff", "T_max")
                  if getattr(expected, f) != getattr(actual, f)]
    if mismatched:
        detail = ", ".join(f"{f}: expected {getattr(expected, f)}, got {getattr(actual, f)}" for f in mismatched)
        raise CheckpointError(f"{path}: incompatible config ({detail})")
