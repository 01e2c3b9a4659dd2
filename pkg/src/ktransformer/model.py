"""The translation model: a post-norm encoder-decoder stack whose encoder
self-attention can be steered by per-sentence k-means structure.

Per source sentence, the raw (position-free) token embeddings are clustered;
each encoder attention head then receives an additive pre-softmax bias
built from a same-cluster indicator and from the cosine affinity between
each key token's embedding and the head's centroid. Both terms are gated by
learnable per-head scalars that start at zero, so a freshly built model is
exactly a vanilla Transformer. Assignments and centroids are constants of
the forward pass; gradients reach only the gate scalars.

All sequence operations here are per sentence: ids are 1-D, activations are
(length, d_model). Padded rows from a batch are accepted alongside a boolean
mask marking the real prefix.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .cluster import ClusterResult, kmeans_fit
from .corpus import PAD_ID, BOS_ID, EOS_ID
from .layers import (
    FeedForward,
    LayerNormParams,
    MultiHeadAttention,
    dropout,
    feed_forward,
    glorot,
    multi_head_attention,
    positional_encoding,
    residual_layernorm,
)
from .tensor import Tensor, add, dtype_of, masked_cross_entropy, matmul, mul, pick_rows

CLUSTER_MODES = ("off", "same_cluster", "centroid_affinity", "both")


@dataclass
class ModelConfig:
    """Every architectural knob; defaults follow the desk-scale profile."""

    vocab_src: int
    vocab_tgt: int
    d_model: int = 512
    heads: int = 8
    d_ff: int = 2048
    layers_enc: int = 2
    layers_dec: int = 2
    dropout: float = 0.1
    max_len: int = 50
    clusters_k: int = 4
    cluster_mode: str = "off"
    precision: str = "f32"
    init_seed: int = 0
    cluster_seed: int = 0

    def validate(self) -> None:
        if self.vocab_src < 4 or self.vocab_tgt < 4:
            raise ValueError("vocabulary sizes must cover the 4 reserved ids")
        if self.d_model < 2 or self.d_model % 2 != 0:
            raise ValueError(f"d_model must be even and positive, got {self.d_model}")
        if self.heads < 1 or self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} must divide evenly into {self.heads} heads")
        if self.d_ff < 1 or self.layers_enc < 1 or self.layers_dec < 1 or self.max_len < 1:
            raise ValueError("d_ff, layer counts, and max_len must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.clusters_k < 1:
            raise ValueError(f"clusters_k must be at least 1, got {self.clusters_k}")
        if self.cluster_mode not in CLUSTER_MODES:
            raise ValueError(f"cluster_mode must be one of {CLUSTER_MODES}, got {self.cluster_mode!r}")
        dtype_of(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


class ClusterBiasParams:
    """Per-head gate scalars for the two cluster bias terms, initialized to
    zero so the untrained bias vanishes identically."""

    def __init__(self, heads: int, dtype):
        self.gain_same = [Tensor(np.zeros((), dtype=dtype), requires_grad=True) for _ in range(heads)]
        self.gain_affinity = [Tensor(np.zeros((), dtype=dtype), requires_grad=True) for _ in range(heads)]

    def params(self) -> dict[str, Tensor]:
        out = {}
        for h, g in enumerate(self.gain_same):
            out[f"same{h}"] = g
        for h, g in enumerate(self.gain_affinity):
            out[f"aff{h}"] = g
        return out


def cluster_bias(
    result: ClusterResult,
    embeddings: Tensor,
    head: int,
    params: ClusterBiasParams,
    mode: str,
    total_len: int | None = None,
) -> Tensor | None:
    """Additive attention-score bias for one head, shape (total, total).

    bias[i][j] = gain_same[head] * [assignments i and j equal]
               + gain_affinity[head] * cos(embeddings[j], centroids[head mod k])
    with terms included per ``mode``. The indicator and cosine matrices are
    constants; gradient reaches only the two gate scalars. When ``total_len``
    exceeds the clustered length (PAD suffix), extra rows and columns are
    zero; those scores are masked away regardless.
    """
    if mode not in CLUSTER_MODES:
        raise ValueError(f"cluster_mode must be one of {CLUSTER_MODES}, got {mode!r}")
    if mode == "off":
        return None
    if head >= len(params.gain_same):
        raise ValueError(f"head {head} out of range for {len(params.gain_same)} heads")
    a = result.assignments
    n = a.shape[0]
    total = n if total_len is None else total_len
    if total < n:
        raise ValueError(f"total_len {total} shorter than clustered length {n}")
    dtype = params.gain_same[head].data.dtype

    bias: Tensor | None = None
    if mode in ("same_cluster", "both"):
        same = np.zeros((total, total), dtype=dtype)
        same[:n, :n] = (a[:, None] == a[None, :]).astype(dtype)
        bias = mul(params.gain_same[head], Tensor(same))
    if mode in ("centroid_affinity", "both"):
        centroid = np.asarray(result.centroids[head % result.centroids.shape[0]], dtype=np.float64)
        emb = np.asarray(embeddings.data[:n], dtype=np.float64)
        c_norm = np.sqrt((centroid * centroid).sum())
        e_norm = np.sqrt((emb * emb).sum(axis=1))
        cos = np.zeros(n, dtype=np.float64)
        ok = (e_norm >= 1e-12) & (c_norm >= 1e-12)
        if c_norm >= 1e-12:
            cos[ok] = (emb[ok] @ centroid) / (e_norm[ok] * c_norm)
        aff = np.zeros((total, total), dtype=dtype)
        aff[:n, :n] = np.broadcast_to(cos.astype(dtype), (n, n))
        term = mul(params.gain_affinity[head], Tensor(aff))
        bias = term if bias is None else add(bias, term)
    return bias


class EncoderLayer:
    def __init__(self, rng, d_model, heads, d_ff, dtype):
        self.attn = MultiHeadAttention(rng, d_model, heads, dtype)
        self.ln1 = LayerNormParams(d_model, dtype)
        self.ffn = FeedForward(rng, d_model, d_ff, dtype)
        self.ln2 = LayerNormParams(d_model, dtype)
        self.bias = ClusterBiasParams(heads, dtype)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, p in self.attn.params().items():
            out[f"attn.{name}"] = p
        for name, p in self.ln1.params().items():
            out[f"ln1.{name}"] = p
        for name, p in self.ffn.params().items():
            out[f"ffn.{name}"] = p
        for name, p in self.ln2.params().items():
            out[f"ln2.{name}"] = p
        for name, p in self.bias.params().items():
            out[f"bias.{name}"] = p
        return out


class DecoderLayer:
    def __init__(self, rng, d_model, heads, d_ff, dtype):
        self.self_attn = MultiHeadAttention(rng, d_model, heads, dtype)
        self.ln1 = LayerNormParams(d_model, dtype)
        self.cross_attn = MultiHeadAttention(rng, d_model, heads, dtype)
        self.ln2 = LayerNormParams(d_model, dtype)
        self.ffn = FeedForward(rng, d_model, d_ff, dtype)
        self.ln3 = LayerNormParams(d_model, dtype)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, p in self.self_attn.params().items():
            out[f"self.{name}"] = p
        for name, p in self.ln1.params().items():
            out[f"ln1.{name}"] = p
        for name, p in self.cross_attn.params().items():
            out[f"cross.{name}"] = p
        for name, p in self.ln2.params().items():
            out[f"ln2.{name}"] = p
        for name, p in self.ffn.params().items():
            out[f"ffn.{name}"] = p
        for name, p in self.ln3.params().items():
            out[f"ln3.{name}"] = p
        return out


def _check_ids(ids, vocab_size: int, what: str) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise ValueError(f"{what} ids must be a non-empty 1-D sequence")
    if arr.min() < 0 or arr.max() >= vocab_size:
        raise ValueError(f"{what} id out of range for vocabulary of {vocab_size}")
    return arr


def _check_mask(mask, n: int, ids: np.ndarray, what: str) -> np.ndarray:
    """Masks must mark a non-empty real prefix; the suffix must be <PAD>."""
    if mask is None:
        return np.ones(n, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.shape != (n,):
        raise ValueError(f"{what} mask shape {m.shape} does not match {n} ids")
    n_real = int(m.sum())
    if n_real == 0:
        raise ValueError(f"{what} mask marks no real tokens")
    if not m[:n_real].all():
        raise ValueError(f"{what} mask must be a True prefix followed by padding")
    if (ids[n_real:] != PAD_ID).any():
        raise ValueError(f"{what} padding positions must hold the <PAD> id")
    return m


class KTransformer:
    """Encoder-decoder with the cluster-bias hook on encoder self-attention."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        dtype = dtype_of(config.precision)
        self.dtype = dtype
        rng = np.random.default_rng(config.init_seed)
        self.src_embed = Tensor(glorot(rng, config.vocab_src, config.d_model, dtype), requires_grad=True)
        self.tgt_embed = Tensor(glorot(rng, config.vocab_tgt, config.d_model, dtype), requires_grad=True)
        # one extra row: decoder input is <BOS>-prefixed, so its width can be max_len + 1
        self.pe = Tensor(positional_encoding(config.max_len + 1, config.d_model, dtype))
        self.encoder = [
            EncoderLayer(rng, config.d_model, config.heads, config.d_ff, dtype) for _ in range(config.layers_enc)
        ]
        self.decoder = [
            DecoderLayer(rng, config.d_model, config.heads, config.d_ff, dtype) for _ in range(config.layers_dec)
        ]
        self.out_proj = Tensor(glorot(rng, config.d_model, config.vocab_tgt, dtype), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        """All trainable tensors in a stable, checkpoint-defining order."""
        out = {"src_embed": self.src_embed, "tgt_embed": self.tgt_embed}
        for i, layer in enumerate(self.encoder):
            for name, p in layer.params().items():
                out[f"enc{i}.{name}"] = p
        for i, layer in enumerate(self.decoder):
            for name, p in layer.params().items():
                out[f"dec{i}.{name}"] = p
        out["out_proj"] = self.out_proj
        return out

    def cluster_source(self, embeddings: Tensor) -> ClusterResult:
        """Cluster one sentence's raw token embeddings with k clamped to the
        sentence length; runs outside the gradient tape."""
        n = embeddings.data.shape[0]
        k_eff = min(self.config.clusters_k, n)
        return kmeans_fit(embeddings.data, k_eff, seed=self.config.cluster_seed)

    def _dropout_in(self, x: Tensor, training: bool, rng) -> Tensor:
        return dropout(x, self.config.dropout, rng, training)

    def encode(self, src_ids, src_mask=None, training: bool = False, rng=None):
        """Run the encoder over one (possibly PAD-suffixed) source sentence.

        Returns (memory, cluster result); the cluster slot is None when
        cluster_mode is off. Padded rows pass through the stack but are
        excluded from every attention softmax via the mask.
        """
        cfg = self.config
        ids = _check_ids(src_ids, cfg.vocab_src, "source")
        n = ids.shape[0]
        if n > cfg.max_len:
            raise ValueError(f"source length {n} exceeds max_len {cfg.max_len}")
        mask = _check_mask(src_mask, n, ids, "source")
        n_real = int(mask.sum())

        emb = pick_rows(self.src_embed, ids)
        result = None
        biases_by_layer = None
        if cfg.cluster_mode != "off":
            real_emb = Tensor(emb.data[:n_real].copy())
            result = self.cluster_source(real_emb)
            biases_by_layer = [
                [cluster_bias(result, real_emb, h, layer.bias, cfg.cluster_mode, total_len=n) for h in range(cfg.heads)]
                for layer in self.encoder
            ]

        x = add(emb, Tensor(self.pe.data[:n]))
        x = self._dropout_in(x, training, rng)
        keep = np.broadcast_to(mask, (n, n))
        for li, layer in enumerate(self.encoder):
            bias = biases_by_layer[li] if biases_by_layer is not None else None
            attn = multi_head_attention(x, x, x, layer.attn, per_head_bias=bias, keep=keep)
            x = residual_layernorm(x, attn, layer.ln1)
            x = residual_layernorm(x, feed_forward(layer.ffn, x), layer.ln2)
        return x, result

    def decode_forward(self, tgt_ids, memory: Tensor, tgt_mask=None, src_mask=None, training: bool = False, rng=None) -> Tensor:
        """Teacher-forced decoder pass: causal self-attention, cross-attention
        over the encoder memory, FFN; returns (m, vocab_tgt) logits."""
        cfg = self.config
        ids = _check_ids(tgt_ids, cfg.vocab_tgt, "target")
        m = ids.shape[0]
        if m > cfg.max_len + 1:
            raise ValueError(f"decoder input length {m} exceeds {cfg.max_len + 1}")
        mask = _check_mask(tgt_mask, m, ids, "target")
        s = memory.data.shape[0]
        smask = np.ones(s, dtype=bool) if src_mask is None else np.asarray(src_mask, dtype=bool)
        if smask.shape != (s,):
            raise ValueError(f"source mask shape {smask.shape} does not match memory rows {s}")

        causal = np.tril(np.ones((m, m), dtype=bool))
        keep_self = causal & mask
        keep_cross = np.broadcast_to(smask, (m, s))

        x = add(pick_rows(self.tgt_embed, ids), Tensor(self.pe.data[:m]))
        x = self._dropout_in(x, training, rng)
        for layer in self.decoder:
            sa = multi_head_attention(x, x, x, layer.self_attn, keep=keep_self)
            x = residual_layernorm(x, sa, layer.ln1)
            ca = multi_head_attention(x, memory, memory, layer.cross_attn, keep=keep_cross)
            x = residual_layernorm(x, ca, layer.ln2)
            x = residual_layernorm(x, feed_forward(layer.ffn, x), layer.ln3)
        return matmul(x, self.out_proj)

    def sequence_loss(self, src_ids, tgt_ids, src_mask=None, tgt_mask=None, training: bool = False, rng=None) -> Tensor:
        """Teacher-forced cross-entropy for one sentence pair.

        The decoder reads <BOS> + target and the loss compares against
        target + <EOS>; padding positions are excluded from the mean.
        """
        tids = _check_ids(tgt_ids, self.config.vocab_tgt, "target")
        tmask = _check_mask(tgt_mask, tids.shape[0], tids, "target")
        m_real = int(tmask.sum())
        dec_in = np.full(tids.shape[0] + 1, PAD_ID, dtype=np.int64)
        dec_in[0] = BOS_ID
        dec_in[1 : m_real + 1] = tids[:m_real]
        dec_mask = np.zeros(tids.shape[0] + 1, dtype=bool)
        dec_mask[: m_real + 1] = True
        target = np.full(tids.shape[0] + 1, PAD_ID, dtype=np.int64)
        target[:m_real] = tids[:m_real]
        target[m_real] = EOS_ID

        memory, _ = self.encode(src_ids, src_mask, training=training, rng=rng)
        logits = self.decode_forward(dec_in, memory, tgt_mask=dec_mask, src_mask=src_mask, training=training, rng=rng)
        return loss(logits, target)

    def greedy_translate(self, src_ids, src_mask=None, max_out_len: int | None = None) -> list[int]:
        """Deterministic greedy decoding: argmax token by token from <BOS>
        until <EOS> or the length cap; returns target ids without specials.
        Argmax ties resolve to the lowest token id."""
        cap = self.config.max_len if max_out_len is None else max_out_len
        if cap < 0:
            raise ValueError(f"max_out_len must be nonnegative, got {cap}")
        memory, _ = self.encode(src_ids, src_mask, training=False)
        smask = None if src_mask is None else np.asarray(src_mask, dtype=bool)
        out: list[int] = []
        for _ in range(cap):
            dec_in = np.array([BOS_ID] + out, dtype=np.int64)
            logits = self.decode_forward(dec_in, memory, src_mask=smask, training=False)
            next_id = int(np.argmax(logits.data[-1]))
            if next_id == EOS_ID:
                break
            out.append(next_id)
        return out


def loss(logits: Tensor, target_ids) -> Tensor:
    """Mean cross-entropy of logits rows against target ids, skipping <PAD>
    positions; raises on an all-pad target."""
    targets = np.asarray(target_ids, dtype=np.int64)
    active = targets != PAD_ID
    if not active.any():
        raise ValueError("loss over an all-pad target")
    return masked_cross_entropy(logits, targets, active)
