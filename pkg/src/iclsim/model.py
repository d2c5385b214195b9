"""Decoder-only transformer over episode tokens, with attention interventions.

Pre-norm blocks, learned absolute position embeddings, GELU feed-forward at
2x width, causal self-attention. Answers are scored (and predicted) only at
the positions following the query colon, with greedy decoding and teacher
forcing for two-token answers.

Two interventions degrade the usable context at evaluation or finetuning
time: example_mask hides whole study examples from attention with probability
p_attention each (separators and the query stay visible), and value_noise adds
Gaussian noise to the value vectors of all context tokens at every layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .episodes import EncodedEpisode, Vocab, maskable_token_mask
from .optim import Param
from .rng import SplitRng
from . import tensor as tz
from .tensor import Tensor

NEG = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_v: int
    n_layers: int
    n_heads: int
    d_model: int
    max_seq_len: int
    dropout: float = 0.0

    @property
    def d_ff(self) -> int:
        return 2 * self.d_model


@dataclass(frozen=True)
class AttentionIntervention:
    kind: str = "none"            # "none" | "example_mask" | "value_noise"
    p_attention: float = 0.0
    sigma_value: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "example_mask", "value_noise"):
            raise ValueError(f"unknown intervention kind {self.kind!r}")
        if not 0.0 <= self.p_attention <= 1.0:
            raise ValueError("p_attention must lie in [0, 1]")
        if self.sigma_value < 0.0:
            raise ValueError("sigma_value must be non-negative")

    def is_active(self) -> bool:
        if self.kind == "example_mask":
            return self.p_attention > 0.0
        if self.kind == "value_noise":
            return self.sigma_value > 0.0
        return False


NO_INTERVENTION = AttentionIntervention()


def init_params(cfg: ModelConfig, rng: SplitRng, dtype=np.float32) -> dict[str, Param]:
    """Scaled-normal initialization; deterministic given the rng stream."""
    p: dict[str, Param] = {}

    def normal(name, shape, std):
        p[name] = Param(rng.split(name).normal(0.0, std, shape).astype(dtype))

    def zeros(name, shape):
        p[name] = Param(np.zeros(shape, dtype=dtype))

    def ones(name, shape):
        p[name] = Param(np.ones(shape, dtype=dtype))

    D, V = cfg.d_model, cfg.d_v
    lin_std = 1.0 / np.sqrt(D)
    # residual-branch output projections shrink with depth to keep the stream stable
    out_std = lin_std / np.sqrt(2.0 * cfg.n_layers)
    normal("tok_emb", (V, D), 0.02)
    normal("pos_emb", (cfg.max_seq_len, D), 0.02)
    for i in range(cfg.n_layers):
        pre = f"blk{i}."
        ones(pre + "ln1.g", (D,))
        zeros(pre + "ln1.b", (D,))
        # queries, keys and values live in one fused projection
        normal(pre + "attn.wqkv", (D, 3 * D), lin_std)
        zeros(pre + "attn.bqkv", (3 * D,))
        normal(pre + "attn.wo", (D, D), out_std)
        zeros(pre + "attn.bo", (D,))
        ones(pre + "ln2.g", (D,))
        zeros(pre + "ln2.b", (D,))
        normal(pre + "ff.w1", (D, cfg.d_ff), lin_std)
        zeros(pre + "ff.b1", (cfg.d_ff,))
        normal(pre + "ff.w2", (cfg.d_ff, D), out_std / np.sqrt(2.0))
        zeros(pre + "ff.b2", (D,))
    ones("ln_f.g", (D,))
    zeros("ln_f.b", (D,))
    normal("head.w", (D, V), lin_std)
    zeros("head.b", (V,))
    return p


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for this architecture."""
    D, V, F = cfg.d_model, cfg.d_v, cfg.d_ff
    per_layer = 4 * D + 4 * (D * D + D) + D * F + F + F * D + D
    return V * D + cfg.max_seq_len * D + cfg.n_layers * per_layer + 2 * D + D * V + V


def example_mask_bias(
    T: int,
    batch_size: int,
    spans: tuple[tuple[int, int], ...],
    maskable: np.ndarray,
    p: float,
    rng: SplitRng,
) -> np.ndarray:
    """Additive (B, T, T) mask dropping whole study examples as attention keys.

    Each example is hidden independently with probability p, per episode.
    Hidden keys are invisible to every other position; the diagonal stays open
    so no softmax row goes empty. maskable marks the span tokens that may be
    hidden (separators stay visible). Causality is not encoded here; the
    attention op enforces it on its own.
    """
    if p <= 0.0 or not spans:
        return np.zeros((batch_size, T, T), dtype=np.float32)
    drop = rng.random((batch_size, len(spans))) < p
    hidden = np.zeros((batch_size, T), dtype=bool)
    for e, (start, end) in enumerate(spans):
        seg = np.zeros(T, dtype=bool)
        seg[start:end] = True
        seg &= maskable[:T]
        hidden |= drop[:, e : e + 1] & seg[None, :]
    bias = np.where(hidden[:, None, :], np.float32(NEG), np.float32(0.0))
    bias = np.broadcast_to(bias, (batch_size, T, T)).copy()
    idx = np.arange(T)
    bias[:, idx, idx] = 0.0
    return bias


class Transformer:
    """Parameters plus forward passes; training state lives in the Params."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Param] | None = None, init_rng: SplitRng | None = None):
        self.cfg = cfg
        if params is None:
            if init_rng is None:
                raise ValueError("need params or an init rng")
            params = init_params(cfg, init_rng)
        self.params = params

    def _hidden(
        self,
        tokens: np.ndarray,
        *,
        train: bool = False,
        rng: SplitRng | None = None,
        bias: np.ndarray | None = None,
        noise_sigma: float = 0.0,
        noise_rng: SplitRng | None = None,
        ctx_len: int | None = None,
        final_rows: np.ndarray | None = None,
    ) -> Tensor:
        """Final hidden states, (B, T, D); final_rows restricts the last block
        (and everything after it) to those positions, returning (B, K, D)."""
        cfg, p = self.cfg, self.params
        B, T = tokens.shape
        if T > cfg.max_seq_len:
            raise ValueError(f"sequence length {T} exceeds model capacity {cfg.max_seq_len}")
        if train and cfg.dropout > 0.0 and rng is None:
            raise ValueError("training forward with dropout needs an rng")

        dtype = p["tok_emb"].value.dtype
        x = tz.add(tz.gather_rows(p["tok_emb"].tensor, tokens), tz.gather_rows(p["pos_emb"].tensor, np.arange(T)))

        def drop(t, tag):
            if train and cfg.dropout > 0.0:
                return tz.dropout(t, cfg.dropout, rng.split("dropout", tag))
            return t

        for i in range(cfg.n_layers):
            pre = f"blk{i}."
            last = final_rows is not None and i == cfg.n_layers - 1
            h = tz.layer_norm(x, p[pre + "ln1.g"].tensor, p[pre + "ln1.b"].tensor)
            qkv = tz.linear(h, p[pre + "attn.wqkv"].tensor, p[pre + "attn.bqkv"].tensor)
            noise = None
            if noise_sigma > 0.0:
                cut = T if ctx_len is None else min(ctx_len, T)
                noise = noise_rng.split("vnoise", i).normal(0.0, noise_sigma, (B, T, cfg.d_model)).astype(dtype)
                noise[:, cut:, :] = 0.0
            a = tz.causal_attention(
                qkv, cfg.n_heads, bias=bias,
                query_rows=final_rows if last else None, value_noise=noise,
            )
            if last:
                x = tz.gather_unique_positions(x, final_rows)
            a = drop(tz.linear(a, p[pre + "attn.wo"].tensor, p[pre + "attn.bo"].tensor), i * 2)
            x = tz.residual_add(x, a)
            h2 = tz.layer_norm(x, p[pre + "ln2.g"].tensor, p[pre + "ln2.b"].tensor)
            f = tz.linear(h2, p[pre + "ff.w1"].tensor, p[pre + "ff.b1"].tensor)
            f = tz.linear(tz.gelu(f), p[pre + "ff.w2"].tensor, p[pre + "ff.b2"].tensor)
            x = tz.residual_add(x, drop(f, i * 2 + 1))
        return tz.layer_norm(x, p["ln_f.g"].tensor, p["ln_f.b"].tensor)

    def _intervention_state(self, batch: "EpisodeBatch", intervention: AttentionIntervention, step: int):
        """Resolve an intervention into (bias, noise_sigma, noise_rng) for one forward."""
        T = batch.tokens.shape[1]
        if intervention.kind == "example_mask" and intervention.p_attention > 0.0:
            mrng = SplitRng(intervention.seed, ("example_mask", step))
            bias = example_mask_bias(
                T, batch.tokens.shape[0], batch.spans, batch.maskable, intervention.p_attention, mrng
            )
            return bias, 0.0, None
        if intervention.kind == "value_noise" and intervention.sigma_value > 0.0:
            nrng = SplitRng(intervention.seed, ("value_noise", step))
            return None, intervention.sigma_value, nrng
        return None, 0.0, None

    def forward_logits(
        self,
        tokens: np.ndarray,
        train: bool = False,
        rng: SplitRng | None = None,
        bias: np.ndarray | None = None,
    ) -> Tensor:
        """Logits at every position, (B, T, d_v); 1-d token input is promoted."""
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
        h = self._hidden(tokens, train=train, rng=rng, bias=bias)
        out = tz.linear(h, self.params["head.w"].tensor, self.params["head.b"].tensor)
        return tz.reshape(out, out.shape[1:]) if squeeze else out

    def batch_loss(
        self,
        batch: "EpisodeBatch",
        train: bool = False,
        rng: SplitRng | None = None,
        intervention: AttentionIntervention = NO_INTERVENTION,
        step: int = 0,
    ) -> Tensor:
        """Mean answer-token cross-entropy; logits projected only where scored."""
        bias, sigma, nrng = self._intervention_state(batch, intervention, step)
        at = self._scored_hidden(
            batch, train=train, rng=rng, bias=bias, noise_sigma=sigma, noise_rng=nrng
        )
        logits = tz.linear(at, self.params["head.w"].tensor, self.params["head.b"].tensor)
        return tz.cross_entropy(logits, batch.targets)

    def _scored_hidden(self, batch: "EpisodeBatch", **kw) -> Tensor:
        """Hidden states at the scored positions, (B, K, D).

        When every episode scores the same positions (the batched layouts all
        do), the last block only ever computes those rows.
        """
        rows = batch.scored[0]
        if self.cfg.n_layers > 0 and bool(np.all(batch.scored == rows)):
            return self._hidden(batch.tokens, ctx_len=batch.ctx_len, final_rows=rows, **kw)
        h = self._hidden(batch.tokens, ctx_len=batch.ctx_len, **kw)
        return tz.gather_positions(h, batch.scored)

    def predict_answers(
        self,
        batch: "EpisodeBatch",
        intervention: AttentionIntervention = NO_INTERVENTION,
        step: int = 0,
    ) -> np.ndarray:
        """(B, K) greedy answer tokens under teacher forcing, no taping."""
        with tz.no_grad():
            bias, sigma, nrng = self._intervention_state(batch, intervention, step)
            at = self._scored_hidden(batch, bias=bias, noise_sigma=sigma, noise_rng=nrng)
            logits = tz.linear(at, self.params["head.w"].tensor, self.params["head.b"].tensor)
        return np.argmax(logits.data, axis=-1).astype(np.int32)


@dataclass
class EpisodeBatch:
    """Stacked teacher-forced episodes of identical layout."""

    tokens: np.ndarray    # (B, T_full) int32, prompt plus true answers
    scored: np.ndarray    # (B, K) positions whose logits predict the answers
    targets: np.ndarray   # (B, K) answer token ids
    spans: tuple[tuple[int, int], ...]
    maskable: np.ndarray  # (T_full,) bool, tokens example_mask may hide
    ctx_len: int          # prompt length; value noise stops here

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


def batch_episodes(episodes: list[EncodedEpisode], vocab: Vocab) -> EpisodeBatch:
    """Stack episodes; they must share one layout (true within a task family)."""
    first = episodes[0]
    ctx_len = len(first.tokens)
    spans = first.example_spans
    for ep in episodes:
        if len(ep.tokens) != ctx_len or ep.example_spans != spans:
            raise ValueError("episodes in a batch must share the same layout")
    tokens = np.stack([ep.full_tokens() for ep in episodes]).astype(np.int32)
    scored = np.stack([ep.scored_positions() for ep in episodes])
    targets = np.stack([ep.targets for ep in episodes]).astype(np.int64)
    maskable = np.zeros(tokens.shape[1], dtype=bool)
    mask_ctx = maskable_token_mask(first, vocab)
    maskable[: len(mask_ctx)] = mask_ctx
    return EpisodeBatch(
        tokens=tokens, scored=scored, targets=targets, spans=spans, maskable=maskable, ctx_len=ctx_len
    )
