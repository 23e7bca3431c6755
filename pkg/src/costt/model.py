"""The two-phase network.

Acoustic-semantic (AS) phase: keep every ``downsample_rate``-th frame, project
to ``d_model``, add sinusoidal positions, run ``pre_shrink_layers`` transformer
blocks. A CTC head (affine + log-softmax over V') reads that output; the same
states are shrunk by the CTC argmax and passed through ``post_shrink_layers``
more blocks to give the decoder memory.

Transcription-translation (TT) phase: one causal decoder over
``<asr> z <st> y <eos>`` attending to the memory. Text-only pretraining swaps
the memory for a single all-zero vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import checkpoint
from . import rng as rng_mod
from .ctc import ctc_greedy_decode
from .shrink import BatchShrink, ShrinkOutput, shrink_batch
from .tensor import (
    Tensor,
    attention_block,
    dropout,
    embedding,
    layer_norm,
    log_softmax,
    no_grad,
    relu,
)


@dataclass
class ModelConfig:
    d_input: int = 96
    vocab_size: int = 0  # |V|; |V'| = vocab_size + 1
    d_model: int = 64
    heads: int = 4
    pre_shrink_layers: int = 2
    post_shrink_layers: int = 2
    decoder_layers: int = 2
    ffn_dim: int = 128
    dropout: float = 0.1
    max_decode_len: int = 500
    downsample_rate: int = 3
    use_shrink: bool = True

    def validate(self) -> None:
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if min(self.pre_shrink_layers, self.post_shrink_layers, self.decoder_layers) < 1:
            raise ValueError("all layer counts must be >= 1")
        if self.max_decode_len < 2:
            raise ValueError("max_decode_len must be >= 2")
        if self.downsample_rate < 1 or self.vocab_size < 5 or self.d_input < 1:
            raise ValueError("downsample_rate >= 1, vocab_size >= 5 and d_input >= 1 are required")

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        """Base-transformer sizes with 12 AS blocks (CTC after the 6th) and 6 decoder blocks."""
        base = dict(d_model=512, heads=8, pre_shrink_layers=6, post_shrink_layers=6, decoder_layers=6, ffn_dim=2048)
        base.update(kw)
        return cls(**base)


@dataclass
class AsOutput:
    ctc_log_probs: Tensor  # [B, T_x, V']
    frame_lengths: np.ndarray
    memory: Tensor  # [B, L, d]
    memory_lengths: np.ndarray
    shrink: BatchShrink | None


@dataclass
class DecodeResult:
    transcript: list[int]
    translation: list[int]
    raw: list[int]  # emitted sequence starting with <asr>
    st_position: int | None
    missing_st: bool = False
    truncated: bool = False
    extra_st: int = 0
    ctc_labels: list[int] = field(default_factory=list)
    shrink_length: int = 0


_PE_CACHE: dict[int, np.ndarray] = {}


def positional_encoding(length: int, d: int) -> np.ndarray:
    pe = _PE_CACHE.get(d)
    if pe is None or pe.shape[0] < length:
        n = max(length, 512)
        pos = np.arange(n)[:, None]
        div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
        pe = np.zeros((n, d))
        pe[:, 0::2] = np.sin(pos * div)
        pe[:, 1::2] = np.cos(pos * div)[:, : d // 2]
        _PE_CACHE[d] = pe
    return pe[:length]


def split_consecutive(raw: Sequence[int], asr: int, st: int, eos: int) -> DecodeResult:
    """Split an emitted ``<asr> z <st> y <eos>`` sequence at its first ``<st>``."""
    body = list(raw[1:]) if raw and raw[0] == asr else list(raw)
    truncated = not body or body[-1] != eos
    if not truncated:
        body = body[:-1]
    if st in body:
        k = body.index(st)
        trans = body[k + 1 :]
        return DecodeResult(body[:k], trans, list(raw), k + 1, False, truncated, trans.count(st))
    return DecodeResult(body, [], list(raw), None, True, truncated, 0)


class CosttModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        if params is None:
            self._init_params(rng_mod.stream(seed, "init"))
        else:
            self.load_state_dict(params, strict=False)

    # -- parameters ----------------------------------------------------------
    def _init_params(self, r: np.random.Generator) -> None:
        c = self.cfg
        d, V = c.d_model, c.vocab_size

        def lin(name, fan_in, fan_out):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            self.params[name + ".w"] = Tensor(r.uniform(-lim, lim, size=(fan_in, fan_out)), True)
            self.params[name + ".b"] = Tensor(np.zeros(fan_out), True)

        def ln(name):
            self.params[name + ".g"] = Tensor(np.ones(d), True)
            self.params[name + ".b"] = Tensor(np.zeros(d), True)

        def attn(name):
            for p in ("q", "k", "v", "o"):
                lin(f"{name}.{p}", d, d)

        def block(name, cross=False):
            ln(name + ".ln1")
            attn(name + ".self")
            if cross:
                ln(name + ".ln_x")
                attn(name + ".cross")
            ln(name + ".ln2")
            lin(name + ".ffn1", d, c.ffn_dim)
            lin(name + ".ffn2", c.ffn_dim, d)

        lin("as.input", c.d_input, d)
        for i in range(c.pre_shrink_layers):
            block(f"as.pre.{i}")
        ln("as.pre_ln")
        lin("as.ctc", d, V + 1)
        for i in range(c.post_shrink_layers):
            block(f"as.post.{i}")
        ln("as.post_ln")
        self.params["tt.embed"] = Tensor(r.normal(0.0, d**-0.5, size=(V, d)), True)
        for i in range(c.decoder_layers):
            block(f"tt.dec.{i}", cross=True)
        ln("tt.final_ln")
        lin("tt.out", d, V)

    @property
    def as_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("as.")]

    @property
    def tt_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("tt.")]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
            for k, v in arrays.items():
                if self.params[k].shape != v.shape:
                    raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
        self.params = {k: Tensor(np.array(v, dtype=np.float64), True) for k, v in arrays.items()}

    def save(self, path) -> None:
        checkpoint.save(path, self.state_dict())

    @classmethod
    def load(cls, path, cfg: ModelConfig) -> "CosttModel":
        arrays = checkpoint.load(path)
        model = cls(cfg)
        model.load_state_dict(arrays)
        return model

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _lin(self, x: Tensor, name: str) -> Tensor:
        return x @ self.params[name + ".w"] + self.params[name + ".b"]

    def _ffn(self, x: Tensor, name: str, drop) -> Tensor:
        h = relu(self._lin(self._ln(x, name + ".ln2"), name + ".ffn1"))
        return x + drop(self._lin(h, name + ".ffn2"))

    def _enc_block(self, x: Tensor, name: str, mask: np.ndarray, drop) -> Tensor:
        h = self._ln(x, name + ".ln1")
        x = x + drop(attention_block(h, h, h, mask, self.cfg.heads, self._attn(name + ".self")))
        return self._ffn(x, name, drop)

    def _attn(self, prefix: str) -> dict[str, Tensor]:
        p = self.params
        out = {}
        for a in ("q", "k", "v", "o"):
            out["w" + a] = p[f"{prefix}.{a}.w"]
            out["b" + a] = p[f"{prefix}.{a}.b"]
        return out

    def _dropper(self, r: np.random.Generator | None):
        rate = self.cfg.dropout if r is not None else 0.0
        return lambda t: dropout(t, rate, r)

    # -- AS phase ------------------------------------------------------------
    def downsample(self, x: np.ndarray) -> np.ndarray:
        return x[:: self.cfg.downsample_rate]

    def encode(self, feats: Sequence[np.ndarray], rng: np.random.Generator | None = None) -> AsOutput:
        """AS phase on a list of stacked feature matrices; ``rng`` enables dropout."""
        c = self.cfg
        drop = self._dropper(rng)
        xs = [self.downsample(np.asarray(x, dtype=np.float64)) for x in feats]
        lengths = np.array([len(x) for x in xs])
        if lengths.min() < 1:
            raise ValueError("empty input after downsampling")
        for x in xs:
            if x.shape[1] != c.d_input:
                raise ValueError(f"feature dim {x.shape[1]} != d_input {c.d_input}")
        B, T = len(xs), int(lengths.max())
        batch = np.zeros((B, T, c.d_input))
        for i, x in enumerate(xs):
            batch[i, : len(x)] = x
        h = self._lin(Tensor(batch), "as.input") + positional_encoding(T, c.d_model)
        h = drop(h)
        mask = _key_mask(lengths, T, T)
        for i in range(c.pre_shrink_layers):
            h = self._enc_block(h, f"as.pre.{i}", mask, drop)
        h_hat = self._ln(h, "as.pre_ln")
        ctc_lp = log_softmax(self._lin(h_hat, "as.ctc"))
        if c.use_shrink:
            sh = shrink_batch(h_hat, ctc_lp.data, lengths, blank=c.vocab_size)
            h, mem_len = sh.h_prime, sh.lengths
        else:
            sh, h, mem_len = None, h_hat, lengths
        L = h.shape[1]
        mask = _key_mask(mem_len, L, L)
        for i in range(c.post_shrink_layers):
            h = self._enc_block(h, f"as.post.{i}", mask, drop)
        memory = self._ln(h, "as.post_ln")
        return AsOutput(ctc_lp, lengths, memory, mem_len, sh)

    def as_forward(self, x: np.ndarray, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor, ShrinkOutput | None]:
        """Single-utterance AS phase: ``(ctc_log_probs[T_x, V'], h_AS[L, d], shrink info)``."""
        out = self.encode([x], rng)
        T, L = int(out.frame_lengths[0]), int(out.memory_lengths[0])
        info = None
        if out.shrink is not None:
            info = ShrinkOutput(out.shrink.h_prime[0, :L], out.shrink.runs[0], out.shrink.spans[0],
                                bool(out.shrink.degenerate[0]))
        return out.ctc_log_probs[0, :T], out.memory[0, :L], info

    # -- TT phase ------------------------------------------------------------
    def _embed(self, tokens: np.ndarray, start: int = 0) -> Tensor:
        d = self.cfg.d_model
        n = tokens.shape[-1]
        return embedding(self.params["tt.embed"], tokens) * math.sqrt(d) + positional_encoding(start + n, d)[start:]

    def decode_logits(
        self,
        memory: Tensor,
        memory_lengths: Sequence[int],
        tokens: np.ndarray,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Teacher-forced decoder: logits ``[B, N, V]`` for every prefix position."""
        c = self.cfg
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        B, N = tokens.shape
        if N > c.max_decode_len:
            raise ValueError(f"sequence length {N} exceeds max_decode_len={c.max_decode_len}")
        drop = self._dropper(rng)
        x = drop(self._embed(tokens))
        self_mask = np.broadcast_to(np.tril(np.ones((N, N), dtype=bool)), (B, N, N))
        cross_mask = _key_mask(np.asarray(memory_lengths), N, memory.shape[1])
        for i in range(c.decoder_layers):
            x = self._dec_block(x, memory, f"tt.dec.{i}", self_mask, cross_mask, drop)
        return self._lin(self._ln(x, "tt.final_ln"), "tt.out")

    def _dec_block(self, x, memory, name, self_mask, cross_mask, drop, caches=None):
        h = self._ln(x, name + ".ln1")
        sc = caches[name + ".self"] if caches else None
        x = x + drop(attention_block(h, h, h, self_mask, self.cfg.heads, self._attn(name + ".self"), sc))
        h = self._ln(x, name + ".ln_x")
        xc = caches[name + ".cross"] if caches else None
        x = x + drop(attention_block(h, memory, memory, cross_mask, self.cfg.heads, self._attn(name + ".cross"), xc))
        return self._ffn(x, name, drop)

    def tt_forward(self, h_as: Tensor, prefix: Sequence[int]) -> Tensor:
        """Logits ``[len(prefix), V]`` for one utterance's memory ``h_as[L, d]``."""
        if not len(prefix) or prefix[0] != 0:
            raise ValueError("prefix must start with <asr>")
        mem = h_as.reshape(1, *h_as.shape)
        return self.decode_logits(mem, [h_as.shape[0]], np.asarray([prefix]))[0]

    def zero_memory(self, batch: int) -> tuple[Tensor, np.ndarray]:
        return Tensor(np.zeros((batch, 1, self.cfg.d_model))), np.ones(batch, dtype=np.int64)

    def tt_pretrain_forward(self, tokens: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        """Decoder pass over ``<asr> z <st> y`` inputs with the all-zero memory."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        mem, mem_len = self.zero_memory(tokens.shape[0])
        return self.decode_logits(mem, mem_len, tokens, rng)

    # -- greedy consecutive decoding ----------------------------------------
    def greedy_decode(self, feats: Sequence[np.ndarray], asr: int = 0, st: int = 1, eos: int = 2) -> list[DecodeResult]:
        c = self.cfg
        with no_grad():
            enc = self.encode(feats)
            B = len(feats)
            memory, mem_len = enc.memory, enc.memory_lengths
            caches = {}
            for i in range(c.decoder_layers):
                caches[f"tt.dec.{i}.self"] = {}
                caches[f"tt.dec.{i}.cross"] = {"static": True}
            cross_mask = _key_mask(mem_len, 1, memory.shape[1])
            seqs = [[asr] for _ in range(B)]
            done = np.zeros(B, dtype=bool)
            cur = np.full((B, 1), asr, dtype=np.int64)
            for pos in range(c.max_decode_len - 1):
                x = self._embed(cur, start=pos)
                self_mask = np.ones((B, 1, pos + 1), dtype=bool)
                for i in range(c.decoder_layers):
                    x = self._dec_block(x, memory, f"tt.dec.{i}", self_mask, cross_mask, lambda t: t, caches)
                logits = self._lin(self._ln(x, "tt.final_ln"), "tt.out").data[:, 0]
                nxt = np.argmax(logits, axis=1)
                for b in range(B):
                    if not done[b]:
                        seqs[b].append(int(nxt[b]))
                        done[b] = nxt[b] == eos
                if done.all():
                    break
                cur = nxt[:, None]
        results = []
        for b in range(B):
            r = split_consecutive(seqs[b], asr, st, eos)
            T = int(enc.frame_lengths[b])
            r.ctc_labels = ctc_greedy_decode(enc.ctc_log_probs.data[b, :T])[1]
            r.shrink_length = int(enc.memory_lengths[b]) if enc.shrink is not None else T
            results.append(r)
        return results


def _key_mask(lengths: np.ndarray, n_query: int, n_key: int) -> np.ndarray:
    keys = np.arange(n_key)[None, :] < np.asarray(lengths)[:, None]
    return np.broadcast_to(keys[:, None, :], (len(lengths), n_query, n_key))

