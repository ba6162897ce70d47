"""Cross-attention maps over prompt tokens and their manual backward pass.

Matrices follow the row-vector convention: pixel features ``F`` are
``(H, W, d_f)``, queries are ``F @ W_Q`` and keys ``E @ W_K`` for the token
embedding table ``E`` of shape ``(N, d_k)``.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

__all__ = [
    "BACKGROUND_TOKEN",
    "TokenSequence",
    "AttnMaps",
    "AttnProjection",
    "compute_attention",
    "attention_logits",
    "attention_vjp",
    "softmax_vjp",
    "tokenize",
]

BACKGROUND_TOKEN = "<bos>"
_WORD = re.compile(r"[a-z0-9]+")


def tokenize(prompt: str) -> list[str]:
    """Lower-cased word tokens with the background token prepended."""
    return [BACKGROUND_TOKEN] + _WORD.findall(prompt.lower())


def _token_seed(token: str) -> int:
    return int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")


def _embedding(token: str, dim: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(_token_seed(token)))
    return rng.standard_normal(dim) / np.sqrt(dim)


@dataclass(frozen=True, eq=False)
class TokenSequence:
    tokens: tuple[str, ...]
    embeddings: np.ndarray = field(repr=False)
    object_token_indices: tuple[int, ...] = ()

    def __post_init__(self):
        tokens = tuple(self.tokens)
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if not tokens:
            raise ValueError("token sequence must hold at least the background token")
        if emb.ndim != 2 or emb.shape[0] != len(tokens):
            raise ValueError(f"embeddings must be (N, d_k) with N={len(tokens)}, got {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise ValueError("token embeddings must be finite")
        objs = tuple(int(j) for j in self.object_token_indices)
        if any(not 1 <= j < len(tokens) for j in objs):
            raise ValueError(f"object token indices {objs} outside 1..{len(tokens) - 1}")
        emb = emb.copy()
        emb.setflags(write=False)
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "object_token_indices", objs)

    @classmethod
    def from_prompt(cls, prompt: str, dim: int = 8, objects=()) -> "TokenSequence":
        """Tokenize ``prompt`` and embed each token from a hash-seeded table.

        ``objects`` lists object words; each is bound to its first unused
        occurrence in the prompt (a trailing plural ``s`` is tolerated).
        """
        tokens = tokenize(prompt)
        emb = np.stack([_embedding(tok, dim) for tok in tokens])
        seq = cls(tuple(tokens), emb)
        idx = []
        for obj in objects:
            idx.append(seq.find(obj, exclude=idx))
        return cls(seq.tokens, emb, tuple(idx))

    def find(self, word: str, exclude=()) -> int:
        word = word.lower().strip()
        candidates = {word, word.rstrip("s"), word + "s"}
        for j, tok in enumerate(self.tokens[1:], start=1):
            if j not in exclude and (tok in candidates or tok.rstrip("s") in candidates):
                return j
        raise ValueError(f"object {word!r} does not occur in the prompt tokens {self.tokens[1:]}")

    def with_objects(self, indices) -> "TokenSequence":
        return TokenSequence(self.tokens, self.embeddings, tuple(indices))

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(_token_seed(t) & 0x7FFFFFFF for t in self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True, eq=False)
class AttnMaps:
    """Per-pixel distributions over tokens, shape ``(H, W, N)``."""

    maps: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.maps, dtype=np.float64)
        if m.ndim != 3:
            raise ValueError(f"attention maps must be (H, W, N), got shape {m.shape}")
        object.__setattr__(self, "maps", m)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.maps.shape[:2]

    @property
    def n_tokens(self) -> int:
        return self.maps.shape[2]

    def token(self, j: int) -> np.ndarray:
        return self.maps[:, :, j]

    def check(self, atol: float = 1e-6) -> None:
        m = self.maps
        if not np.all(np.isfinite(m)):
            raise FloatingPointError("attention maps contain non-finite values")
        if np.any(m < -atol) or np.any(m > 1 + atol):
            raise ValueError("attention entries must lie in [0, 1]")
        err = np.abs(m.sum(axis=-1) - 1.0).max()
        if err > atol:
            raise ValueError(f"attention rows do not sum to 1 (max error {err:.3g})")


@dataclass(frozen=True, eq=False)
class AttnProjection:
    W_Q: np.ndarray
    W_K: np.ndarray

    def __post_init__(self):
        wq = np.asarray(self.W_Q, dtype=np.float64)
        wk = np.asarray(self.W_K, dtype=np.float64)
        if wq.ndim != 2 or wk.ndim != 2 or wk.shape[0] != wk.shape[1] or wq.shape[1] != wk.shape[1]:
            raise ValueError(f"need W_Q (d_f, d_k) and W_K (d_k, d_k); got {wq.shape} and {wk.shape}")
        if not (np.all(np.isfinite(wq)) and np.all(np.isfinite(wk))):
            raise ValueError("projection matrices must be finite")
        object.__setattr__(self, "W_Q", wq)
        object.__setattr__(self, "W_K", wk)

    @property
    def d_k(self) -> int:
        return self.W_K.shape[0]

    @property
    def d_f(self) -> int:
        return self.W_Q.shape[0]


def attention_logits(features, tokens: TokenSequence, proj: AttnProjection, bias=None) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[-1] != proj.d_f:
        raise ValueError(f"features must be (H, W, {proj.d_f}), got {features.shape}")
    if tokens.dim != proj.d_k:
        raise ValueError(f"token embedding dim {tokens.dim} != d_k {proj.d_k}")
    q = features @ proj.W_Q
    k = tokens.embeddings @ proj.W_K
    logits = q @ k.T / np.sqrt(proj.d_k)
    if bias is not None:
        logits = logits + bias
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite attention logits")
    return logits


def compute_attention(features, tokens: TokenSequence, proj: AttnProjection, bias=None) -> AttnMaps:
    """Softmax over tokens of ``Q K^T / sqrt(d_k)`` (plus an optional logit bias)."""
    return AttnMaps(softmax(attention_logits(features, tokens, proj, bias), axis=-1))


def softmax_vjp(probs: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Pull a cotangent back through a softmax over the last axis."""
    return probs * (cotangent - np.sum(probs * cotangent, axis=-1, keepdims=True))


def attention_vjp(features, tokens: TokenSequence, proj: AttnProjection, cotangent, bias=None) -> np.ndarray:
    """``v^T dA/dF`` for the attention maps of :func:`compute_attention`."""
    attn = compute_attention(features, tokens, proj, bias).maps
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != attn.shape:
        raise ValueError(f"cotangent shape {cotangent.shape} != attention shape {attn.shape}")
    d_logits = softmax_vjp(attn, cotangent)
    k = tokens.embeddings @ proj.W_K
    d_q = d_logits @ k / np.sqrt(proj.d_k)
    return d_q @ proj.W_Q.T
