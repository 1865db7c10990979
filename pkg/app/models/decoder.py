"""
Toy Causal Attention Decoder
Learned-free multi-head decoder with intervention hooks on the last query row

Embeddings and projections are drawn from ModelConfig.seed; every pass is a
full recomputation (no key/value cache), so repeated calls with the same
sequence and hooks are bit-identical.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import DomainError, NumericError, SequenceLengthError
from app.schemas.config_schemas import LayerRange, ModelConfig


class Modality(str, Enum):
    """Segment a token belongs to."""

    IMAGE = "image"
    QUERY = "query"
    GENERATED = "generated"


_MODALITY_ORDER = {Modality.IMAGE: 0, Modality.QUERY: 1, Modality.GENERATED: 2}


@dataclass(frozen=True)
class TokenSequence:
    """Image prefix, then query tokens, then generated tokens."""

    ids: Tuple[int, ...]
    modality: Tuple[Modality, ...]

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.modality):
            raise DomainError(
                "ids and modality tags differ in length",
                ids=len(self.ids),
                modality=len(self.modality),
            )
        order = [_MODALITY_ORDER[m] for m in self.modality]
        if any(b < a for a, b in zip(order, order[1:])):
            raise DomainError("modality tags must run image -> query -> generated")
        if self.num_query < 1:
            raise DomainError("a sequence needs at least one query token")

    @classmethod
    def build(
        cls,
        image_ids: Sequence[int],
        query_ids: Sequence[int],
        generated_ids: Sequence[int] = (),
    ) -> "TokenSequence":
        ids = tuple(int(i) for i in (*image_ids, *query_ids, *generated_ids))
        modality = (
            (Modality.IMAGE,) * len(image_ids)
            + (Modality.QUERY,) * len(query_ids)
            + (Modality.GENERATED,) * len(generated_ids)
        )
        return cls(ids=ids, modality=modality)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_image(self) -> int:
        return self.modality.count(Modality.IMAGE)

    @property
    def num_query(self) -> int:
        return self.modality.count(Modality.QUERY)

    @property
    def num_generated(self) -> int:
        return self.modality.count(Modality.GENERATED)

    @property
    def prompt_length(self) -> int:
        return self.num_image + self.num_query

    @property
    def generated_ids(self) -> Tuple[int, ...]:
        return self.ids[self.prompt_length :]

    def append(self, token_id: int) -> "TokenSequence":
        return TokenSequence(
            ids=self.ids + (int(token_id),),
            modality=self.modality + (Modality.GENERATED,),
        )


class HookStage(str, Enum):
    """Where in the attention computation a hook edits the last row."""

    PRE_SOFTMAX = "pre_softmax"
    POST_SOFTMAX = "post_softmax"


# (layer, head, image-column segment) -> edited segment
RowTransform = Callable[[int, int, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class AttentionHook:
    """An edit of the last query row's image columns, gated to [start, end) layers."""

    name: str
    stage: HookStage
    transform: RowTransform
    layer_range: LayerRange
    enabled: bool = True

    def applies_to(self, layer: int) -> bool:
        start, end = self.layer_range
        return self.enabled and start <= layer < end


@dataclass(frozen=True)
class HookSet:
    """Ordered pre- and post-softmax hooks plus the row renormalization flag."""

    pre_softmax: Tuple[AttentionHook, ...] = ()
    post_softmax: Tuple[AttentionHook, ...] = ()
    row_renorm: bool = True

    @classmethod
    def empty(cls) -> "HookSet":
        return cls()

    @classmethod
    def from_hooks(cls, hooks: Iterable[AttentionHook], row_renorm: bool = True) -> "HookSet":
        return cls(row_renorm=row_renorm).with_hooks(*hooks)

    def with_hooks(self, *hooks: AttentionHook) -> "HookSet":
        hook_set = self
        for hook in hooks:
            hook_set = hook_set.with_hook(hook)
        return hook_set

    def with_hook(self, hook: AttentionHook) -> "HookSet":
        if hook.stage is HookStage.PRE_SOFTMAX:
            return HookSet(self.pre_softmax + (hook,), self.post_softmax, self.row_renorm)
        return HookSet(self.pre_softmax, self.post_softmax + (hook,), self.row_renorm)

    @property
    def is_empty(self) -> bool:
        return not any(h.enabled for h in (*self.pre_softmax, *self.post_softmax))

    def active(self, stage: HookStage, layer: int) -> Tuple[AttentionHook, ...]:
        hooks = self.pre_softmax if stage is HookStage.PRE_SOFTMAX else self.post_softmax
        return tuple(h for h in hooks if h.applies_to(layer))


@dataclass(frozen=True)
class ForwardResult:
    """Output of one full forward pass."""

    logits: np.ndarray  # (vocab_size,)
    attention: np.ndarray  # (L, H, N, N), post-softmax, after hooks
    scores: np.ndarray  # (L, H, N, N), pre-softmax, before hooks, future masked to -inf
    image_slots: int

    def final_image_mass(self) -> float:
        """Image mass of the final layer's head-mean last row."""
        row = self.attention[-1, :, -1, :].mean(axis=0)
        return image_mass(row, self.image_slots)


def softmax_row(scores: np.ndarray) -> np.ndarray:
    """
    Numerically stable softmax of a score vector.

    Raises:
        DomainError: empty vector
        NumericError: non-finite entries
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise DomainError("softmax of an empty vector")
    if not np.all(np.isfinite(scores)):
        raise NumericError("softmax input contains non-finite values")
    shifted = np.exp(scores - scores.max())
    return shifted / shifted.sum()


def image_mass(attn_row: np.ndarray, image_slots: int) -> float:
    """Attention mass of a row on its first image_slots columns."""
    attn_row = np.asarray(attn_row, dtype=np.float64)
    if image_slots > attn_row.shape[-1]:
        raise DomainError(
            "image_slots exceeds row length", image_slots=image_slots, length=attn_row.shape[-1]
        )
    return float(attn_row[:image_slots].sum())


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2, dtype=np.float64) / dim))
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: dim // 2])
    return table


class ToyDecoder:
    """
    Causal multi-head self-attention decoder without training.

    Subclasses plant additive score terms (score_terms) and may replace the
    output head (readout); both run upstream of every hook.
    """

    content_scale: float = 1.0
    position_scale: float = 0.1

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, dh = cfg.model_dim, cfg.head_dim
        L, H = cfg.num_layers, cfg.num_heads
        scale = 1.0 / math.sqrt(d)

        self.token_embedding = rng.normal(0.0, scale, (cfg.vocab_size, d))
        self.modality_embedding = rng.normal(0.0, scale, (len(Modality), d))
        self.position_embedding = self.position_scale * _sinusoidal_positions(cfg.max_seq_len, d)
        self.w_q = rng.normal(0.0, scale, (L, H, d, dh))
        self.w_k = rng.normal(0.0, scale, (L, H, d, dh))
        self.w_v = rng.normal(0.0, scale, (L, H, d, dh))
        self.w_o = rng.normal(0.0, scale, (L, d, d))

        for table in (
            self.token_embedding,
            self.modality_embedding,
            self.position_embedding,
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
        ):
            table.setflags(write=False)

    # ------------------------------------------------------------------
    # Extension points
    # ------------------------------------------------------------------

    def score_terms(self, layer: int, seq: TokenSequence) -> Optional[np.ndarray]:
        """Additive pre-softmax terms (H, N, N); None means no planting."""
        return None

    def readout(self, seq: TokenSequence, hidden: np.ndarray, attention: np.ndarray) -> np.ndarray:
        """Next-token logits from the final hidden state (tied embeddings)."""
        return self.token_embedding @ hidden[-1]

    # ------------------------------------------------------------------
    # Forward pass
    # ------------------------------------------------------------------

    def embed(self, seq: TokenSequence) -> np.ndarray:
        ids = np.asarray(seq.ids, dtype=np.int64)
        modality = np.asarray([_MODALITY_ORDER[m] for m in seq.modality], dtype=np.int64)
        return (
            self.token_embedding[ids]
            + self.modality_embedding[modality]
            + self.position_embedding[: len(seq)]
        )

    def _content_scores(self, layer: int, hidden: np.ndarray) -> np.ndarray:
        n = hidden.shape[0]
        if self.content_scale == 0.0:
            return np.zeros((self.cfg.num_heads, n, n))
        q = np.einsum("nd,hde->hne", hidden, self.w_q[layer])
        k = np.einsum("nd,hde->hne", hidden, self.w_k[layer])
        return self.content_scale * (q @ k.transpose(0, 2, 1)) / math.sqrt(self.cfg.head_dim)

    def _check_sequence(self, seq: TokenSequence) -> None:
        if len(seq) > self.cfg.max_seq_len:
            raise SequenceLengthError(
                "sequence exceeds max_seq_len", length=len(seq), max_seq_len=self.cfg.max_seq_len
            )
        if seq.num_image != self.cfg.image_slots:
            raise DomainError(
                "image token count must equal image_slots",
                image_tokens=seq.num_image,
                image_slots=self.cfg.image_slots,
            )
        if max(seq.ids) >= self.cfg.vocab_size or min(seq.ids) < 0:
            raise DomainError("token id outside vocabulary", vocab_size=self.cfg.vocab_size)

    def _hook_last_rows(
        self,
        layer: int,
        masked_scores: np.ndarray,
        attn: np.ndarray,
        hooks: HookSet,
    ) -> np.ndarray:
        n_img = self.cfg.image_slots
        pre = hooks.active(HookStage.PRE_SOFTMAX, layer)
        post = hooks.active(HookStage.POST_SOFTMAX, layer)

        for head in range(attn.shape[0]):
            if pre:
                row = masked_scores[head, -1].copy()
                original = row[:n_img].copy()
                segment = original
                for hook in pre:
                    segment = np.asarray(hook.transform(layer, head, segment), dtype=np.float64)
                if not np.array_equal(segment, original):
                    row[:n_img] = segment
                    attn[head, -1] = _softmax(row)

            if post:
                row = attn[head, -1].copy()
                original = row[:n_img].copy()
                segment = original
                for hook in post:
                    segment = np.asarray(hook.transform(layer, head, segment), dtype=np.float64)
                if not np.array_equal(segment, original):
                    row[:n_img] = segment
                    if hooks.row_renorm:
                        row = row / row.sum()
                    attn[head, -1] = row
        return attn

    def forward_full(
        self,
        seq: TokenSequence,
        hooks: Optional[HookSet] = None,
        attention_override: Optional[Mapping[int, np.ndarray]] = None,
    ) -> ForwardResult:
        """
        Run the full decoder over seq.

        Args:
            seq: Token sequence (image prefix, query, generated)
            hooks: Last-row interventions; None or empty is the baseline pass
            attention_override: Per-layer (H, N, N) attention replacing the
                computed one (used for finite-difference gradients)

        Returns:
            ForwardResult with logits, post-hook attention and raw scores

        Raises:
            SequenceLengthError: sequence longer than max_seq_len
            NumericError: non-finite value, with layer/head location
        """
        self._check_sequence(seq)
        hooks = hooks or HookSet.empty()
        cfg = self.cfg
        n = len(seq)
        causal = np.tril(np.ones((n, n), dtype=bool))

        hidden = self.embed(seq)
        attention = np.empty((cfg.num_layers, cfg.num_heads, n, n))
        raw_scores = np.empty_like(attention)

        for layer in range(cfg.num_layers):
            scores = self._content_scores(layer, hidden)
            planted = self.score_terms(layer, seq)
            if planted is not None:
                scores = scores + planted
            masked = np.where(causal, scores, -np.inf)
            raw_scores[layer] = masked

            if attention_override is not None and layer in attention_override:
                attn = np.array(attention_override[layer], dtype=np.float64)
            else:
                attn = _softmax(masked)
                if not hooks.is_empty:
                    attn = self._hook_last_rows(layer, masked, attn, hooks)

            for head in range(cfg.num_heads):
                if not np.all(np.isfinite(attn[head])):
                    raise NumericError("non-finite attention", layer=layer, head=head)
            attention[layer] = attn

            values = np.einsum("nd,hde->hne", hidden, self.w_v[layer])
            heads_out = attn @ values  # (H, N, dh)
            merged = heads_out.transpose(1, 0, 2).reshape(n, cfg.model_dim)
            hidden = hidden + merged @ self.w_o[layer]
            if not np.all(np.isfinite(hidden)):
                raise NumericError("non-finite hidden state", layer=layer)

        logits = np.asarray(self.readout(seq, hidden, attention), dtype=np.float64)
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite logits", layer=cfg.num_layers - 1)

        return ForwardResult(
            logits=logits,
            attention=attention,
            scores=raw_scores,
            image_slots=cfg.image_slots,
        )
