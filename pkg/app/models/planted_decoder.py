"""
Planted-Bias Decoder
Toy decoder whose attention scores carry controllable sink and decay terms

Scores are planted rather than computed from hidden states:

    image column k:  image_score + c[l,h](id_k) + sink_strength * [k in S]
                     - decay * t + position_bias * k / (N_i - 1)
    text column j:   text_score + log_softmax over visible text of tau[l,h](id_j)

t is the number of generated tokens. Image scores are identical for every
query row and the total text mass of a row is constant, so without decay the
image share of any row does not depend on how long the generation is.

The output head mixes visual evidence with the co-occurrence prior, weighted
by the image mass m of the final layer's head-mean last row. Sink slots carry
no evidence while sinks are planted. The end-of-sequence logit is a language
term and is weighted by 1 - m like the prior, so moving attention onto the
image never favours stopping over mentioning what the image shows.
"""

from typing import Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from app.core.exceptions import ConfigError
from app.models.decoder import ToyDecoder, TokenSequence, image_mass
from app.models.world_models import EOS, SEP, ObjectVocabulary
from app.schemas.config_schemas import ModelConfig, PlantedBias, ReadoutConfig

# Offset mixed into the model seed for the planted tables
_TABLE_STREAM = 7919


class PlantedDecoder(ToyDecoder):
    """ToyDecoder with planted score terms and an evidence/prior output head."""

    content_scale = 0.0

    def __init__(
        self,
        cfg: ModelConfig,
        bias: PlantedBias,
        vocab: ObjectVocabulary,
        readout: ReadoutConfig,
    ):
        super().__init__(cfg)
        if cfg.vocab_size != vocab.vocab_size:
            raise ConfigError(
                "model vocab_size does not match the world vocabulary",
                vocab_size=cfg.vocab_size,
                expected=vocab.vocab_size,
            )

        self.bias = bias
        self.vocab = vocab
        self.readout_cfg = readout

        rng = np.random.default_rng([cfg.seed, _TABLE_STREAM])
        shape = (cfg.num_layers, cfg.num_heads, cfg.vocab_size)
        spread = readout.content_spread

        content = rng.uniform(-spread, spread, shape)
        object_mask = np.zeros(cfg.vocab_size, dtype=bool)
        object_mask[list(vocab.object_tokens)] = True
        content[:, :, ~object_mask] = 0.0  # null and gray slots share one score
        self.content_table = content
        self.text_table = rng.uniform(-spread, spread, shape)

        n_img = cfg.image_slots
        self.sink_positions: Tuple[int, ...] = tuple(
            bias.sink_positions
            if bias.sink_positions is not None
            else range(bias.sink_count(n_img))
        )
        sink_mask = np.zeros(n_img)
        sink_mask[list(self.sink_positions)] = 1.0
        self.sink_mask = sink_mask
        self.position_ramp = np.arange(n_img, dtype=np.float64) / max(1, n_img - 1)

        for table in (self.content_table, self.text_table, self.sink_mask, self.position_ramp):
            table.setflags(write=False)

    def image_scores(self, layer: int, seq: TokenSequence) -> np.ndarray:
        """Planted image-column scores (H, N_i); the same for every query row."""
        n_img = self.cfg.image_slots
        ids = np.asarray(seq.ids[:n_img], dtype=np.int64)
        t = seq.num_generated
        return (
            self.readout_cfg.image_score
            + self.content_table[layer][:, ids]
            + self.bias.sink_strength * self.sink_mask
            - self.bias.decay * t
            + self.bias.position_bias * self.position_ramp
        )

    def score_terms(self, layer: int, seq: TokenSequence) -> Optional[np.ndarray]:
        n = len(seq)
        n_img = self.cfg.image_slots
        heads = self.cfg.num_heads
        terms = np.zeros((heads, n, n))
        terms[:, :, :n_img] = self.image_scores(layer, seq)[:, None, :]

        text_ids = np.asarray(seq.ids[n_img:], dtype=np.int64)
        n_text = len(text_ids)
        tau = self.text_table[layer][:, text_ids]  # (H, n_text)
        visible = np.tril(np.ones((n_text, n_text), dtype=bool))
        masked = np.where(visible, tau[:, None, :], -np.inf)
        log_norm = logsumexp(masked, axis=-1, keepdims=True)
        text_block = self.readout_cfg.text_score + tau[:, None, :] - log_norm
        terms[:, n_img:, n_img:] = np.where(visible, text_block, 0.0)
        return terms

    def readout(self, seq: TokenSequence, hidden: np.ndarray, attention: np.ndarray) -> np.ndarray:
        r = self.readout_cfg
        vocab = self.vocab
        logits = np.full(self.cfg.vocab_size, r.mask_logit)
        generated = seq.generated_ids

        # every object mention closes its span
        if generated and vocab.is_object(generated[-1]):
            logits[SEP] = r.sep_logit
            return logits

        n_img = self.cfg.image_slots
        m = image_mass(attention[-1, :, -1, :].mean(axis=0), n_img)

        image_rows = attention[:, :, -1, :n_img].mean(axis=(0, 1))
        total = image_rows.sum()
        share = image_rows / total if total > 0.0 else np.zeros(n_img)

        unreadable = set(self.sink_positions) if self.bias.sink_strength > 0.0 else set()
        evidence = np.zeros(vocab.num_objects)
        for slot, token in enumerate(seq.ids[:n_img]):
            if slot not in unreadable and vocab.is_object(token):
                evidence[vocab.object_index(token)] += share[slot]

        mentioned = [vocab.object_index(tok) for tok in generated if vocab.is_object(tok)]
        prior_row = vocab.prior[mentioned[-1]] if mentioned else vocab.start_prior

        object_logits = (
            r.visual_gain * m * evidence
            + r.prior_gain * self.bias.prior_weight * (1.0 - m) * prior_row
        )
        object_logits[mentioned] -= r.repeat_penalty

        logits[vocab.object_tokens.start : vocab.object_tokens.stop] = object_logits
        logits[EOS] = (1.0 - m) * (r.eos_bias + r.eos_growth * seq.num_generated)
        return logits

    def lowest_image_score(self, max_new_tokens: int) -> float:
        """Smallest planted non-sink image score reachable within max_new_tokens."""
        r = self.readout_cfg
        floor = r.image_score - r.content_spread - self.bias.decay * max_new_tokens
        return floor + min(0.0, self.bias.position_bias)
