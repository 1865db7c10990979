"""
Synthetic World Service
Vocabulary and prior construction, scene sampling, planted decoders, labels
"""

import hashlib
import json
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Set

import numpy as np

from app.core.exceptions import DomainError
from app.core.logging import get_logger
from app.models.decoder import TokenSequence
from app.models.planted_decoder import PlantedDecoder
from app.models.world_models import (
    BOS,
    EOS,
    GRAY,
    NULL,
    REFERENCE_QUERY,
    SCENE_QUERY,
    SEP,
    ObjectVocabulary,
    Scene,
    TokenLabel,
)
from app.schemas.config_schemas import (
    ImageKind,
    ModelConfig,
    PlantedBias,
    ReadoutConfig,
    ReferenceSpec,
    RunConfig,
    WorldConfig,
)

logger = get_logger(__name__)

_FUNCTION_TOKENS = frozenset({BOS, EOS, SEP})


@dataclass(frozen=True)
class World:
    """Everything a run needs that is fixed by the configuration."""

    config: RunConfig
    vocab: ObjectVocabulary
    model_config: ModelConfig
    decoder: PlantedDecoder
    fingerprint: str

    def scene(self, seed: int) -> Scene:
        return WorldService.sample_scene(
            self.vocab,
            self.config.world.objects_per_scene,
            self.model_config.image_slots,
            seed,
            max_slots_per_object=self.config.world.max_slots_per_object,
            neighbor_exclusion=self.config.world.neighbor_exclusion,
        )

    def prompt(self, scene: Scene) -> TokenSequence:
        return WorldService.scene_prompt(scene)


class WorldService:
    """Service for the planted-bias synthetic world."""

    @staticmethod
    def build_vocabulary(world: WorldConfig) -> ObjectVocabulary:
        """
        Build the object vocabulary and its co-occurrence prior table.

        Each object gets a random strongest neighbor holding neighbor_weight of
        its prior row; the rest is a sparse Dirichlet draw over the other objects.

        Args:
            world: World configuration

        Returns:
            ObjectVocabulary with a row-stochastic, zero-diagonal prior
        """
        rng = np.random.default_rng(world.seed)
        k = world.num_objects
        w = world.neighbor_weight
        prior = np.empty((k, k))
        neighbors: List[int] = []

        for i in range(k):
            row = np.insert(rng.dirichlet(np.full(k - 1, world.prior_concentration)), i, 0.0)
            neighbor = int(rng.integers(k - 1))
            if neighbor >= i:
                neighbor += 1
            row = (1.0 - w) * row
            row[neighbor] += w
            prior[i] = row / row.sum()
            neighbors.append(int(np.argmax(prior[i])))

        return ObjectVocabulary(num_objects=k, prior=prior, neighbors=tuple(neighbors))

    @staticmethod
    def sample_scene(
        vocab: ObjectVocabulary,
        k: int,
        n_slots: int,
        seed: int,
        max_slots_per_object: int = 3,
        neighbor_exclusion: float = 0.5,
    ) -> Scene:
        """
        Sample a scene: k present objects laid out over n_slots image slots.

        Every chosen object keeps its strongest prior neighbor out of the scene
        with probability neighbor_exclusion.

        Raises:
            DomainError: k outside [1, min(K, n_slots)]
        """
        if not 1 <= k <= min(vocab.num_objects, n_slots):
            raise DomainError(
                "objects_per_scene out of range",
                k=k,
                num_objects=vocab.num_objects,
                image_slots=n_slots,
            )

        rng = np.random.default_rng(seed)
        chosen: List[int] = []
        excluded: Set[int] = set()
        deferred: List[int] = []

        for index in rng.permutation(vocab.num_objects):
            index = int(index)
            if len(chosen) == k:
                break
            if index in excluded:
                deferred.append(index)
                continue
            chosen.append(index)
            neighbor = vocab.neighbors[index]
            if neighbor not in chosen and rng.random() < neighbor_exclusion:
                excluded.add(neighbor)

        # exclusions never make a scene smaller than k
        for index in deferred:
            if len(chosen) == k:
                break
            chosen.append(index)

        counts = [1] * k
        free = n_slots - k
        for j in range(k):
            extra = min(int(rng.integers(0, max_slots_per_object)), free)
            counts[j] += extra
            free -= extra

        positions = rng.permutation(n_slots)
        layout = [NULL] * n_slots
        cursor = 0
        for index, count in zip(chosen, counts):
            for _ in range(count):
                layout[int(positions[cursor])] = vocab.object_token(index)
                cursor += 1

        scene = Scene(
            seed=seed,
            present=tuple(sorted(vocab.object_token(i) for i in chosen)),
            layout=tuple(layout),
            excluded=tuple(sorted(vocab.object_token(i) for i in excluded - set(chosen))),
        )
        logger.debug(
            "scene_sampled", seed=seed, present=list(scene.present), nulls=scene.null_slots
        )
        return scene

    @staticmethod
    def scene_prompt(scene: Scene) -> TokenSequence:
        """Image layout followed by the scene query."""
        return TokenSequence.build(scene.layout, SCENE_QUERY)

    @staticmethod
    def reference_sequence(
        ref: ReferenceSpec, vocab: ObjectVocabulary, n_slots: int
    ) -> TokenSequence:
        """
        Build the meaningless-image reference input for calibration capture.

        Raises:
            DomainError: row window larger than the query, or unknown query ids
        """
        query = tuple(ref.query_ids) if ref.query_ids is not None else REFERENCE_QUERY
        if not query:
            raise DomainError("reference query must not be empty")
        if ref.row_window > len(query):
            raise DomainError(
                "row_window must not exceed the query length",
                row_window=ref.row_window,
                query_length=len(query),
            )
        if any(not vocab.is_known(t) for t in query):
            raise DomainError("reference query contains unknown token ids")

        if ref.image_kind is ImageKind.BLACK:
            image = [NULL] * n_slots
        elif ref.image_kind is ImageKind.UNIFORM:
            image = [GRAY] * n_slots
        else:
            rng = np.random.default_rng(ref.noise_seed)
            tokens = np.asarray(vocab.object_tokens)
            image = [int(t) for t in rng.choice(tokens, size=n_slots)]
        return TokenSequence.build(image, query)

    @staticmethod
    def build_planted_decoder(
        cfg: ModelConfig,
        bias: PlantedBias,
        vocab: ObjectVocabulary,
        readout: Optional[ReadoutConfig] = None,
    ) -> PlantedDecoder:
        """Instantiate the planted decoder; biases enter at the score stage."""
        return PlantedDecoder(cfg, bias, vocab, readout or ReadoutConfig())

    @staticmethod
    def build_world(config: RunConfig) -> World:
        """Vocabulary, model config and planted decoder for a run configuration."""
        vocab = WorldService.build_vocabulary(config.world)
        model_config = config.build_model_config(vocab.vocab_size)
        decoder = WorldService.build_planted_decoder(
            model_config, config.bias, vocab, config.world.readout
        )
        fingerprint = WorldService.fingerprint(model_config, config.world, config.bias)
        floor = decoder.lowest_image_score(config.generation.max_new_tokens)
        if floor <= 0.0:
            logger.warning(
                "image_scores_turn_negative",
                lowest_score=round(floor, 4),
                max_new_tokens=config.generation.max_new_tokens,
            )
        logger.info(
            "world_built",
            vocab_size=vocab.vocab_size,
            layers=model_config.num_layers,
            heads=model_config.num_heads,
            sinks=list(decoder.sink_positions),
            fingerprint=fingerprint[:12],
        )
        return World(
            config=config,
            vocab=vocab,
            model_config=model_config,
            decoder=decoder,
            fingerprint=fingerprint,
        )

    @staticmethod
    def label_tokens(
        tokens: Sequence[int], scene: Scene, vocab: ObjectVocabulary
    ) -> List[TokenLabel]:
        """
        Label generated tokens against the scene's ground truth.

        Raises:
            DomainError: token id outside the vocabulary or not a generable token
        """
        labels: List[TokenLabel] = []
        for token in tokens:
            if token in _FUNCTION_TOKENS:
                labels.append(TokenLabel.FUNCTION)
            elif vocab.is_object(token):
                labels.append(
                    TokenLabel.TRUTHFUL if scene.is_present(token) else TokenLabel.HALLUCINATORY
                )
            else:
                raise DomainError("token cannot be labeled", token=token)
        return labels

    @staticmethod
    def fingerprint(model: ModelConfig, world: WorldConfig, bias: PlantedBias) -> str:
        """sha256 over the canonical JSON of the model, world and bias sections."""
        payload: Dict[str, Any] = {
            "model": model.model_dump(mode="json"),
            "world": world.model_dump(mode="json"),
            "bias": bias.model_dump(mode="json"),
        }
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    @staticmethod
    def suite_fingerprint(scenes: Sequence[Scene]) -> str:
        """sha256 over the layouts of a seed suite, in seed order."""
        canonical = json.dumps(
            [[s.seed, list(s.layout)] for s in scenes], separators=(",", ":")
        )
        return hashlib.sha256(canonical.encode()).hexdigest()
