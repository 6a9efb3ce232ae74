"""Two-stage visual place recognition at desk scale.

Pipeline: siamese masked-image pre-training with place-aware pair sampling,
joint global-descriptor + pair-classifier fine-tuning, then retrieval by
kNN over descriptors followed by pair-classifier re-ranking.
"""

from .backbone import BackboneConfig, PairBackbone, tiny_config, vit_b_config

__all__ = ["BackboneConfig", "PairBackbone", "tiny_config", "vit_b_config"]
__version__ = "0.1.0"
