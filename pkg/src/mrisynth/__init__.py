"""Unified many-to-one MR image synthesis from arbitrary subsets of input
sequences.

The package trains a single generator that maps any nonempty proper subset
of a subject's MR sequences to any missing one, using per-sequence encoders
plus a joint encoder, channel-attention fusion, and a transformer that
shifts the fused representation toward the requested target sequence.
"""

__version__ = "0.1.0"

from .data import (
    MultisequenceVolume,
    SlicePolicy,
    SliceRecord,
    generate_phantom_dataset,
    load_dataset,
    load_volume_set,
    save_volume_set,
)
from .errors import (
    ContractError,
    DataError,
    InsufficientDataError,
    MrisynthError,
    ParameterError,
    PriorError,
    TrainingDivergedError,
)
from .encoders import EncoderConfig, HybridEncoder
from .evaluation import (
    ScenarioTable,
    batched_model_synthesizer,
    enumerate_scenarios,
    evaluate_model,
    impute_dataset,
    latent_ablation_synthesis,
    export_latent_embeddings,
    mean_image_synthesizer,
)
from .fusion import ChannelAttentionFusion, SumFusion
from .infuser import InfuserConfig, ModalityInfuser
from .losses import LossWeights
from .metrics import SSIMParams, psnr, ssim, wilcoxon_signed_rank
from .networks import (
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    PatchDiscriminator,
    build_discriminator,
    build_generator,
)
from .training import (
    TrainConfig,
    Trainer,
    load_generator_for_inference,
    lr_schedule,
    sample_scenario_batch,
)

__all__ = [
    "__version__",
    "MultisequenceVolume", "SlicePolicy", "SliceRecord",
    "generate_phantom_dataset", "load_dataset", "load_volume_set",
    "save_volume_set",
    "MrisynthError", "DataError", "ParameterError", "ContractError",
    "PriorError", "InsufficientDataError", "TrainingDivergedError",
    "EncoderConfig", "HybridEncoder",
    "ChannelAttentionFusion", "SumFusion",
    "InfuserConfig", "ModalityInfuser",
    "GeneratorConfig", "Generator", "DiscriminatorConfig",
    "PatchDiscriminator", "build_generator", "build_discriminator",
    "LossWeights",
    "SSIMParams", "psnr", "ssim", "wilcoxon_signed_rank",
    "TrainConfig", "Trainer", "sample_scenario_batch", "lr_schedule",
    "load_generator_for_inference",
    "ScenarioTable", "enumerate_scenarios", "evaluate_model",
    "batched_model_synthesizer", "mean_image_synthesizer",
    "latent_ablation_synthesis", "export_latent_embeddings", "impute_dataset",
]
