"""ugeforge: turn an image-classification dataset into bounded perturbations
that stay learnable for a designated authorized network while degrading
training on arbitrary ones, plus the evaluation harness that measures both."""

from .data import (
    Dataset,
    PerturbationBudget,
    SplitSpec,
    clamp_to_budget,
    export_uge_dataset,
    import_uge_dataset,
    load_dataset,
    make_blobs,
    split_dataset,
)
from .embedspace import (
    EmbeddingSpace,
    class_embed,
    fit_embedding_space,
    image_embed,
    least_similar_class,
)
from .genengine import GeneratorState, UGEConfig, generation_step, run_generation
from .losses import (
    LossWeights,
    feature_distance_loss,
    feature_push_loss,
    gradient_matching_loss,
    kd_divergence,
    multi_authorized_aggregate,
    total_loss,
    triplet_feature_loss,
    undistill_loss,
)
from .nets import (
    GeneratorSpec,
    NetworkSpec,
    ParameterView,
    build_generator,
    build_network,
    flat_param_gradient,
)
from .trajectory import (
    Trajectory,
    TrainRecipe,
    TrajectorySnapshot,
    record_trajectory,
    sample_snapshot,
)

__version__ = "0.1.0"
