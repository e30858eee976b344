"""Stereochemistry-aware molecular representations built on determinant
kernels over chirality matrices, with distance-biased cross-attention and
a trainable classifier. All numerics are hand-rolled float64 numpy,
including every reverse-mode gradient."""

from .geometry import (
    AtomPartition,
    ChiralUnit,
    ChiralityMatrix,
    Configuration,
    Molecule,
    UnitKind,
    assign_configuration,
    chirality_matrix,
    chirality_product,
    mirror,
    order_substituents,
    partition_atoms,
    reference_point,
    transform,
    unit_products,
)
from .data import (
    FeatureScheme,
    SyntheticSpec,
    gen_axial,
    gen_axial_torsion,
    gen_rs,
    make_enantiomer,
    parse,
    read_manifest,
    toy_axial_molecule,
    write,
    write_dataset,
)
from .encoder import (
    EncodedMolecule,
    EncoderParams,
    KernelBank,
    RankStrategy,
    encode,
    kernel_forward,
    regularization_loss,
    retract_orthonormal,
)
from .attention import (
    DistanceBiasParams,
    LayerParams,
    PairBias,
    attend,
    distance_bias,
    init_pair_bias,
    pool,
)
from .model import (
    AdamState,
    ChiralModel,
    ModelConfig,
    TrainConfig,
    embed,
    evaluate,
    forward,
    init_model,
    load_checkpoint,
    loss_classify,
    loss_margin_rank,
    mirror_consistency,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
