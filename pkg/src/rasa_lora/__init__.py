"""Rank-sharing low-rank adaptation (RaSA) and LoRA as explicit matrix factorizations."""
from .adapters import (
    AdapterShape,
    BaseStack,
    LoRAAdapter,
    RaSAAdapter,
    assemble_delta,
    delta_rank_bound,
    forward,
    init_lora,
    init_rasa,
    load_adapter,
    merge,
    param_count,
    save_adapter,
)
from .errors import FormatError, NumericalError, RasaError, ShapeError
from .matrix import (
    SvdResult,
    frob_sq,
    make_rng,
    rand_matrix,
    read_matrix,
    svd,
    truncated_approx,
    write_matrix,
)
from .reconstruction import (
    RasaFactors,
    ReconstructionTrace,
    TargetSet,
    coordinate_descent,
    lora_mre,
    rasa_objective,
    sweep_k,
    theorem1_solution,
)

__version__ = "0.1.0"
