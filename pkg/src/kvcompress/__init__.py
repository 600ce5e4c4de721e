"""Post-training KV-cache compression toolkit.

Keys are compressed by similarity-aware head reordering plus grouped
low-rank SVD; Values by whole-matrix SVD with offline least-squares
calibration and fusion of the right factor into the output projection.
A small numpy attention engine executes prefill/decode against the
compressed latent cache and checks the equivalence properties.
"""

from .cka import SimilarityMatrix, cka_similarity, head_similarity
from .engine import (
    LatentCache,
    ToyModel,
    attention_compressed,
    attention_reference,
    collect_activations,
    compression_ratio,
    fidelity_report,
    random_toy_model,
)
from .errors import NumericError, ValidationError
from .headgroup import HeadGrouping, greedy_group, identity_grouping, permute_heads, unpermute_outputs
from .keycomp import CompressedKey, compress_key, key_latents, reconstruct_keys
from .latentquant import QuantizedLatent, dequantize_token, hadamard, quantize_token
from .linalg import LowRankPair, SvdFactors, ridge_solve, svd, truncate, whiten_factor, whitened_truncate
from .rankalloc import FisherScores, RankAllocation, allocate, fisher_scores
from .tensorio import (
    CalibrationSet,
    LayerWeights,
    ModelSpec,
    load_calibration,
    load_compressed,
    load_model,
    save_calibration,
    save_compressed,
    save_model,
)
from .valuecomp import (
    CompressedValue,
    activation_error,
    calibrate,
    compress_value,
    fuse,
    svd_value,
)

__version__ = "0.1.0"
