"""Second-order classification head for transformers.

Multi-head cross-covariance pooling with singular-value power normalization,
the four class-token/word-token fusion schemes, baseline poolings and
normalizers, and a small numpy transformer to train them end to end.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateDirectionError,
    DivergenceError,
    DomainError,
    NearSingularError,
    NumericError,
    ShapeError,
    SotError,
)
from .linalg import EigFactors, SvdFactors, eigh_spd, frobenius_norm, matmul, svd
from .normalization import (
    AdaptiveScaleParam,
    SingularTriple,
    SvpnConfig,
    adaptive_scale,
    deflate,
    epn,
    layer_norm_matrix,
    mpn,
    power_iterate,
    svpn_approx,
    svpn_exact,
    svpn_exact_backward,
)
from .pooling import GcrpHeadParams, MgcrpParams, TokenBatch, gap, gcp, gcrp, mgcrp
from .head import HeadOutput, HeadParams, cross_entropy, head_backward, head_forward
