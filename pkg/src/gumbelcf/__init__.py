"""Counterfactual string generation for autoregressive language models.

Sampling is reformulated as a structural equation model over explicit
per-position, per-symbol Gumbel noise: generation is a deterministic argmax
of logits plus noise, so the noise behind an observed string can be inferred
in hindsight and replayed through an intervened model, yielding true string
counterfactuals plus side-effect metrics.
"""

__version__ = "0.1.0"

from .engine import (
    EngineError,
    Generation,
    NoiseRecord,
    generate,
    generate_many,
    generate_with_noise,
    sample_prior_noise,
)
from .gumbel import gumbel_log_cdf, sample_standard_gumbel, sample_truncated_gumbel
from .hindsight import (
    CounterfactualPair,
    ImpossibleObservation,
    counterfactual,
    infer_posterior_noise,
    joint_sample,
    paired_samples_many,
)
from .interventions import (
    Compose,
    InterventionSpec,
    LogitBias,
    Nucleus,
    RemoteConfig,
    SymbolClamp,
    TableEdit,
    Temperature,
    TopK,
    apply_intervention,
    compose,
    load_intervention,
    parse_intervention,
)
from .kernels import BACKEND as KERNEL_BACKEND
from .metrics import MetricBundle, aggregate_ratios, metric_report, normalized_lcp, token_log_ratio
from .models import (
    MASK_SENTINEL,
    ModelError,
    Provider,
    TableLm,
    Vocabulary,
    apply_nucleus,
    apply_temperature,
    apply_top_k,
    fit_table_lm,
    load_table_lm,
    save_table_lm,
)
from .oracle import (
    ExactDistribution,
    OracleError,
    check_counterfactual_stability,
    enumerate_distribution,
    inverse_cdf_counterfactual,
    tv_distance,
)
from .remote import ProviderServer, RemoteError, RemoteProvider

__all__ = [name for name in dir() if not name.startswith("_")]
