"""fedpriv: desk-scale privacy-preserving federated learning simulator."""

from .aggregation import (
    AggregatorConfig,
    AnomalyReport,
    WeightVector,
    anomaly_scores,
    compute_weights,
    fedavg,
    krum_select,
    robust_aggregate,
    staleness_discount,
    weighted_aggregate,
)
from .comms import (
    CommsConfig,
    EncodedBlob,
    LinkModel,
    SparseUpdate,
    TrafficLedger,
    delta_decode,
    delta_encode,
    dequantize,
    entropy_decode,
    entropy_encode,
    quantize,
    topk_sparsify,
    transmit,
)
from .config import ConfigError, ExperimentConfig, default_config, load_config
from .data import PartitionSpec, SyntheticSpec, gen_synthetic, load_idx, partition
from .model import (
    ClientUpdate,
    Dataset,
    EncoderConfig,
    ParamVector,
    evaluate,
    forward_encode,
    init_params,
    local_train,
)
from .privacy import (
    NoiseSpec,
    PrivacyLedger,
    PULConfig,
    add_gaussian_noise,
    calibrate_sigma,
    per_client_budget,
    per_round_budget,
    pul_search,
)
from .secure_agg import (
    ShareSet,
    decode_fixed,
    encode_fixed,
    reconstruct,
    secure_aggregate,
    split_shares,
)
from .simulation import (
    AttackSpec,
    RoundPlan,
    RoundReport,
    Topology,
    defense_rate,
    inject_attack,
    measure_latency,
    run_experiment,
    run_round,
)

__version__ = "0.1.0"
