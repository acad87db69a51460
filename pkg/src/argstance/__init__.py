"""Few-shot claim/argument and stance classification toolkit.

Builds sentence-level classifiers for argumentative text from small labeled
datasets: context-aware input construction, bias-removal preprocessing,
bottleneck adapters on a frozen backbone, prompt-based (pattern/verbalizer)
classification heads, and an experiment harness that measures validity,
reliability, replicability, reproducibility, and feasibility.
"""

from .corpus import (
    AlphaResult,
    DatasetError,
    Label,
    LabeledDataset,
    NearDomainExample,
    NearDomainStance,
    ReliabilityMatrix,
    SentenceUnit,
    Split,
    aggregate_majority,
    downsample_no_stance,
    krippendorff_alpha,
    load_dataset,
    load_near_domain,
    load_reliability_csv,
    save_dataset,
    split_dataset,
)
from .encoding import (
    ConfigError,
    EncodedInput,
    PatternVerbalizerPair,
    WhitespaceTokenizer,
    build_pet_input,
    build_sam_input,
    build_standard_input,
    elaborate_pvp,
    naive_pvp,
    tokenizer_from_units,
    verbalize,
)
from .evaluation import (
    Confusion,
    MetricsTable,
    RunReport,
    aggregate_runs,
    collapse_stance,
    confusion,
    error_breakdown,
    metrics,
)
from .model import (
    Adapter,
    AdapterConfig,
    MiniBackbone,
    ModelAssembly,
    ParameterReport,
    PetHead,
    StandardHead,
    assemble,
    count_parameters,
    deserialize_trainable,
    serialize_trainable,
    stack_adapters,
)
from .preprocess import (
    DictionaryRecognizer,
    FewShotPlan,
    PersonSpan,
    sample_stratified,
    sample_tfs,
    shuffle_persons,
    swap_onion,
)
from .training import (
    TrainConfig,
    TrainLog,
    default_config,
    derive_seed,
    lr_schedule,
    make_input_builder,
    predict_labels,
    pretrain_near_domain,
    train,
)

__version__ = "0.1.0"
