"""High-resolution speaker diarization: frame-level embeddings, mixture
synthesis for training, spectral clustering, and DER scoring."""

from .clustering import (
    binarize_affinity,
    cluster_embeddings,
    cosine_affinity,
    estimate_speaker_count,
    laplacian_eigenvalues,
    spectral_cluster,
)
from .config import RunConfig, UserError, load_config
from .corpus import SpeakerCorpus, SyntheticVoice, make_voices, synthetic_corpus, synthetic_session
from .features import (
    FeatureConfig,
    MelExtractor,
    MelFeatureSequence,
    Waveform,
    extract_mel,
    frames_for_duration,
    load_wav,
    save_wav,
)
from .model import (
    COMPRESSION,
    EMBEDDING_HOP_S,
    AamSoftmaxHead,
    Enhancer,
    EnhancerBlock,
    FeatureMapExtractor,
    HeeModel,
    ModelConfig,
    PooledSpeakerModel,
    hee_from_checkpoint,
    load_checkpoint,
    majority_vote_positions,
    pooled_from_checkpoint,
    save_checkpoint,
    strip_head,
)
from .pipeline import (
    ConventionalDiarizer,
    DiarizationResult,
    Diarizer,
    EmbeddingTimeline,
    PipelineConfig,
    VoicedSegment,
    assemble_hypothesis,
    conventional_extract,
    refine_embeddings,
    segments_from_reference,
    slide_extract,
)
from .scoring import (
    DERResult,
    RttmRecord,
    compute_der,
    compute_der_framewise,
    dataset_stats,
    merge_intervals,
    parse_rttm,
    write_rttm,
)
from .synthesis import (
    MixturePlan,
    MixtureSample,
    MixtureSynthesizer,
    SynthesisConfig,
    block_shuffle,
    build_mixture,
    frame_labels,
    plan_mixture,
    sample_speaker_count,
    spec_augment,
)
from .training import TrainConfig, pretrain_backbone, train_hee

__version__ = "0.1.0"
