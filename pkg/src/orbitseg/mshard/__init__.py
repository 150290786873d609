from .model import (
    ABLATION_FROZEN,
    AttentionBlock,
    CrossScaleFusion,
    DecoderOutput,
    MSHARD,
    ModelConfig,
    PromptSet,
    RefineBlock,
    ShapeError,
    attend,
    fuse_backward,
    fuse_forward,
    fuse_levels,
    init_params,
    refine,
    sample_prompts,
)
