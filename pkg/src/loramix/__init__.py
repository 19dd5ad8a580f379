"""Multi-adapter composition for a miniature rectified-flow transformer.

Subject priors are read off cross-attention early in denoising, and the
residual outputs of several low-rank adapters are blended into disjoint
regions of the latent grid.
"""
from .adapters import (AdapterBundle, LoRADelta, adapter_forward, load_adapter, merge_weights, random_bundle,
                       save_adapter, zero_bundle)
from .blending import (BlendConfig, BlendTrace, BlendWeights, alpha_weights, blend_residual, blended_denoise,
                       edit_image)
from .errors import (CompatibilityError, ContractError, FormatError, ParameterError, PreconditionError,
                     ShapeError)
from .mmdit import (Model, ModelConfig, TokenState, flow_denoise, flow_invert, forward_pass, init_model,
                    load_checkpoint, noise_latent, save_checkpoint, synthetic_prompt, velocity, zero_model)
from .priors import (PriorParams, SubjectSpec, argmax_partition, attention_map, binarize, extract_priors,
                     homogeneous_blob)

__version__ = "0.1.0"
