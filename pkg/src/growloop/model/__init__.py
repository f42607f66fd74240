from .attention import attention_residual, head_forward, rmsnorm
from .config import ConfigError, ModelConfig, desk_config
from .params import ParamStore, head_names, init_parameters
from .rotary import rotary_tables
from .transformer import block_forward, ffn_residual, model_forward

__all__ = [
    "ConfigError",
    "ModelConfig",
    "ParamStore",
    "attention_residual",
    "block_forward",
    "desk_config",
    "ffn_residual",
    "head_forward",
    "head_names",
    "init_parameters",
    "model_forward",
    "rotary_tables",
]
