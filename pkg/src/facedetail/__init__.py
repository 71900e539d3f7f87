"""Face image decomposition into shape, light and texture, facial-detail
extraction, synthetic lighting-mismatched forgeries and a linear detector."""
from .detail import Variant, attention_target, compose_all, facial_detail, uv_warp
from .fitting import Decomposition, TextureModel, analysis_by_synthesis_oracle, decompose
from .geometry import Camera, TriMesh
from .sh_lighting import LightingParams, sh_basis
from .synth import ForgeryConfig, build_model, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "Camera", "Decomposition", "ForgeryConfig", "LightingParams", "TextureModel", "TriMesh",
    "Variant", "analysis_by_synthesis_oracle", "attention_target", "build_model",
    "compose_all", "decompose", "facial_detail", "generate_dataset", "sh_basis", "uv_warp",
]
