from .base import FRAME_HEIGHT, FRAME_WIDTH, Env, EnvConfigError, EnvStateError, EnvStep
from .games import BlinkingChase, BlinkingChaseConfig, Corridor, DodgeLanes, ENVIRONMENTS, make_env
from .pipeline import AtariPipeline, FrameStack, frame_stack, max_and_skip, noop_start, to_grayscale_resize

__all__ = [
    "AtariPipeline",
    "BlinkingChase",
    "BlinkingChaseConfig",
    "Corridor",
    "DodgeLanes",
    "ENVIRONMENTS",
    "Env",
    "EnvConfigError",
    "EnvStateError",
    "EnvStep",
    "FRAME_HEIGHT",
    "FRAME_WIDTH",
    "FrameStack",
    "frame_stack",
    "make_env",
    "max_and_skip",
    "noop_start",
    "to_grayscale_resize",
]
