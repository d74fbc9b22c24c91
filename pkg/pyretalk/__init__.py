name = "pyretalk"

from .config import PipelineConfig
from .pyretalk import Retalk

__all__ = ['Retalk', 'PipelineConfig']
