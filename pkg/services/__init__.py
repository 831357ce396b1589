"""
Core services
"""

from .checkpoint import checkpoint_service, CheckpointService
from .pipelines import pipeline_service, PipelineService

__all__ = ['checkpoint_service', 'CheckpointService', 'pipeline_service', 'PipelineService']
