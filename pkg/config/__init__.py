"""
Configuration management
"""

from .config import config_service, ConfigService, RunConfig, StageConfig, SyntheticConfig

__all__ = ['config_service', 'ConfigService', 'RunConfig', 'StageConfig', 'SyntheticConfig']
