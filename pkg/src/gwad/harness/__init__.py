"""Experiment configuration, orchestration, reports and the command line."""
from .config import ConfigError, ExperimentConfig, load_config
from .pipeline import (PipelineError, ablation_window, evaluate_stream, injection_sweep,
                       run_pipeline)
from .report import emit_report, make_report
