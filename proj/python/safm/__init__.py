"""Desk-scale continual learning with sparse adapter fusion."""

import os
import sys

_core_dir = os.environ.get("SAFM_CORE_DIR")
if _core_dir and _core_dir not in sys.path:
    sys.path.insert(0, _core_dir)

try:
    from . import _core
except ImportError:  # development tree: extension built out of package
    import _core

ModelConfig = _core.ModelConfig
adapter_param_count = _core.adapter_param_count
aggregate_report = _core.aggregate_report
backbone_param_count = _core.backbone_param_count
bwt = _core.bwt
default_config_json = _core.default_config_json
default_no_as_layers = _core.default_no_as_layers
encode_sample = _core.encode_sample
init_lambda = _core.init_lambda
make_stream = _core.make_stream
materialize_task = _core.materialize_task
run_experiment = _core.run_experiment
run_seed = _core.run_seed
score = _core.score

__all__ = [
    "ModelConfig",
    "adapter_param_count",
    "aggregate_report",
    "backbone_param_count",
    "bwt",
    "default_config_json",
    "default_no_as_layers",
    "encode_sample",
    "init_lambda",
    "make_stream",
    "materialize_task",
    "run_experiment",
    "run_seed",
    "score",
]
