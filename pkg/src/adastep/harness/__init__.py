from .checkpoint import Checkpoint, CheckpointError, dumps_checkpoint, load_checkpoint, loads_checkpoint, save_checkpoint
from .config import RunConfig, config_digest, dump_config, from_dict, load_config, to_dict
from .evaluation import (EvalReport, EvalRow, Evaluator, PolicyAnalysis, SweepPoint, analyze_policy,
                         run_adaptive, run_fixed_baseline, run_matched_random, run_random_baseline, sweep,
                         transfer_eval)
from .pipeline import Lab
