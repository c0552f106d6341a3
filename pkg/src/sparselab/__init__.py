"""Gradual magnitude pruning with zero-cost regrowth, DST baselines and plasticity probes."""
from .algorithms import (AlgorithmSpec, RunRecord, TrainConfig, Trainer, reinit_ablation,
                         rewind_retrain, train, train_dst, train_gmp, train_granet)
from .masks import PruneEvent, SparsityPlan
from .nn import LayerSpec, MaskedParam, Network
from .schedules import PruneSchedule, RegenSchedule

__version__ = "0.1.0"
