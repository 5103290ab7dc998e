"""Spatiotemporal predictive learning for MIMO channel-state forecasting."""
from .autodiff import backend
from .data import ScenarioConfig, build_dataset, generate_synthetic
from .evaluation import evaluate_model, nmae, nmse, run_ablation
from .network import VariantSpec, build_model, count_flops, count_params, rollout, table_variants
from .training import MetaConfig, meta_step, meta_train, supervised_train

__version__ = "0.1.0"

__all__ = [
    "MetaConfig", "ScenarioConfig", "VariantSpec", "backend", "build_dataset", "build_model",
    "count_flops", "count_params", "evaluate_model", "generate_synthetic", "meta_step", "meta_train",
    "nmae", "nmse", "rollout", "run_ablation", "supervised_train", "table_variants",
]
