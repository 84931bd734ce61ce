"""Diffusion transformer with learned, differentiable token-routing ratios."""

from ._memory import retain_freed_memory

retain_freed_memory()

from .checkpoint import load_checkpoint, load_estimator, save_checkpoint, save_estimator  # noqa: E402
from .config import RunConfig  # noqa: E402
from .data import ToyDataset  # noqa: E402
from .estimator import DiffCRDiT  # noqa: E402
from .metrics import benchmark_routing, flops_of_layer, flops_of_run  # noqa: E402
from .model import ModelConfig  # noqa: E402
from .ratio import RatioTable, query_bins  # noqa: E402

__all__ = ["DiffCRDiT", "ModelConfig", "RatioTable", "RunConfig", "ToyDataset", "benchmark_routing",
           "flops_of_layer", "flops_of_run", "load_checkpoint", "load_estimator", "query_bins",
           "save_checkpoint", "save_estimator"]
