"""Command-line drivers: single runs, convergence, scaling, stability and assembly benchmarks."""

from .bench import bench_assembly, fit_exponent
from .cli import main
from .config import RunConfig, load_config, normalize, parse_text, serialize

__all__ = ["main", "RunConfig", "load_config", "parse_text", "serialize", "normalize", "bench_assembly",
           "fit_exponent"]
