"""Synthetic corpus, run configuration and presets.

The runner, comparison and CLI live in ``splitreuse.harness.runner``,
``splitreuse.harness.compare`` and ``splitreuse.harness.cli``.
"""

from .config import RunConfig, dumps, loads, with_overrides
from .corpus import SyntheticCorpus, entropy_rate, generate_corpus
from .presets import preset_config, preset_names

__all__ = [
    "RunConfig", "SyntheticCorpus", "dumps", "entropy_rate", "generate_corpus", "loads", "preset_config",
    "preset_names", "with_overrides",
]
