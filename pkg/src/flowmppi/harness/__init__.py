"""CLI orchestration: dataset generation, training, evaluation, OOD scoring."""
