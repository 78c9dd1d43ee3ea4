"""Shared fixtures: a tiny three-domain experiment that runs in about a second."""

import pytest

TINY = """
seed: {seed}
architecture: {{family: residual, stem_channels: 4, blocks_per_stage: [1, 1], growth_or_width: 4, input_shape: [1, 8, 8]}}
synthetic:
  image_size: 8
  samples_per_class: 20
  domains:
    source: {{shift: 1.0, ratios: [0.8, 0.2]}}
    transition: {{shift: 0.5, ratios: [0.8, 0.2]}}
    target: {{shift: 0.0, ratios: [0.5, 0.25, 0.25]}}
datasets: {{source: {{synthetic: source}}, transition: {{synthetic: transition}}, target: {{synthetic: target}}}}
stages:
  - {{name: source, dataset: source, init_from: random, freeze: 0.0, hidden_units: 8,
      train: {{epochs: 2, batch_size: 8}}}}
  - {{name: transition, dataset: transition, init_from: previous_stage, freeze: 0.5, hidden_units: 8,
      labels: {labels}, train: {{epochs: 2, batch_size: 8}}}}
  - {{name: target, dataset: target, init_from: previous_stage, freeze: 0.5, hidden_units: 8, dropout: 0.5,
      train: {{epochs: 2, batch_size: 8}}}}
arms: {{mstl: [source, transition, target], baseline: [source, target]}}
"""


@pytest.fixture
def tiny_yaml(tmp_path):
    """The tiny experiment written to disk with hard labels, run dir under tmp_path."""
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY.format(seed=0, labels="hard") + f"output_dir: {tmp_path / 'runs' / 'tiny'}\n")
    return path
