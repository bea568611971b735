import pytest

from bsrnet import pipeline
from bsrnet.config import RunConfig


def small_config(out_dir, **kw) -> RunConfig:
    base = dict(out_dir=str(out_dir), n_labeled=2, n_unlabeled=4, n_test=2, total_iters=8, phase1_iters=6,
                batch_size=4, labeled_per_batch=2, levels=2, base_channels=4, ablation_seeds="0")
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def small_run(tmp_path):
    """A tiny run directory with data, a backbone and subclass labels on disk."""
    cfg = small_config(tmp_path / "run")
    split = pipeline.generate_data(cfg)
    backbone, _ = pipeline.phase1_train(cfg, split)
    pipeline.phase1_cluster(cfg, backbone, split)
    return cfg, split, backbone
