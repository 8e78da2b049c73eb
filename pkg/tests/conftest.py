import pytest

from gaitkit import synthgen
from gaitkit.core import Modality

MINI_MODALITIES = (Modality.RGB_SILHOUETTE, Modality.DEPTH)


@pytest.fixture(scope="session")
def mini_root(tmp_path_factory):
    """Small shared dataset: 4 train + 2 test subjects, 2 views, 2
    modalities, 16 raw frames."""
    root = tmp_path_factory.mktemp("mini") / "data"
    cfg = synthgen.GenConfig(n_train_subjects=4, n_test_subjects=2,
                             views=(0, 180), t_raw=16, seed=1,
                             modalities=MINI_MODALITIES)
    synthgen.generate_dataset(cfg, root)
    return root
