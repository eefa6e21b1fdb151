import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from scpreid.config import PreprocessConfig, SyntheticSpec
from scpreid.data import compute_channel_stats, generate_synthetic, relabel_contiguous

# Single-threaded torch keeps every trajectory in the suite bit-reproducible.
torch.set_num_threads(1)

settings.register_profile(
    "suite",
    max_examples=50,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def small_cohort():
    """8 identities x 4 images on the desk-scale geometry, with the matching
    channel statistics; shared by the training-loop and CLI tests."""
    rng = np.random.default_rng(5)
    dataset, _ = relabel_contiguous(
        generate_synthetic(SyntheticSpec(num_identities=8, images_per_identity=4), rng)
    )
    mean, std = compute_channel_stats(dataset)
    return dataset, PreprocessConfig(mean=mean, std=std)


def parse_loss_csv(path):
    """Read a loss CSV (comment header + column header + rows) into dicts."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    columns = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        row = {c: (int(v) if c == "step" else float(v)) for c, v in zip(columns, parts)}
        rows.append(row)
    return rows
