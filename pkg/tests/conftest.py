import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def trained_ventral():
    """A patch classifier trained with the default recipe on a small seeded dataset."""
    from vdnet import data, pipeline

    manifest = data.make_manifest(3, 120, 20)
    model, report = pipeline.train_ventral(manifest, 3)
    return model, report, manifest
