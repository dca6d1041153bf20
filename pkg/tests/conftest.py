import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pasg.synth import make_demo_objects


@pytest.fixture(scope="session")
def demo_objects(tmp_path_factory) -> Path:
    """The three-object synthetic render set, generated once per session."""
    root = tmp_path_factory.mktemp("objects")
    make_demo_objects(root)
    return root
