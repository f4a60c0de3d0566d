import numpy as np
import pytest

import stainalign as sa
from stainalign.pipeline import preprocess_for_features


@pytest.fixture(scope="session")
def hist512():
    return sa.synthetic_histology(512, 512, seed=1)


@pytest.fixture(scope="session")
def texture512(hist512):
    """Texture-rich single-channel raster (the pipeline's feature channel)."""
    return preprocess_for_features(hist512)


@pytest.fixture(scope="session")
def features512(texture512):
    return sa.detect_and_describe(texture512)


def keypoint_positions(feats):
    return np.array([[kp.x, kp.y] for kp in feats.keypoints]).reshape(-1, 2)
