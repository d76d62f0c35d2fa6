import os

import hypothesis
import numpy as np
import pytest

from engine import Components
from flow import zero_flow
from oracles import GroundTruth, OracleFlowEstimator, OracleProposals, OracleRefiner
from propagation import IdentityRefiner
from reid import HistogramDescriptor, NCCProposals
from synthetic import generate, occlusion_scene

np.seterr(all='warn')

hypothesis.settings.register_profile('fast', max_examples=10, deadline=None)
hypothesis.settings.register_profile('dev', max_examples=60, deadline=None)
hypothesis.settings.register_profile('ci', max_examples=300, deadline=None)
hypothesis.settings.load_profile(os.environ.get('HYPOTHESIS_PROFILE', 'dev'))


class StaticFlow:
    """Zero motion everywhere."""

    def estimate(self, src, dst):
        return zero_flow(*src.shape)


@pytest.fixture(scope='session')
def occlusion_video():
    return generate(occlusion_scene(occluded=True), seed=0)


@pytest.fixture(scope='session')
def clear_video():
    return generate(occlusion_scene(occluded=False), seed=0)


@pytest.fixture
def oracle_components():
    """Builds components backed by a synthetic video's ground truth."""

    def build(video, proposals='oracle', refiner='oracle'):
        truth = GroundTruth.from_video(video)
        return Components(
            flow=OracleFlowEstimator(truth),
            refiner=OracleRefiner(truth) if refiner == 'oracle' else IdentityRefiner(),
            generator=OracleProposals(truth) if proposals == 'oracle' else NCCProposals(),
            extractor=HistogramDescriptor(),
        )

    return build
