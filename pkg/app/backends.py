"""Name to factory registry for the pluggable engine components."""

import logging
from typing import Callable, Dict, Optional, TypeVar

from config import Config, ConfigError
from engine import Components
from flow import BlockMatchingFlow, FlowEstimator
from oracles import GroundTruth, OracleFlowEstimator, OracleProposals, OracleRefiner
from propagation import ColorModelRefiner, IdentityRefiner, MaskRefiner
from reid import DescriptorExtractor, HistogramDescriptor, NCCProposals, ProposalGenerator

log = logging.getLogger('backends')

T = TypeVar('T')
Factory = Callable[[Config, Optional[GroundTruth]], T]


def _require_truth(truth: Optional[GroundTruth], what: str) -> GroundTruth:
    if truth is None:
        raise ConfigError(f'The oracle {what} backend needs ground truth (set ORACLE_DIR)')
    return truth


FLOW_BACKENDS: Dict[str, Factory[FlowEstimator]] = {
    'block_matching': lambda config, truth: BlockMatchingFlow(config.BLOCK_WINDOW, config.BLOCK_RADIUS),
    'oracle': lambda config, truth: OracleFlowEstimator(_require_truth(truth, 'flow')),
}

REFINER_BACKENDS: Dict[str, Factory[MaskRefiner]] = {
    'color_model': lambda config, truth: ColorModelRefiner(
        fg_threshold=config.REFINER_FG_THRESHOLD,
        bg_threshold=config.REFINER_BG_THRESHOLD,
        min_support=config.REFINER_MIN_SUPPORT,
    ),
    'identity': lambda config, truth: IdentityRefiner(),
    'oracle': lambda config, truth: OracleRefiner(_require_truth(truth, 'refiner')),
}

PROPOSAL_BACKENDS: Dict[str, Factory[ProposalGenerator]] = {
    'ncc': lambda config, truth: NCCProposals(
        scales=tuple(config.NCC_SCALES),
        max_proposals=config.MAX_PROPOSALS,
        threshold=config.NCC_THRESHOLD,
        nms_iou=config.NCC_NMS_IOU,
    ),
    'oracle': lambda config, truth: OracleProposals(_require_truth(truth, 'proposal')),
}

DESCRIPTOR_BACKENDS: Dict[str, Factory[DescriptorExtractor]] = {
    'histogram': lambda config, truth: HistogramDescriptor(),
}


def _create(registry: Dict[str, Factory[T]], key: str, name: str, config: Config, truth: Optional[GroundTruth]) -> T:
    factory = registry.get(name)
    if factory is None:
        raise ConfigError(f'Unknown {key} "{name}"; choose one of {", ".join(sorted(registry))}')
    return factory(config, truth)


def uses_oracle(config: Config) -> bool:
    return 'oracle' in (config.FLOW_BACKEND, config.REFINER_BACKEND, config.PROPOSAL_BACKEND)


def build_components(config: Config, truth: Optional[GroundTruth] = None) -> Components:
    components = Components(
        flow=_create(FLOW_BACKENDS, 'FLOW_BACKEND', config.FLOW_BACKEND, config, truth),
        refiner=_create(REFINER_BACKENDS, 'REFINER_BACKEND', config.REFINER_BACKEND, config, truth),
        generator=_create(PROPOSAL_BACKENDS, 'PROPOSAL_BACKEND', config.PROPOSAL_BACKEND, config, truth),
        extractor=_create(DESCRIPTOR_BACKENDS, 'DESCRIPTOR_BACKEND', config.DESCRIPTOR_BACKEND, config, truth),
    )
    log.debug('Components: %s', components)
    return components
