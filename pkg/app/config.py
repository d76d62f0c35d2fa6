import logging
import os
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

from core import ValidationError
from engine import EngineConfig
from propagation import CROP_MODES

log = logging.getLogger('config')


class ConfigError(ValidationError):
    """Raised when a run configuration is malformed or refers to missing paths."""


def parse_config_text(text: str, source: str = '<config>') -> Dict[str, str]:
    """Flat ``KEY = value`` lines; ``#`` starts a comment line."""
    values: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise ConfigError(f'{source}:{number}: expected KEY = value, got "{line}"')
        key, value = (part.strip() for part in line.split('=', 1))
        if not key:
            raise ConfigError(f'{source}:{number}: missing key')
        if key in values:
            raise ConfigError(f'{source}:{number}: duplicate key "{key}"')
        values[key] = value
    return values


class Config:
    _DEFAULTS = {
        'RHO_REID': '0.7',
        'RHO_OCC': '0.3',
        'PATCH_SIZE': '256',
        'CONTEXT_FACTOR': '1.25',
        'CROP_MODE': 'box',
        'FLOW_BACKEND': 'block_matching',
        'REFINER_BACKEND': 'color_model',
        'PROPOSAL_BACKEND': 'ncc',
        'DESCRIPTOR_BACKEND': 'histogram',
        'MAX_ITERATIONS': '0',
        'REID_ENABLED': 'true',
        'BLOCK_WINDOW': '8',
        'BLOCK_RADIUS': '8',
        'REFINER_FG_THRESHOLD': '0.8',
        'REFINER_BG_THRESHOLD': '0.2',
        'REFINER_MIN_SUPPORT': '16',
        'NCC_SCALES': '0.5,0.75,1.0,1.25,1.5',
        'NCC_THRESHOLD': '0.3',
        'NCC_NMS_IOU': '0.5',
        'MAX_PROPOSALS': '10',
        'ORACLE_DIR': '',
        'FRAMES_DIR': '',
        'FIRST_MASK': '',
        'OUTPUT_DIR': '',
        'DUMP_PROBABILITIES': 'false',
        'SAVE_OVERLAYS': 'false',
        'LOGLEVEL': 'INFO',
    }

    _BOOLEAN = ('REID_ENABLED', 'DUMP_PROBABILITIES', 'SAVE_OVERLAYS')
    _INTEGER = ('PATCH_SIZE', 'MAX_ITERATIONS', 'BLOCK_WINDOW', 'BLOCK_RADIUS', 'REFINER_MIN_SUPPORT', 'MAX_PROPOSALS')
    _FLOAT = ('RHO_REID', 'RHO_OCC', 'CONTEXT_FACTOR', 'REFINER_FG_THRESHOLD', 'REFINER_BG_THRESHOLD',
              'NCC_THRESHOLD', 'NCC_NMS_IOU')
    # must exist when set; OUTPUT_DIR is created on demand
    _PATHS = ('ORACLE_DIR', 'FRAMES_DIR', 'FIRST_MASK')
    _CHOICES = {
        'CROP_MODE': CROP_MODES,
        'LOGLEVEL': ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'),
    }

    def __init__(self, values: Optional[Mapping[str, str]] = None, environ: Optional[Mapping[str, str]] = None,
                 base_dir: Optional[str] = None):
        values = dict(values or {})
        environ = os.environ if environ is None else environ
        unknown = sorted(set(values) - set(self._DEFAULTS))
        if unknown:
            raise ConfigError(f'Unknown configuration keys: {", ".join(unknown)}')

        for k, v in self._DEFAULTS.items():
            # keys set in the file win over the environment
            setattr(self, k, values[k] if k in values else environ.get(k, v))

        for k, v in list(self.__dict__.items()):
            if k in self._BOOLEAN:
                if v not in ('true', 'false', 'True', 'False', 'on', 'off', '1', '0'):
                    raise ConfigError(f'"{k}" is set to a non-boolean value "{v}"')
                setattr(self, k, v in ('true', 'True', 'on', '1'))
            elif k in self._INTEGER:
                setattr(self, k, self._coerce(k, v, int))
            elif k in self._FLOAT:
                setattr(self, k, self._coerce(k, v, float))
            elif k in self._CHOICES and v not in self._CHOICES[k]:
                raise ConfigError(f'"{k}" must be one of {", ".join(self._CHOICES[k])}, got "{v}"')

        self.NCC_SCALES = self._parse_scales(self.NCC_SCALES)
        if self.MAX_ITERATIONS < 0:
            raise ConfigError(f'"MAX_ITERATIONS" must be >= 0, got {self.MAX_ITERATIONS}')

        base = Path(base_dir) if base_dir else Path.cwd()
        for k in self._PATHS + ('OUTPUT_DIR',):
            value = getattr(self, k)
            if value:
                path = Path(value)
                if not path.is_absolute():
                    path = base / path
                setattr(self, k, str(path.resolve()))
        self.check_paths()

    @classmethod
    def load(cls, path: str, environ: Optional[Mapping[str, str]] = None) -> 'Config':
        log.info(f'Loading configuration from "{path}"')
        if not os.path.exists(path):
            raise ConfigError(f'File "{path}" not found')
        with open(path, encoding='utf-8') as fh:
            values = parse_config_text(fh.read(), source=path)
        return cls(values, environ=environ, base_dir=os.path.dirname(os.path.abspath(path)))

    @staticmethod
    def _coerce(key: str, value, kind):
        try:
            return kind(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f'"{key}" must be {kind.__name__}, got "{value}"') from exc

    @staticmethod
    def _parse_scales(value) -> Tuple[float, ...]:
        if isinstance(value, tuple):
            return value
        try:
            scales = tuple(float(part) for part in str(value).split(',') if part.strip())
        except ValueError as exc:
            raise ConfigError(f'"NCC_SCALES" must be a comma separated list of numbers, got "{value}"') from exc
        if not scales or any(scale <= 0 for scale in scales):
            raise ConfigError(f'"NCC_SCALES" must list positive scales, got "{value}"')
        return scales

    def check_paths(self) -> None:
        for k in self._PATHS:
            value = getattr(self, k)
            if value and not os.path.exists(value):
                raise ConfigError(f'"{k}" points to "{value}", which does not exist')

    def override(self, **values) -> 'Config':
        """Applies command-line values (already typed) and re-checks paths."""
        for k, v in values.items():
            if k not in self._DEFAULTS:
                raise ConfigError(f'Unknown configuration key "{k}"')
            if v is not None:
                if k in self._PATHS + ('OUTPUT_DIR',):
                    v = str(Path(v).resolve())
                setattr(self, k, v)
        self.check_paths()
        return self

    def engine_config(self, **changes) -> EngineConfig:
        settings = dict(
            rho_reid=self.RHO_REID,
            rho_occ=self.RHO_OCC,
            patch_size=self.PATCH_SIZE,
            context_factor=self.CONTEXT_FACTOR,
            crop_mode=self.CROP_MODE,
            flow_backend=self.FLOW_BACKEND,
            refiner_backend=self.REFINER_BACKEND,
            proposal_backend=self.PROPOSAL_BACKEND,
            descriptor_backend=self.DESCRIPTOR_BACKEND,
            max_iterations=self.MAX_ITERATIONS or None,
            reid_enabled=self.REID_ENABLED,
        )
        settings.update(changes)
        return EngineConfig(**settings)

    def as_dict(self) -> Dict[str, object]:
        return {k: getattr(self, k) for k in self._DEFAULTS}
