"""
Configuration sections and the merged run configuration.

Each section keeps its defaults in class attributes. Keyword overrides
replace them on the instance; unknown keys and invalid values are collected
rather than reported one at a time so that a single L{ConfigError} can list
every problem in a configuration file.
"""
import copy
import json
import os

from twisted.python.filepath import FilePath

from fusedesc.error import ConfigError


def _isInt(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _isReal(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _plain(v):
    if isinstance(v, ConfigSection):
        return v.asDict()
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


class ConfigSection:
    """
    Abstract base class for configuration sections

    @cvar _section: name of the section inside L{RunConfig}
    @cvar _fields: accepted keys, in serialization order
    """
    _section = None
    _fields = ()

    def __init__(self, **kwargs):
        problems = self._assign(kwargs)
        if problems:
            raise ConfigError(problems)

    @classmethod
    def collect(cls, values):
        """
        Builds a section without raising

        @returns: (section, list of problem strings)
        """
        section = cls.__new__(cls)
        return section, section._assign(values or {})

    def _assign(self, values):
        problems = [
            f'{self._section}.{k}: unknown key'
            for k in sorted(set(values) - set(self._fields))
        ]
        for k in self._fields:
            v = values[k] if k in values else getattr(type(self), k)
            setattr(self, k, copy.deepcopy(v))
        problems.extend(f'{self._section}.{p}' for p in self.validate())
        return problems

    def validate(self):
        """
        @returns: C{list} of "key: reason" strings, empty when valid
        """
        return []

    def asDict(self):
        return {k: _plain(getattr(self, k)) for k in self._fields}

    def replace(self, **kwargs):
        values = self.asDict()
        values.update(kwargs)
        return type(self)(**values)

    def __eq__(self, other):
        return type(self) is type(other) and self.asDict() == other.asDict()

    def __repr__(self):
        return f'{type(self).__name__}({self.asDict()!r})'


def _positive(errs, section, key, integer=False):
    v = getattr(section, key)
    ok = _isInt(v) if integer else _isReal(v)
    if not ok or v <= 0:
        kind = 'integer' if integer else 'number'
        errs.append(f'{key}: must be a positive {kind}')


def _nonNegative(errs, section, key, integer=False):
    v = getattr(section, key)
    ok = _isInt(v) if integer else _isReal(v)
    if not ok or v < 0:
        errs.append(f'{key}: must be a nonnegative '
                    f'{"integer" if integer else "number"}')


def _oneOf(errs, section, key, choices):
    if getattr(section, key) not in choices:
        errs.append(f'{key}: must be one of {", ".join(choices)}')


def _intList(errs, section, key, length=None):
    v = getattr(section, key)
    if not isinstance(v, (list, tuple)) or \
            not all(_isInt(x) and x > 0 for x in v) or \
            (length is not None and len(v) != length) or not v:
        what = f'{length} ' if length else ''
        errs.append(f'{key}: must be a list of {what}positive integers')


def _realList(errs, section, key):
    v = getattr(section, key)
    if not isinstance(v, (list, tuple)) or not all(_isReal(x) for x in v):
        errs.append(f'{key}: must be a list of numbers')


class FusionConfig (ConfigSection):
    """
    Cross-attention fusion settings. C{c_t} of C{None} means half the
    bottleneck width.
    """
    _section = 'fusion'
    _fields = ('c_t', 'self_attention_layers', 'query_source',
               'fusion_positions')

    c_t = None
    self_attention_layers = 0
    query_source = 'points'
    fusion_positions = 'single'

    def validate(self):
        errs = []
        if self.c_t is not None and (not _isInt(self.c_t) or self.c_t < 1):
            errs.append('c_t: must be a positive integer or null')
        _nonNegative(errs, self, 'self_attention_layers', integer=True)
        _oneOf(errs, self, 'query_source', ('points', 'image'))
        _oneOf(errs, self, 'fusion_positions', ('single', 'three'))
        return errs

    def width(self, bottleneck):
        if self.c_t is not None:
            return self.c_t
        return max(1, bottleneck // 2)


class NetworkConfig (ConfigSection):
    """
    Descriptor network layout. C{decoder_channels} lists the output widths
    of the four transpose convolutions, deepest first.
    """
    _section = 'network'
    _fields = ('encoder_channels', 'decoder_channels', 'descriptor_dim',
               'voxel_size', 'kernel_extent', 'image_channels',
               'point_features', 'normalize_output', 'with_fusion',
               'decoder_merge', 'fusion')

    encoder_channels = (16, 32, 64, 128)
    decoder_channels = (64, 64, 32, 32)
    descriptor_dim = 32
    voxel_size = 0.05
    kernel_extent = 3
    image_channels = 32
    point_features = 'ones'
    normalize_output = True
    with_fusion = True
    decoder_merge = 'add'
    fusion = None

    def _assign(self, values):
        values = dict(values)
        fusion = values.pop('fusion', None)
        problems = ConfigSection._assign(self, values)
        if isinstance(fusion, FusionConfig):
            self.fusion = fusion
        elif fusion is None or isinstance(fusion, dict):
            self.fusion, fproblems = FusionConfig.collect(fusion)
            problems.extend('network.' + p for p in fproblems)
        else:
            problems.append('network.fusion: must be an object')
            self.fusion = FusionConfig()
        return problems

    def validate(self):
        errs = []
        _intList(errs, self, 'encoder_channels', 4)
        _intList(errs, self, 'decoder_channels', 4)
        _positive(errs, self, 'descriptor_dim', integer=True)
        _positive(errs, self, 'voxel_size')
        _positive(errs, self, 'image_channels', integer=True)
        if not _isInt(self.kernel_extent) or self.kernel_extent < 1 \
                or self.kernel_extent % 2 == 0:
            errs.append('kernel_extent: must be a positive odd integer')
        _oneOf(errs, self, 'point_features', ('ones', 'rgb'))
        _oneOf(errs, self, 'decoder_merge', ('add', 'concat'))
        for key in ('normalize_output', 'with_fusion'):
            if not isinstance(getattr(self, key), bool):
                errs.append(f'{key}: must be true or false')
        return errs

    @property
    def bottleneck(self):
        return self.encoder_channels[3]

    @property
    def inputChannels(self):
        return 3 if self.point_features == 'rgb' else 1


class TrainConfig (ConfigSection):
    """
    Hardest-contrastive training settings. A C{pairs_per_epoch} of C{None}
    uses the whole dataset every epoch.
    """
    _section = 'train'
    _fields = ('positive_margin', 'negative_margin', 'learning_rate',
               'momentum', 'epochs', 'pairs_per_epoch', 'anchors_per_pair',
               'negative_samples', 'seed')

    positive_margin = 0.1
    negative_margin = 1.4
    learning_rate = 0.1
    momentum = 0.9
    epochs = 10
    pairs_per_epoch = None
    anchors_per_pair = 256
    negative_samples = 1024
    seed = 0

    def validate(self):
        errs = []
        _nonNegative(errs, self, 'positive_margin')
        _nonNegative(errs, self, 'negative_margin')
        if _isReal(self.positive_margin) and _isReal(self.negative_margin) \
                and self.negative_margin <= self.positive_margin:
            errs.append('negative_margin: must exceed positive_margin')
        _nonNegative(errs, self, 'learning_rate')
        if not _isReal(self.momentum) or not 0 <= self.momentum < 1:
            errs.append('momentum: must lie in [0, 1)')
        _nonNegative(errs, self, 'epochs', integer=True)
        if self.pairs_per_epoch is not None:
            _positive(errs, self, 'pairs_per_epoch', integer=True)
        _positive(errs, self, 'anchors_per_pair', integer=True)
        _positive(errs, self, 'negative_samples', integer=True)
        _nonNegative(errs, self, 'seed', integer=True)
        return errs


class SceneConfig (ConfigSection):
    """
    Synthetic scene content. In C{ambiguous} texture mode primitives come
    in congruent pairs that differ only in color.
    """
    _section = 'scene'
    _fields = ('planes', 'boxes', 'spheres', 'texture',
               'points_per_primitive', 'noise', 'extent', 'seed')

    planes = 2
    boxes = 1
    spheres = 1
    texture = 'distinct'
    points_per_primitive = 600
    noise = 0.002
    extent = 2.0
    seed = 0

    def validate(self):
        errs = []
        for key in ('planes', 'boxes', 'spheres'):
            _nonNegative(errs, self, key, integer=True)
        counts = [getattr(self, k) for k in ('planes', 'boxes', 'spheres')]
        if all(_isInt(c) for c in counts) and sum(counts) == 0:
            errs.append('planes: scene needs at least one primitive')
        _oneOf(errs, self, 'texture', ('distinct', 'ambiguous'))
        _positive(errs, self, 'points_per_primitive', integer=True)
        _nonNegative(errs, self, 'noise')
        _positive(errs, self, 'extent')
        _nonNegative(errs, self, 'seed', integer=True)
        return errs


class CameraIntrinsics (ConfigSection):
    """
    Pinhole camera. C{coverage} below 1 narrows the view to the central
    part of each fragment.
    """
    _section = 'camera'
    _fields = ('fx', 'fy', 'cx', 'cy', 'width', 'height', 'splat_radius',
               'coverage', 'distance')

    fx = 100.0
    fy = 100.0
    cx = 80.0
    cy = 60.0
    width = 160
    height = 120
    splat_radius = 1
    coverage = 1.0
    distance = 3.0

    def validate(self):
        errs = []
        _positive(errs, self, 'fx')
        _positive(errs, self, 'fy')
        for key in ('width', 'height'):
            v = getattr(self, key)
            if not _isInt(v) or v <= 0 or v % 8:
                errs.append(f'{key}: must be a positive multiple of 8')
        if _isReal(self.cx) and _isInt(self.width) and \
                not 0 <= self.cx < self.width:
            errs.append('cx: principal point must lie inside the image')
        if _isReal(self.cy) and _isInt(self.height) and \
                not 0 <= self.cy < self.height:
            errs.append('cy: principal point must lie inside the image')
        _nonNegative(errs, self, 'splat_radius', integer=True)
        if not _isReal(self.coverage) or not 0 < self.coverage <= 1:
            errs.append('coverage: must lie in (0, 1]')
        _positive(errs, self, 'distance')
        return errs


class DatasetConfig (ConfigSection):
    """
    Pair generation. C{low_overlap_pairs} extra pairs are drawn with overlap
    in [0.10, 0.30] and tagged as the low overlap split.
    """
    _section = 'dataset'
    _fields = ('scenes', 'pairs_per_scene', 'overlap', 'low_overlap_pairs',
               'transform_magnitude')

    scenes = 4
    pairs_per_scene = 5
    overlap = (0.4, 0.9)
    low_overlap_pairs = 0
    transform_magnitude = 30.0

    def validate(self):
        errs = []
        _positive(errs, self, 'scenes', integer=True)
        _positive(errs, self, 'pairs_per_scene', integer=True)
        _nonNegative(errs, self, 'low_overlap_pairs', integer=True)
        _nonNegative(errs, self, 'transform_magnitude')
        o = self.overlap
        if not isinstance(o, (list, tuple)) or len(o) != 2 or \
                not all(_isReal(x) for x in o) or not 0 < o[0] <= o[1] <= 1:
            errs.append(
                'overlap: must be [low, high] with 0 < low <= high <= 1')
        return errs


class RansacConfig (ConfigSection):
    _section = 'ransac'
    _fields = ('iterations', 'inlier_dist', 'sample_size', 'batch_size',
               'mutual_only', 'iteration_sweep', 'seed')

    iterations = 2000
    inlier_dist = 0.1
    sample_size = 3
    batch_size = 500
    mutual_only = False
    iteration_sweep = ()
    seed = 0

    def validate(self):
        errs = []
        _positive(errs, self, 'iterations', integer=True)
        _nonNegative(errs, self, 'inlier_dist')
        if not _isInt(self.sample_size) or self.sample_size < 3:
            errs.append('sample_size: must be an integer >= 3')
        _positive(errs, self, 'batch_size', integer=True)
        if not isinstance(self.mutual_only, bool):
            errs.append('mutual_only: must be true or false')
        if self.iteration_sweep:
            _intList(errs, self, 'iteration_sweep')
        _nonNegative(errs, self, 'seed', integer=True)
        return errs


class MetricConfig (ConfigSection):
    """
    Evaluation thresholds and sweeps. Distances in meters, angles in
    degrees.
    """
    _section = 'metrics'
    _fields = ('tau1', 'tau2', 'rte_max', 'rre_max', 'anchors',
               'sampling_sweep', 'tau1_curve', 'tau2_curve', 'mutual_only')

    tau1 = 0.1
    tau2 = 0.05
    rte_max = 2.0
    rre_max = 5.0
    anchors = 256
    sampling_sweep = (256, 128, 64, 32, 16)
    tau1_curve = (0.02, 0.04, 0.06, 0.08, 0.1, 0.12, 0.14, 0.16, 0.18, 0.2)
    tau2_curve = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4)
    mutual_only = False

    def validate(self):
        errs = []
        for key in ('tau1', 'rte_max', 'rre_max'):
            _nonNegative(errs, self, key)
        if not _isReal(self.tau2) or not 0 <= self.tau2 < 1:
            errs.append('tau2: must lie in [0, 1)')
        _positive(errs, self, 'anchors', integer=True)
        _intList(errs, self, 'sampling_sweep')
        _realList(errs, self, 'tau1_curve')
        _realList(errs, self, 'tau2_curve')
        if not isinstance(self.mutual_only, bool):
            errs.append('mutual_only: must be true or false')
        return errs


class PathConfig (ConfigSection):
    """
    Input artifacts. Every path that is set must exist when the run
    configuration is validated.
    """
    _section = 'paths'
    _fields = ('dataset', 'checkpoint', 'baseline')

    dataset = None
    checkpoint = None
    baseline = None

    def validate(self):
        errs = []
        for key in self._fields:
            v = getattr(self, key)
            if v is None:
                continue
            if not isinstance(v, str):
                errs.append(f'{key}: must be a path string')
            elif not FilePath(v).exists():
                errs.append(f'{key}: {v} does not exist')
        return errs


def parseOverride(text):
    """
    Parses a C{section.key=value} override. The value is read as JSON and
    falls back to a bare string.

    @returns: (list of key components, value)
    """
    key, sep, raw = text.partition('=')
    path = [p for p in key.strip().split('.') if p]
    if not sep or len(path) < 2:
        raise ConfigError(
            [f'{text}: overrides must look like section.key=value'])
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return path, value


class RunConfig:
    """
    Merged view of every configuration section plus the master seed.

    @ivar seed: master seed copied into every section that has one
    """
    sections = {
        'network': NetworkConfig,
        'train': TrainConfig,
        'scene': SceneConfig,
        'camera': CameraIntrinsics,
        'dataset': DatasetConfig,
        'ransac': RansacConfig,
        'metrics': MetricConfig,
        'paths': PathConfig,
    }

    seed = None

    def __init__(self, values=None, overrides=(), seed=None):
        values = copy.deepcopy(values or {})
        problems = []

        if not isinstance(values, dict):
            raise ConfigError(['configuration must be a JSON object'])

        for text in overrides:
            try:
                path, value = parseOverride(text)
            except ConfigError as e:
                problems.extend(e.errors)
                continue
            node = values
            for part in path[:-1]:
                node = node.setdefault(part, {})
                if not isinstance(node, dict):
                    problems.append(f'{text}: {part} is not a section')
                    break
            else:
                node[path[-1]] = value

        if seed is None:
            seed = values.pop('seed', None)
        else:
            values.pop('seed', None)
        if seed is not None:
            if not _isInt(seed) or seed < 0:
                problems.append('seed: must be a nonnegative integer')
            else:
                self.seed = seed
                for name, cls in self.sections.items():
                    if 'seed' in cls._fields:
                        section = values.setdefault(name, {})
                        if isinstance(section, dict):
                            section['seed'] = seed

        for name in sorted(set(values) - set(self.sections)):
            problems.append(f'{name}: unknown section')

        for name, cls in self.sections.items():
            raw = values.get(name, {})
            if not isinstance(raw, dict):
                problems.append(f'{name}: must be an object')
                raw = {}
            section, sproblems = cls.collect(raw)
            setattr(self, name, section)
            problems.extend(sproblems)

        if problems:
            raise ConfigError(problems)

    @classmethod
    def fromFile(cls, path, overrides=(), seed=None):
        values = {}
        if path is not None:
            fp = FilePath(path)
            if not fp.exists():
                raise ConfigError([f'config: {path} does not exist'])
            try:
                values = json.loads(fp.getContent().decode('utf-8'))
            except (ValueError, UnicodeDecodeError) as e:
                raise ConfigError([f'config: {path} is not valid JSON: {e}'])
        return cls(values, overrides, seed)

    def asDict(self):
        d = {name: getattr(self, name).asDict() for name in self.sections}
        if self.seed is not None:
            d['seed'] = self.seed
        return d


THREADS_ENV = 'IMFNET_THREADS'
THREADS_ENV_FALLBACK = 'FUSEDESC_THREADS'


def threadCount(option=None, environ=None):
    """
    Resolves the worker thread count from the command line option, then the
    C{IMFNET_THREADS} environment variable, then C{FUSEDESC_THREADS}, then 1
    """
    if environ is None:
        environ = os.environ
    raw = option
    for name in (THREADS_ENV, THREADS_ENV_FALLBACK):
        if raw is None:
            raw = environ.get(name)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except (TypeError, ValueError):
        n = 0
    if n < 1:
        raise ConfigError([f'threads: {raw!r} is not a positive integer'])
    return n
