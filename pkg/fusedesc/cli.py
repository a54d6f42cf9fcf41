"""
Command line front end.

Every sub-command reads an optional JSON configuration, applies repeated
C{--set section.key=value} overrides, writes its outputs atomically into the
C{--out} directory and logs progress into C{<out>/run.log}. The process exit
code reflects the category of the first error.
"""
import json
import sys

from twisted.internet import defer, task
from twisted.python import failure, log, usage
from twisted.python.filepath import FilePath

from fusedesc import (container, dam, data, evaluation, fileio, gradcheck,
                      network, training)
from fusedesc.config import RunConfig, threadCount
from fusedesc.error import ConfigError, FuseDescException, NumericError
from fusedesc.fusion import dumpWeights
from fusedesc.metrics import transformErrors
from fusedesc.registration import matchDescriptors, ransacRegister


def writeJSON(fp, obj):
    fp.setContent(
        (json.dumps(obj, sort_keys=True, indent=1) + '\n').encode('utf-8'))


class _Options (usage.Options):
    optParameters = [
        ['config', 'c', None, 'JSON configuration file'],
        ['seed', None, None, 'Master seed for every random choice', int],
        ['out', 'o', 'out', 'Output directory'],
        ['threads', None, None,
         'Worker threads (default: $IMFNET_THREADS or 1)', int],
    ]

    def __init__(self):
        usage.Options.__init__(self)
        self.overrides = []

    def opt_set(self, value):
        """
        Override one configuration value, e.g. network.with_fusion=false
        (repeatable)
        """
        self.overrides.append(value)

    def pathOverride(self, key, option):
        if self[option] is not None:
            self.overrides.append(f'paths.{key}={json.dumps(self[option])}')


class SynthOptions (_Options):
    pass


class TrainOptions (_Options):
    optParameters = [
        ['dataset', 'd', None, 'Dataset directory'],
        ['checkpoint', None, None, 'Checkpoint to continue from'],
    ]


class ExtractOptions (_Options):
    optParameters = [
        ['checkpoint', None, None, 'Model checkpoint'],
        ['cloud', None, None, 'PLY point cloud'],
        ['image', None, None, 'PPM image of the cloud'],
    ]


class _PairOptions (_Options):
    optParameters = [
        ['dataset', 'd', None, 'Dataset directory'],
        ['checkpoint', None, None, 'Model checkpoint'],
        ['pair', 'p', 0, 'Pair index in the dataset manifest', int],
    ]


class RegisterOptions (_PairOptions):
    pass


class EvaluateOptions (_Options):
    optParameters = [
        ['dataset', 'd', None, 'Dataset directory'],
        ['checkpoint', None, None, 'Model checkpoint'],
        ['baseline', None, None, 'Second checkpoint to compare against'],
    ]


class InterpretOptions (_PairOptions):
    optParameters = [
        ['point', None, 0, 'Index of the point to explain', int],
        ['layer', None, 'final', 'Target layer name'],
        ['side', None, 'src', 'Fragment to explain: src or dst'],
        ['knn', None, 10, 'Neighbors of the query point drawn black', int],
        ['attention', None, None, 'Also dump attention weights: json or csv'],
    ]

    def postOptions(self):
        if self['side'] not in ('src', 'dst'):
            raise usage.UsageError('--side must be src or dst')
        if self['attention'] not in (None, 'json', 'csv'):
            raise usage.UsageError('--attention must be json or csv')


class GradcheckOptions (_Options):
    pass


class Options (usage.Options):
    synopsis = 'fusedesc <command> [options]'

    subCommands = [
        ['synth', None, SynthOptions, 'Generate a synthetic dataset'],
        ['train', None, TrainOptions, 'Train a descriptor network'],
        ['extract', None, ExtractOptions, 'Extract descriptors of a cloud'],
        ['register', None, RegisterOptions, 'Register one dataset pair'],
        ['evaluate', None, EvaluateOptions, 'Evaluate on a dataset'],
        ['interpret', None, InterpretOptions,
         'Descriptor activation map of one point'],
        ['gradcheck', None, GradcheckOptions, 'Run the verification suite'],
    ]

    def postOptions(self):
        if self.subCommand is None:
            raise usage.UsageError('A command is required')


# ------------------------------------------------------------------------
#                               Commands
#

def _require(value, what):
    if value is None:
        raise ConfigError([f'paths.{what}: required by this command'])
    return value


def _loadModel(path, config=None):
    return network.loadCheckpoint(FilePath(path).getContent(), config)


def _pair(cfg, index):
    pairs = data.readDataset(_require(cfg.paths.dataset, 'dataset'))
    if not 0 <= index < len(pairs):
        raise ConfigError([f'pair: {index} is not in [0, {len(pairs)})'])
    return pairs[index]


def _seed(cfg):
    return cfg.seed if cfg.seed is not None else 0


def synth(reactor, cfg, opts, out, threads):
    pairs = data.synthesize(cfg.scene, cfg.dataset, cfg.camera,
                            cfg.network.voxel_size)
    data.writeDataset(pairs, out.child('dataset').path)


def train(reactor, cfg, opts, out, threads):
    pairs = data.readDataset(_require(cfg.paths.dataset, 'dataset'))
    if cfg.paths.checkpoint is not None:
        model = _loadModel(cfg.paths.checkpoint, cfg.network)
    else:
        model = network.build(cfg.network, _seed(cfg))
    report = training.train(model, pairs, cfg.train)
    out.child('checkpoint.fdsc').setContent(network.saveCheckpoint(model))
    out.child('loss.csv').setContent(report.asCSV())
    writeJSON(out.child('train.json'), {
        'epoch_losses': report.epochLosses,
        'steps': len(report.stepLosses),
        'skipped': report.skipped,
    })


def extract(reactor, cfg, opts, out, threads):
    model = _loadModel(_require(cfg.paths.checkpoint, 'checkpoint'),
                       cfg.network)
    if opts['cloud'] is None:
        raise ConfigError(['cloud: required by this command'])
    points, colors = fileio.readPLY(FilePath(opts['cloud']).getContent())
    image = None
    if opts['image'] is not None:
        image = fileio.readPPM(FilePath(opts['image']).getContent())
    field = network.extractDescriptors(model, points, colors, image)
    descriptors = container.DescriptorContainer(
        {'descriptor_dim': field.dim,
         'voxel_size': model.config.voxel_size},
        [('descriptors', field.values),
         ('coords', field.coords),
         ('centroids', field.pointsXYZ)])
    out.child('descriptors.fdsc').setContent(descriptors.rawData)


def register(reactor, cfg, opts, out, threads):
    model = _loadModel(_require(cfg.paths.checkpoint, 'checkpoint'),
                       cfg.network)
    pair = _pair(cfg, opts['pair'])
    src = network.extractDescriptors(model, pair.srcPoints, pair.srcColors,
                                     pair.srcImage)
    dst = network.extractDescriptors(model, pair.dstPoints, pair.dstColors,
                                     pair.dstImage)
    corrs = matchDescriptors(src, dst, cfg.ransac.mutual_only)
    result = ransacRegister(corrs, src.pointsXYZ, dst.pointsXYZ, cfg.ransac)
    doc = result.asDict()
    doc['pair'] = opts['pair']
    doc['rte_m'] = doc['rre_deg'] = None
    if result.success:
        doc['rte_m'], doc['rre_deg'] = transformErrors(result.transform,
                                                       pair.gt)
    writeJSON(out.child('transform.json'), doc)


def evaluate(reactor, cfg, opts, out, threads):
    pairs = data.readDataset(_require(cfg.paths.dataset, 'dataset'))
    models = [('', _loadModel(_require(cfg.paths.checkpoint, 'checkpoint'),
                              cfg.network))]
    if cfg.paths.baseline is not None:
        models.append(('_baseline', _loadModel(cfg.paths.baseline)))
    timing = {}

    def write(result, suffix):
        report, seconds = result
        writeJSON(out.child(f'metrics{suffix}.json'), report)
        out.child(f'curves{suffix}.csv').setContent(
            evaluation.curvesCSV(report))
        timing['extract_seconds' + suffix] = seconds

    d = defer.succeed(None)
    for suffix, model in models:
        d.addCallback(lambda _, m=model: evaluation.evaluate(
            reactor, m, pairs, cfg.metrics, cfg.ransac, threads))
        d.addCallback(write, suffix)
    d.addCallback(lambda _: writeJSON(out.child('timing.json'), timing))
    return d


def interpret(reactor, cfg, opts, out, threads):
    model = _loadModel(_require(cfg.paths.checkpoint, 'checkpoint'),
                       cfg.network)
    pair = _pair(cfg, opts['pair'])
    side = opts['side']
    points = getattr(pair, side + 'Points')
    colors = getattr(pair, side + 'Colors')
    image = getattr(pair, side + 'Image')
    heatmap = dam.descriptorActivationMap(model, points, colors, image,
                                          opts['point'], opts['layer'])
    ply, sidecar = dam.exportHeatMap(heatmap, points, opts['knn'])
    out.child('heatmap.ply').setContent(ply)
    out.child('heatmap.json').setContent(sidecar)

    fmt = opts['attention']
    if fmt is not None:
        res = model.forward(points, colors, image)
        if not res.attention:
            raise ConfigError(['attention: the model has no fusion block'])
        out.child('attention.' + fmt).setContent(
            dumpWeights(res.attention[0][1].weights, fmt))


def gradcheckCommand(reactor, cfg, opts, out, threads):
    report = gradcheck.runSuite(_seed(cfg))
    writeJSON(out.child('gradcheck.json'), report.asDict())
    if not report.passed():
        raise NumericError('Gradient verification failed, see gradcheck.json')


COMMANDS = {
    'synth': synth,
    'train': train,
    'extract': extract,
    'register': register,
    'evaluate': evaluate,
    'interpret': interpret,
    'gradcheck': gradcheckCommand,
}


# ------------------------------------------------------------------------
#                                Driver
#

def _exitCode(f):
    if f.check(defer.FirstError):
        f = f.value.subFailure
    if f.check(SystemExit):
        return f
    if f.check(FuseDescException):
        e = f.value
        log.msg(f'{type(e).__name__}: {e}')
        sys.stderr.write(f'fusedesc: {e}\n')
        return failure.Failure(SystemExit(e.exitCode))
    log.err(f, 'Unexpected failure')
    sys.stderr.write(f'fusedesc: {f.getErrorMessage()}\n')
    return failure.Failure(SystemExit(1))


def main(reactor, argv=None):
    """
    Runs one command

    @returns: L{defer.Deferred} that fails with L{SystemExit} carrying the
              exit code when the command does not succeed
    """
    options = Options()
    try:
        options.parseOptions(argv)
    except usage.UsageError as e:
        sys.stderr.write(f'{options}\nfusedesc: {e}\n')
        return defer.fail(SystemExit(2))

    name = options.subCommand
    opts = options.subOptions
    out = FilePath(opts['out'])
    out.makedirs(ignoreExistingDirectory=True)
    logFile = open(out.child('run.log').path, 'a', encoding='utf-8')
    observer = log.FileLogObserver(logFile)
    log.addObserver(observer.emit)

    def dispatch():
        for key in ('dataset', 'checkpoint', 'baseline'):
            if key in opts:
                opts.pathOverride(key, key)
        cfg = RunConfig.fromFile(opts['config'], opts.overrides,
                                 opts['seed'])
        threads = threadCount(opts['threads'])
        log.msg(f'fusedesc {name}: seed={cfg.seed} threads={threads}')
        return COMMANDS[name](reactor, cfg, opts, out, threads)

    def close(result):
        log.removeObserver(observer.emit)
        logFile.close()
        return result

    d = defer.maybeDeferred(dispatch)
    d.addErrback(_exitCode)
    d.addBoth(close)
    return d


def run():
    task.react(main, [sys.argv[1:]])
