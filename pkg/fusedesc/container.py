"""
Versioned binary containers for model checkpoints and descriptor files
"""
import json

import numpy as np

from fusedesc import marshal
from fusedesc.error import ContainerError, MarshallingError


MAGIC = b'FDSC'

#   magic(4)  kind  version  entry count  configuration JSON
_headerFormat = 'yyyyyyus'

#   name  shape  float64 data
_entryFormat = 'a(saur)'


class Container:
    """
    Abstract base class for binary containers

    @ivar config: C{dict} configuration stored in the header
    @ivar entries: C{list} of (name, numpy array) pairs in file order
    @ivar rawData: encoded bytes, set by L{_marshal} or on parse
    """
    _kind = 0
    _version = 1

    rawData = None

    def __init__(self, config, entries):
        self.config = dict(config)
        self.entries = [(name, np.asarray(arr, dtype=np.float64))
                        for name, arr in entries]
        self._marshal()

    def __getitem__(self, name):
        for n, arr in self.entries:
            if n == name:
                return arr
        raise KeyError(name)

    def names(self):
        return [n for n, _ in self.entries]

    def _marshal(self):
        """
        Encodes the container into binary format. The result is stored in
        C{self.rawData}
        """
        configJSON = json.dumps(self.config, sort_keys=True)

        binHeader = b''.join(marshal.marshal(
            _headerFormat,
            list(MAGIC) + [
                self._kind,
                self._version,
                len(self.entries),
                configJSON,
            ],
        )[1])

        headerPadding = marshal.pad['header'](len(binHeader))
        start = len(binHeader) + len(headerPadding)

        body = [
            (name, [int(d) for d in arr.shape], arr.reshape(-1))
            for name, arr in self.entries
        ]
        binBody = b''.join(marshal.marshal(_entryFormat, [body], start)[1])

        self.rawData = b''.join([binHeader, headerPadding, binBody])


class CheckpointContainer (Container):
    """
    Named model parameters plus the network configuration they belong to
    """
    _kind = 1


class DescriptorContainer (Container):
    """
    Descriptor matrix (M x C), voxel coordinates (M x 3) and voxel
    centroids (M x 3)
    """
    _kind = 2


_kinds = {
    1: CheckpointContainer,
    2: DescriptorContainer,
}


def parseContainer(rawData, expectedConfig=None):
    """
    Parses the binary representation of a container

    @type expectedConfig: C{dict} or C{None}
    @param expectedConfig: when given, the stored configuration must equal
                           it or L{ContainerError} is raised

    @rtype: L{Container} subclass instance
    """
    try:
        nbytes, hdr = marshal.unmarshal(_headerFormat, rawData, 0)
    except (MarshallingError, UnicodeDecodeError) as e:
        raise ContainerError(f'Malformed container header: {e}')

    if bytes(hdr[:4]) != MAGIC:
        raise ContainerError('Bad container magic')

    kind, version, count, configJSON = hdr[4:]

    if kind not in _kinds:
        raise ContainerError(f'Unknown container kind: {kind}')

    cls = _kinds[kind]

    if version != cls._version:
        raise ContainerError(f'Unsupported container version: {version}')

    try:
        config = json.loads(configJSON)
    except ValueError as e:
        raise ContainerError(f'Malformed configuration JSON: {e}')

    if expectedConfig is not None and config != expectedConfig:
        changed = sorted(
            k for k in set(config) | set(expectedConfig)
            if config.get(k) != expectedConfig.get(k)
        )
        raise ContainerError(
            'Container configuration does not match: ' + ', '.join(changed))

    offset = nbytes + len(marshal.pad['header'](nbytes))

    try:
        _, (body,) = marshal.unmarshal(_entryFormat, rawData, offset)
    except MarshallingError as e:
        raise ContainerError(f'Malformed container body: {e}')

    if len(body) != count:
        raise ContainerError(
            f'Container declares {count} entries, found {len(body)}')

    entries = []
    for name, shape, flat in body:
        if int(np.prod(shape)) != flat.size:
            raise ContainerError(f'Entry "{name}" has inconsistent shape')
        entries.append((name, flat.reshape(shape)))

    c = cls.__new__(cls)
    c.config = config
    c.entries = entries
    c.rawData = rawData
    return c
