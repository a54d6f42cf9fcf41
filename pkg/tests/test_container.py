import numpy as np
from twisted.trial import unittest

from fusedesc import container
from fusedesc.error import ContainerError


class Version2Checkpoint (container.CheckpointContainer):
    _version = 2


class UnknownKind (container.Container):
    _kind = 9


class ContainerTest(unittest.TestCase):

    config = {'descriptor_dim': 4, 'voxel_size': 0.05}

    def entries(self):
        return [('w', np.arange(6.0).reshape(2, 3)),
                ('b', np.array([1.5])),
                ('empty', np.zeros((0, 3)))]

    def test_magic(self):
        c = container.CheckpointContainer(self.config, self.entries())
        self.assertTrue(c.rawData.startswith(b'FDSC'))

    def test_parse(self):
        raw = container.CheckpointContainer(self.config,
                                            self.entries()).rawData
        c = container.parseContainer(raw)
        self.assertIsInstance(c, container.CheckpointContainer)
        self.assertEqual(c.config, self.config)
        self.assertEqual(c.names(), ['w', 'b', 'empty'])
        self.assertEqual(c['w'].tolist(), [[0, 1, 2], [3, 4, 5]])
        self.assertEqual(c['empty'].shape, (0, 3))
        self.assertRaises(KeyError, lambda: c['missing'])

    def test_descriptor_kind(self):
        raw = container.DescriptorContainer({}, [('d', np.eye(2))]).rawData
        c = container.parseContainer(raw)
        self.assertIsInstance(c, container.DescriptorContainer)

    def test_body_aligned(self):
        raw = container.CheckpointContainer(self.config,
                                            self.entries()).rawData
        self.assertEqual(len(raw) % 8, 0)

    def test_bad_magic(self):
        raw = container.CheckpointContainer(self.config,
                                            self.entries()).rawData
        self.assertRaises(ContainerError, container.parseContainer,
                          b'XXXX' + raw[4:])

    def test_unsupported_version(self):
        raw = Version2Checkpoint(self.config, self.entries()).rawData
        e = self.assertRaises(ContainerError, container.parseContainer, raw)
        self.assertIn('version: 2', str(e))

    def test_unknown_kind(self):
        raw = UnknownKind(self.config, self.entries()).rawData
        self.assertRaises(ContainerError, container.parseContainer, raw)

    def test_truncated(self):
        raw = container.CheckpointContainer(self.config,
                                            self.entries()).rawData
        self.assertRaises(ContainerError, container.parseContainer,
                          raw[:-16])

    def test_truncated_header(self):
        self.assertRaises(ContainerError, container.parseContainer,
                          b'FDSC\x01')

    def test_config_mismatch(self):
        raw = container.CheckpointContainer(self.config,
                                            self.entries()).rawData
        expected = dict(self.config, descriptor_dim=8)
        e = self.assertRaises(ContainerError, container.parseContainer, raw,
                              expected)
        self.assertIn('descriptor_dim', str(e))

    def test_config_match(self):
        raw = container.CheckpointContainer(self.config,
                                            self.entries()).rawData
        c = container.parseContainer(raw, dict(self.config))
        self.assertEqual(c.config, self.config)
