#!/usr/bin/env python3

"""
fusion_ablation.py

Trains two descriptor networks on scenes whose primitives are congruent and
differ only in color, one with image fusion and one without, and compares
their feature match recall on held out pairs. Afterwards the heat maps of
matched and unmatched point pairs are compared for the fused model.

Usage: fusion_ablation.py [seed]
"""

import sys

import numpy as np
from twisted.internet import defer, task

from fusedesc import data, evaluation, network, training
from fusedesc.config import (DatasetConfig, MetricConfig, NetworkConfig,
                             RansacConfig, SceneConfig, TrainConfig)


VOXEL = 0.05


def dataset(seed, pairs):
    scene = SceneConfig(texture='ambiguous', planes=1, boxes=2, spheres=2,
                        points_per_primitive=400, seed=seed)
    split = DatasetConfig(scenes=pairs // 5, pairs_per_scene=5)
    return data.synthesize(scene, split, voxelSize=VOXEL)


@defer.inlineCallbacks
def main(reactor, seed=0):

    train = dataset(seed, 40)
    held = dataset(seed + 1000, 20)
    print(f'{len(train)} training pairs, {len(held)} held out pairs')

    metrics = MetricConfig(tau1=0.1, tau2=0.05)
    ransac = RansacConfig(iterations=500)
    models = {}

    for fused in (True, False):
        cfg = NetworkConfig(voxel_size=VOXEL, with_fusion=fused,
                            point_features='ones')
        model = network.build(cfg, seed)
        report = training.train(model, train,
                                TrainConfig(epochs=20, learning_rate=0.05,
                                            seed=seed))
        print(f'fusion={fused}: final loss {report.epochLosses[-1]:.4f}')

        result, seconds = yield evaluation.evaluate(reactor, model, held,
                                                    metrics, ransac, 4)
        curve = dict(result['fmr_vs_tau2'])
        print(f'fusion={fused}: FMR {result["fmr"]:.3f} '
              f'(tau2=0.2: {curve[0.2]:.3f}), '
              f'{seconds * 1000:.1f} ms per cloud')
        models[fused] = model

    rng = np.random.default_rng(seed)
    same, other = evaluation.heatMapContrast(models[True], held, 20, rng)
    print(f'heat map similarity: matched {same:.3f}, unmatched {other:.3f}')


if __name__ == '__main__':
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    task.react(main, [seed])
