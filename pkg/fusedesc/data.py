"""
Synthetic colored scenes, fragment pairs with ground truth motion, and the
pinhole renderer that gives each fragment its image.
"""
import json

import numpy as np
from scipy.spatial.transform import Rotation
from twisted.python import log
from twisted.python.filepath import FilePath

from fusedesc import fileio
from fusedesc.config import CameraIntrinsics, DatasetConfig, SceneConfig
from fusedesc.error import (BehindCameraError, ConstructionError,
                            ContractError, EmptyTensorError, ParseError)
from fusedesc.image import Image
from fusedesc.registration import RigidTransform, applyTransform


PALETTE = np.array([
    [0.85, 0.15, 0.15],
    [0.95, 0.85, 0.20],
    [0.20, 0.45, 0.90],
    [0.20, 0.75, 0.30],
    [0.60, 0.25, 0.75],
    [0.95, 0.55, 0.10],
    [0.10, 0.75, 0.80],
    [0.90, 0.40, 0.65],
])

BACKGROUND = 0.5

#  local (u, v, 0) samples -> floor, wall x = 0, wall y = 0
_planeFrames = [
    np.eye(3),
    np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
    np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]),
]


class Scene:
    """
    @ivar points: (N, 3) positions including noise
    @ivar colors: (N, 3) colors in [0, 1]
    @ivar labels: primitive index of every point
    @ivar clean: positions before noise
    """

    def __init__(self, points, colors, labels, clean=None):
        self.points = points
        self.colors = colors
        self.labels = labels
        self.clean = points if clean is None else clean

    def __len__(self):
        return len(self.points)


def _planeSamples(rng, n, side):
    uv = rng.uniform(0.0, side, (n, 2))
    return np.column_stack([uv, np.zeros(n)])


def _boxSamples(rng, n, size):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-size / 2, size / 2, (n, 2))
    p = np.empty((n, 3))
    axis = face // 2
    side = np.where(face % 2, size / 2, -size / 2)
    for a in range(3):
        rest = [b for b in range(3) if b != a]
        m = axis == a
        p[m, a] = side[m]
        p[m, rest[0]] = uv[m, 0]
        p[m, rest[1]] = uv[m, 1]
    return p


def _sphereSamples(rng, n, radius):
    v = rng.normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def generateScene(cfg=None):
    """
    Samples points on planes, boxes and spheres. Every primitive has its
    own color. In C{ambiguous} texture mode primitives of one kind share the
    same local samples, so they are congruent and only color tells them
    apart.

    @type cfg: L{SceneConfig}
    @rtype: L{Scene}
    """
    if cfg is None:
        cfg = SceneConfig()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.points_per_primitive
    side = cfg.extent
    shared = {}

    def local(kind, sampler, size):
        if cfg.texture == 'ambiguous':
            if kind not in shared:
                shared[kind] = sampler(rng, n, size)
            return shared[kind]
        return sampler(rng, n, size)

    parts = []
    for k in range(cfg.planes):
        frame = _planeFrames[k % 3]
        lift = (k // 3) * side / 2
        offset = frame @ np.array([0.0, 0.0, lift])
        parts.append(local('plane', _planeSamples, side) @ frame.T + offset)

    size = side * 0.2
    for k in range(cfg.boxes):
        center = np.append(rng.uniform(0.25 * side, 0.75 * side, 2),
                           size / 2 + 0.05)
        parts.append(local('box', _boxSamples, size) + center)

    radius = side * 0.1
    for k in range(cfg.spheres):
        center = np.append(rng.uniform(0.25 * side, 0.75 * side, 2),
                           radius + 0.05)
        parts.append(local('sphere', _sphereSamples, radius) + center)

    clean = np.concatenate(parts)
    labels = np.repeat(np.arange(len(parts)), n)
    colors = PALETTE[labels % len(PALETTE)]
    points = clean
    if cfg.noise > 0:
        points = clean + rng.normal(0.0, cfg.noise, clean.shape)
    return Scene(points, colors, labels, clean)


# ------------------------------------------------------------------------
#                                Camera
#

def projectPoint(p, cam):
    """
    Pinhole projection u = fx X/Z + cx, v = fy Y/Z + cy of a camera frame
    point

    @returns: (u, v) in pixels
    """
    X, Y, Z = (float(c) for c in p)
    if Z <= 0:
        raise BehindCameraError(f'Point at depth {Z} is behind the camera')
    return cam.fx * X / Z + cam.cx, cam.fy * Y / Z + cam.cy


def backProject(u, v, Z, cam):
    return np.array([(u - cam.cx) * Z / cam.fx, (v - cam.cy) * Z / cam.fy, Z])


def lookAt(eye, target, up=(0.0, 0.0, 1.0)):
    """
    World to camera transform for a camera at C{eye} looking at C{target}.
    The camera frame has z forward, x right and y down.

    @rtype: L{RigidTransform}
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return RigidTransform(R, -R @ eye)


def renderImage(points, colors, camPose, cam):
    """
    Z-buffered point splatting. Each visible point paints the square of
    side 2 * splat_radius + 1 around its pixel; the nearest point wins every
    pixel and ties go to the lower point index.

    @type camPose: L{RigidTransform} mapping world to camera frame
    @type cam: L{CameraIntrinsics}
    @rtype: L{Image}; C{noVisiblePoints} is set when nothing was drawn
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyTensorError('Cannot render an empty cloud')
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    w, h = cam.width, cam.height
    pixels = np.full((h, w, 3), BACKGROUND)

    pc = applyTransform(points, camPose)
    front = np.nonzero(pc[:, 2] > 1e-9)[0]
    z = pc[front, 2]
    px = np.floor(cam.fx * pc[front, 0] / z + cam.cx).astype(np.int64)
    py = np.floor(cam.fy * pc[front, 1] / z + cam.cy).astype(np.int64)

    r = cam.splat_radius
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    sx = np.concatenate([px + dx for _, dx in offs])
    sy = np.concatenate([py + dy for dy, _ in offs])
    sz = np.tile(z, len(offs))
    src = np.tile(front, len(offs))
    inside = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    sx, sy, sz, src = sx[inside], sy[inside], sz[inside], src[inside]

    image = Image(pixels)
    if len(src) == 0:
        log.msg('Renderer warning: no visible points')
        image.noVisiblePoints = True
        return image

    pix = sy * w + sx
    order = np.lexsort((src, sz, pix))
    _, first = np.unique(pix[order], return_index=True)
    win = order[first]
    pixels[sy[win], sx[win]] = colors[src[win]]
    return Image(pixels)


def fragmentCamera(points, cam):
    """
    Pose of a camera looking at the centroid of C{points} from above and in
    front, at the configured distance
    """
    center = np.asarray(points).mean(axis=0)
    direction = np.array([-0.4, -1.0, 0.9])
    direction /= np.linalg.norm(direction)
    return lookAt(center + cam.distance * direction, center)


def _effectiveCamera(cam):
    if cam.coverage >= 1.0:
        return cam
    return cam.replace(fx=cam.fx / cam.coverage, fy=cam.fy / cam.coverage)


# ------------------------------------------------------------------------
#                                 Pairs
#

class RegistrationPair:
    """
    Two overlapping fragments of one scene. C{gt} maps source coordinates
    onto target coordinates.
    """

    def __init__(self, srcPoints, srcColors, srcImage, dstPoints, dstColors,
                 dstImage, gt, overlap, scene=0, tag='standard'):
        self.srcPoints = srcPoints
        self.srcColors = srcColors
        self.srcImage = srcImage
        self.dstPoints = dstPoints
        self.dstColors = dstColors
        self.dstImage = dstImage
        self.gt = gt
        self.overlap = overlap
        self.scene = scene
        self.tag = tag


def voxelOverlap(a, b, voxelSize):
    """
    |A n B| / min(|A|, |B|) over occupied voxels of two clouds in one frame
    """
    va = np.unique(np.floor(a / voxelSize).astype(np.int64), axis=0)
    vb = np.unique(np.floor(b / voxelSize).astype(np.int64), axis=0)
    if len(va) == 0 or len(vb) == 0:
        return 0.0
    both = np.concatenate([va, vb])
    shared = len(both) - len(np.unique(both, axis=0))
    return shared / min(len(va), len(vb))


def randomMotion(rng, magnitude):
    """
    Rotation about a random axis by up to C{magnitude} degrees, with a
    translation that shrinks to zero together with the rotation bound
    """
    if magnitude <= 0:
        return RigidTransform.identity()
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0.0, magnitude))
    R = Rotation.from_rotvec(axis * angle).as_matrix()
    t = rng.uniform(-0.5, 0.5, 3) * min(1.0, magnitude / 90.0)
    return RigidTransform(R, t)


def makePair(scene, overlap, magnitude=30.0, seed=0, voxelSize=0.05,
             cam=None, tolerance=0.05):
    """
    Crops two x-slabs of equal width whose shift is bisected until their
    voxel overlap is within C{tolerance} of the request, moves the source
    slab by a random rigid motion and renders both.

    @rtype: L{RegistrationPair}
    """
    if not 0 < overlap <= 1:
        raise ContractError('Overlap must lie in (0, 1]')
    if cam is None:
        cam = CameraIntrinsics()
    rng = np.random.default_rng(seed)
    pts = scene.points
    x = pts[:, 0]
    x0, x1 = x.min(), x.max()
    width = 0.6 * (x1 - x0)

    def slabs(shift):
        a = (x >= x0) & (x <= x0 + width)
        b = (x >= x0 + shift) & (x <= x0 + shift + width)
        return a, b

    def measure(shift):
        a, b = slabs(shift)
        return voxelOverlap(pts[a], pts[b], voxelSize)

    lo, hi = 0.0, width
    best, bestErr = 0.0, abs(measure(0.0) - overlap)
    for _ in range(40):
        mid = (lo + hi) / 2
        got = measure(mid)
        if abs(got - overlap) < bestErr:
            best, bestErr = mid, abs(got - overlap)
        if got > overlap:
            lo = mid
        else:
            hi = mid
    if bestErr > tolerance:
        raise ConstructionError(
            f'Overlap {overlap:.2f} unreachable for this scene '
            f'(closest {overlap + bestErr:.2f} or {overlap - bestErr:.2f})')

    a, b = slabs(best)
    measured = measure(best)
    motion = randomMotion(rng, magnitude)
    gt = motion.inverse()

    view = _effectiveCamera(cam)
    srcPose = fragmentCamera(pts[a], cam)
    dstPose = fragmentCamera(pts[b], cam)
    srcImage = renderImage(pts[a], scene.colors[a], srcPose, view)
    dstImage = renderImage(pts[b], scene.colors[b], dstPose, view)

    return RegistrationPair(
        applyTransform(pts[a], motion), scene.colors[a], srcImage,
        pts[b], scene.colors[b], dstImage, gt, measured)


def synthesize(sceneCfg=None, datasetCfg=None, cam=None, voxelSize=0.05):
    """
    Builds the synthetic dataset: C{pairs_per_scene} pairs for each scene,
    plus the low overlap split

    @returns: C{list} of L{RegistrationPair}
    """
    if sceneCfg is None:
        sceneCfg = SceneConfig()
    if datasetCfg is None:
        datasetCfg = DatasetConfig()
    root = np.random.SeedSequence(sceneCfg.seed)
    sceneSeeds = root.spawn(datasetCfg.scenes)
    lowPerScene = [
        datasetCfg.low_overlap_pairs // datasetCfg.scenes
        + (s < datasetCfg.low_overlap_pairs % datasetCfg.scenes)
        for s in range(datasetCfg.scenes)
    ]
    pairs = []
    for s, seq in enumerate(sceneSeeds):
        sceneSeed, pairSeq = seq.spawn(2)
        scene = generateScene(sceneCfg.replace(
            seed=int(sceneSeed.generate_state(1)[0])))
        rng = np.random.default_rng(pairSeq)
        lo, hi = datasetCfg.overlap
        plan = [('standard', lo, hi)] * datasetCfg.pairs_per_scene
        plan += [('low_overlap', 0.1, 0.3)] * lowPerScene[s]
        for tag, lo, hi in plan:
            pair = makePair(scene, float(rng.uniform(lo, hi)),
                            datasetCfg.transform_magnitude,
                            int(rng.integers(2 ** 31)), voxelSize, cam)
            pair.scene = s
            pair.tag = tag
            pairs.append(pair)
    log.msg(f'Synthesized {len(pairs)} pairs over {datasetCfg.scenes} scenes')
    return pairs


# ------------------------------------------------------------------------
#                               Manifests
#

def writeDataset(pairs, directory):
    """
    Writes fragments as PLY, images as PPM and a manifest.json listing
    every pair, its files, ground truth and overlap
    """
    root = FilePath(directory)
    if not root.exists():
        root.makedirs()
    entries = []
    for n, pair in enumerate(pairs):
        name = f'pair_{n:04d}'
        files = {}
        for side in ('src', 'dst'):
            pts = getattr(pair, side + 'Points')
            col = getattr(pair, side + 'Colors')
            img = getattr(pair, side + 'Image')
            cloud, picture = f'{name}_{side}.ply', f'{name}_{side}.ppm'
            root.child(cloud).setContent(fileio.writePLY(pts, col))
            root.child(picture).setContent(fileio.writePPM(img))
            files[side + '_cloud'] = cloud
            files[side + '_image'] = picture
        entry = {
            'id': name,
            'scene': int(pair.scene),
            'tag': pair.tag,
            'overlap': float(pair.overlap),
            'gt': pair.gt.asDict(),
        }
        entry.update(files)
        entries.append(entry)
    manifest = {'pairs': entries}
    root.child('manifest.json').setContent(
        (json.dumps(manifest, sort_keys=True, indent=1) + '\n')
        .encode('utf-8'))
    return root.child('manifest.json')


def readDataset(directory):
    """
    @returns: C{list} of L{RegistrationPair} in manifest order
    """
    root = FilePath(directory)
    try:
        manifest = json.loads(root.child('manifest.json').getContent())
        entries = manifest['pairs']
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise ParseError(f'Unreadable dataset manifest: {e}', 0)
    pairs = []
    for entry in entries:
        sides = {}
        for side in ('src', 'dst'):
            pts, col = fileio.readPLY(
                root.child(entry[side + '_cloud']).getContent())
            img = fileio.readPPM(
                root.child(entry[side + '_image']).getContent())
            sides[side] = (pts, col, img)
        pairs.append(RegistrationPair(
            *sides['src'], *sides['dst'],
            RigidTransform.fromDict(entry['gt']), entry['overlap'],
            entry['scene'], entry['tag']))
    return pairs
