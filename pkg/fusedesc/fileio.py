"""
ASCII PLY point clouds and binary PPM (P6) images
"""
import numpy as np

from fusedesc.error import ContractError, ParseError
from fusedesc.image import Image


_plyProperties = ('x', 'y', 'z', 'red', 'green', 'blue')
_plyTypes = {
    'char', 'uchar', 'short', 'ushort', 'int', 'uint', 'float', 'double',
    'int8', 'uint8', 'int16', 'uint16', 'int32', 'uint32', 'float32',
    'float64',
}


def _colorBytes(colors):
    return np.clip(np.rint(np.asarray(colors) * 255.0), 0, 255).astype(int)


def writePLY(points, colors):
    """
    @param points: (N, 3) positions, written with 9 significant digits
    @param colors: (N, 3) colors in [0, 1], written as bytes
    @rtype: C{bytes}
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rgb = _colorBytes(colors).reshape(-1, 3)
    if len(rgb) != len(points):
        raise ContractError('One color per point is required')
    lines = [
        'ply',
        'format ascii 1.0',
        f'element vertex {len(points)}',
        'property float x',
        'property float y',
        'property float z',
        'property uchar red',
        'property uchar green',
        'property uchar blue',
        'end_header',
    ]
    for p, c in zip(points, rgb):
        lines.append('%.9g %.9g %.9g %d %d %d' % (p[0], p[1], p[2],
                                                  c[0], c[1], c[2]))
    return ('\n'.join(lines) + '\n').encode('ascii')


def _lines(data):
    """
    Yields (offset, line) for every newline terminated line
    """
    offset = 0
    while offset < len(data):
        end = data.find(b'\n', offset)
        if end == -1:
            yield offset, data[offset:]
            return
        yield offset, data[offset:end]
        offset = end + 1


def readPLY(data):
    """
    Parses an ASCII PLY file with one vertex element holding at least the
    x, y, z, red, green and blue properties

    @type data: C{bytes}
    @returns: (points (N, 3), colors (N, 3) in [0, 1])
    """
    lines = _lines(data)
    try:
        offset, first = next(lines)
    except StopIteration:
        raise ParseError('Empty PLY file', 0)
    if first.strip() != b'ply':
        raise ParseError('Missing PLY magic', offset)

    count = None
    props = []
    sawFormat = False
    for offset, raw in lines:
        try:
            words = raw.decode('ascii').split()
        except UnicodeDecodeError:
            raise ParseError('Non-ASCII PLY header', offset)
        if not words or words[0] in ('comment', 'obj_info'):
            continue
        if words[0] == 'end_header':
            break
        if words[0] == 'format':
            if words[1:] != ['ascii', '1.0']:
                raise ParseError('Only ASCII 1.0 PLY files are supported',
                                 offset)
            sawFormat = True
        elif words[0] == 'element':
            if len(words) != 3 or words[1] != 'vertex' or count is not None:
                raise ParseError('Expected a single vertex element', offset)
            try:
                count = int(words[2])
            except ValueError:
                raise ParseError('Bad vertex count', offset)
            if count < 0:
                raise ParseError('Bad vertex count', offset)
        elif words[0] == 'property':
            if count is None or len(words) != 3 or words[1] not in _plyTypes:
                raise ParseError('Malformed property', offset)
            props.append(words[2])
        else:
            raise ParseError(f'Unexpected header keyword "{words[0]}"',
                             offset)
    else:
        raise ParseError('Missing end_header', len(data))

    if not sawFormat or count is None:
        raise ParseError('Incomplete PLY header', offset)
    missing = [p for p in _plyProperties if p not in props]
    if missing:
        raise ParseError('Missing properties: ' + ', '.join(missing), offset)
    cols = [props.index(p) for p in _plyProperties]

    rows = np.zeros((count, len(props)))
    n = 0
    for offset, raw in lines:
        if n == count:
            if raw.strip():
                raise ParseError('Trailing data after vertices', offset)
            continue
        words = raw.split()
        if not words:
            continue
        if len(words) != len(props):
            raise ParseError(
                f'Expected {len(props)} values, found {len(words)}', offset)
        try:
            rows[n] = [float(w) for w in words]
        except ValueError:
            raise ParseError('Bad vertex value', offset)
        n += 1
    if n != count:
        raise ParseError(f'Truncated body: {n} of {count} vertices',
                         len(data))

    table = rows[:, cols]
    rgb = table[:, 3:]
    if np.any(rgb < 0) or np.any(rgb > 255):
        raise ParseError('Color values must lie in [0, 255]', len(data))
    return table[:, :3], rgb / 255.0


def writePPM(image):
    """
    @type image: L{Image}
    @rtype: C{bytes}
    """
    px = _colorBytes(image.pixels).astype(np.uint8)
    header = f'P6\n{image.width} {image.height}\n255\n'.encode('ascii')
    return header + px.tobytes()


def readPPM(data):
    """
    Parses a binary P6 image with maxval 255. Images whose dimensions are
    not multiples of 8 are center-cropped.

    @rtype: L{Image}
    """
    if data[:2] != b'P6':
        raise ParseError('Missing P6 magic', 0)
    fields = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(data):
            raise ParseError('Truncated PPM header', pos)
        c = data[pos:pos + 1]
        if c == b'#':
            end = data.find(b'\n', pos)
            if end == -1:
                raise ParseError('Truncated PPM comment', pos)
            pos = end + 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and data[pos:pos + 1].isdigit():
                pos += 1
            if start == pos:
                raise ParseError('Expected a number in PPM header', start)
            fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ParseError('Expected whitespace after PPM header', pos)
    pos += 1

    width, height, maxval = fields
    if maxval != 255:
        raise ParseError(f'Unsupported maxval {maxval}', pos - 1)
    if width < 8 or height < 8:
        raise ParseError(f'Image too small: {width}x{height}', pos - 1)
    size = width * height * 3
    if len(data) - pos < size:
        raise ParseError(f'Truncated pixel data: {len(data) - pos} of '
                         f'{size} bytes', len(data))
    px = np.frombuffer(data, dtype=np.uint8, count=size, offset=pos)
    return Image.centerCropped(px.reshape(height, width, 3) / 255.0)
