"""
Signature driven encoding of the values stored in containers.

A signature is a string of type codes, one complete type per value::

    y  byte             u  uint32          t  uint64
    d  double           s  UTF-8 string    r  float64 block
    aX array of X       (XY...)  struct

Everything is little-endian. Each value starts at a multiple of its type's
alignment and the gap before it is filled with nul bytes. Arrays record the
byte size of their elements, excluding the padding between the length and
the first element.
"""

import struct

import numpy as np

from fusedesc.error import MarshallingError


alignment = {
    'y': 1,
    'u': 4,
    't': 8,
    'd': 8,
    's': 4,   # length prefix
    'a': 4,   # length prefix
    '(': 8,
    'r': 8,   # element count
}

_fixed = {
    'y': struct.Struct('<B'),
    'u': struct.Struct('<I'),
    't': struct.Struct('<Q'),
    'd': struct.Struct('<d'),
}

_uint32 = _fixed['u']
_uint64 = _fixed['t']


def genpad(align):
    """
    @returns: a function mapping a byte offset to the nul bytes needed to
              reach the next multiple of C{align}
    """
    def padTo(offset):
        return b'\0' * (-offset % align)
    return padTo


pad = {code: genpad(n) for code, n in alignment.items()}
pad['header'] = genpad(8)


def _typeEnd(sig, i):
    """
    Index just past the complete type starting at C{sig[i]}
    """
    c = sig[i]
    if c == 'a':
        if i + 1 == len(sig):
            raise MarshallingError(f'Array without element type in "{sig}"')
        return _typeEnd(sig, i + 1)
    if c == '(':
        j = i + 1
        while j < len(sig) and sig[j] != ')':
            j = _typeEnd(sig, j)
        if j == len(sig):
            raise MarshallingError(f'Unbalanced signature "{sig}"')
        return j + 1
    if c not in alignment:
        raise MarshallingError(f'Unknown type code "{c}"')
    return i + 1


def genCompleteTypes(compoundSig):
    """
    Iterates over the top level complete types of a signature. Ex::
      "uuu"       => [ 'u', 'u',       'u' ]
      "u(uu)u"    => [ 'u', '(uu)',    'u' ]
      "a(sar)"    => [ 'a(sar)' ]
    """
    i = 0
    while i < len(compoundSig):
        end = _typeEnd(compoundSig, i)
        yield compoundSig[i:end]
        i = end


# ------------------------------------------------------------------------
#                                Encoding
#

class _Encoder:
    """
    Accumulates encoded chunks while tracking the absolute byte offset that
    alignment is computed from
    """

    def __init__(self, offset):
        self.offset = offset
        self.chunks = []

    def emit(self, chunk):
        if chunk:
            self.chunks.append(chunk)
            self.offset += len(chunk)

    def sequence(self, sig, values):
        types = list(genCompleteTypes(sig))
        if not isinstance(values, (list, tuple)) or \
                len(types) != len(values):
            raise MarshallingError(
                f'Signature "{sig}" describes {len(types)} values, '
                f'got {values!r}')
        for ct, v in zip(types, values):
            self.value(ct, v)

    def value(self, ct, var):
        code = ct[0]
        self.emit(pad[code](self.offset))

        if code in _fixed:
            try:
                self.emit(_fixed[code].pack(var))
            except struct.error as e:
                raise MarshallingError(
                    f'Cannot encode {var!r} as "{ct}": {e}')
        elif code == 's':
            self.string(var)
        elif code == 'r':
            self.reals(var)
        elif code == '(':
            self.sequence(ct[1:-1], var)
        else:
            self.array(ct[1:], var)

    def string(self, var):
        if not isinstance(var, str):
            raise MarshallingError(f'Required string. Received: {var!r}')
        if '\0' in var:
            raise MarshallingError(
                'Embedded nul characters are not allowed within strings')
        raw = var.encode('utf-8')
        self.emit(_uint32.pack(len(raw)) + raw + b'\0')

    def reals(self, var):
        try:
            flat = np.asarray(var, dtype='<f8').ravel()
        except (TypeError, ValueError) as e:
            raise MarshallingError(f'Cannot encode float block: {e}')
        self.emit(_uint64.pack(flat.size) + flat.tobytes())

    def array(self, elementSig, var):
        if not isinstance(var, (list, tuple)):
            raise MarshallingError(
                f'List or tuple required for array. Received: {var!r}')
        slot = len(self.chunks)
        self.emit(b'\0' * 4)
        self.emit(pad[elementSig[0]](self.offset))
        begin = self.offset
        for item in var:
            self.value(elementSig, item)
        size = self.offset - begin
        if size >= 2**32:
            raise MarshallingError('Array exceeds maximum encodable length')
        self.chunks[slot] = _uint32.pack(size)


def marshal(compoundSignature, variableList, startByte=0):
    """
    Encodes the values of C{variableList} according to C{compoundSignature}

    @param startByte: absolute offset of the first encoded byte, so that
                      data appended to an existing buffer stays aligned

    @returns: (number_of_encoded_bytes, list_of_binary_strings)
    """
    enc = _Encoder(startByte)
    enc.sequence(compoundSignature, variableList)
    return enc.offset - startByte, enc.chunks


# ------------------------------------------------------------------------
#                                Decoding
#

class _Decoder:

    def __init__(self, data, offset):
        self.data = data
        self.offset = offset

    def take(self, n, what):
        end = self.offset + n
        if end > len(self.data):
            raise MarshallingError(f'Truncated {what} at offset {self.offset}')
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def fixed(self, code):
        s = _fixed[code]
        return s.unpack(self.take(s.size, f'"{code}" value'))[0]

    def sequence(self, sig):
        return [self.value(ct) for ct in genCompleteTypes(sig)]

    def value(self, ct):
        code = ct[0]
        self.offset += len(pad[code](self.offset))

        if code in _fixed:
            return self.fixed(code)
        if code == 's':
            raw = self.take(self.fixed('u') + 1, 'string')
            try:
                return raw[:-1].decode('utf-8')
            except UnicodeDecodeError as e:
                raise MarshallingError(f'Invalid string: {e}')
        if code == 'r':
            count = self.fixed('t')
            block = self.take(8 * count, 'float block')
            return np.frombuffer(block, dtype='<f8').astype(np.float64)
        if code == '(':
            return self.sequence(ct[1:-1])
        return self.array(ct[1:])

    def array(self, elementSig):
        size = self.fixed('u')
        self.offset += len(pad[elementSig[0]](self.offset))
        end = self.offset + size
        if end > len(self.data):
            raise MarshallingError(f'Truncated array at offset {self.offset}')
        values = []
        while self.offset < end:
            values.append(self.value(elementSig))
        if self.offset != end:
            raise MarshallingError('Invalid array encoding')
        return values


def unmarshal(compoundSignature, data, offset=0):
    """
    Decodes the values described by C{compoundSignature} from C{data}

    @param offset: absolute position of the first value within C{data}

    @returns: (number_of_bytes_decoded, list_of_values)
    """
    dec = _Decoder(data, offset)
    values = dec.sequence(compoundSignature)
    return dec.offset - offset, values
