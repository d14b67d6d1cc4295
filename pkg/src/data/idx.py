"""Reader for the IDX binary format used by MNIST-style datasets.

Layout (big-endian): two zero bytes, a dtype byte, a dimension count byte,
one u32 per dimension, then the row-major payload.
"""
import logging
import struct
from pathlib import Path

import numpy as np

from src.data.datasets import LabeledDataset
from src.errors import DataError, IdxFormatError

logger = logging.getLogger(__name__)

IDX_DTYPES = {
    0x08: np.dtype('>u1'),
    0x09: np.dtype('>i1'),
    0x0B: np.dtype('>i2'),
    0x0C: np.dtype('>i4'),
    0x0D: np.dtype('>f4'),
    0x0E: np.dtype('>f8'),
}


def read_idx(raw):
    """Parse IDX bytes into an array with its declared shape and dtype."""
    if len(raw) < 4:
        raise IdxFormatError('file shorter than the 4-byte magic', len(raw))
    zero_a, zero_b, dtype_code, ndim = struct.unpack_from('>BBBB', raw, 0)
    if zero_a or zero_b:
        raise IdxFormatError('magic must start with two zero bytes', 0)
    if dtype_code not in IDX_DTYPES:
        raise IdxFormatError(f'unknown dtype byte 0x{dtype_code:02x}', 2)
    if ndim == 0:
        raise IdxFormatError('dimension count must be at least 1', 3)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError(f'header declares {ndim} dimensions but the file ends early', len(raw))
    dims = struct.unpack_from(f'>{ndim}I', raw, 4)
    dtype = IDX_DTYPES[dtype_code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = len(raw) - header_end
    if payload < expected:
        raise IdxFormatError(f'payload truncated: {payload} of {expected} bytes', len(raw))
    if payload > expected:
        raise IdxFormatError(f'{payload - expected} trailing bytes after payload', header_end + expected)
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header_end).reshape(dims)


def idx_load(images_path, labels_path):
    """Load paired IDX image and label files; images are scaled into [0, 1]."""
    images = read_idx(Path(images_path).read_bytes())
    labels = read_idx(Path(labels_path).read_bytes())
    if labels.ndim != 1:
        raise IdxFormatError(f'label file must be 1-D, got {labels.ndim} dimensions', 3)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f'{images.shape[0]} images but {labels.shape[0]} labels', 4)

    if images.dtype.kind == 'u' and images.dtype.itemsize == 1:
        pixels = images.astype(np.float32) / 255.0
    else:
        pixels = images.astype(np.float32)
        if pixels.size and (pixels.min() < 0 or pixels.max() > 1):
            raise DataError('non-byte IDX images must already lie in [0, 1]')
    if pixels.ndim == 3:
        pixels = pixels[:, None, :, :]
    logger.info('loaded %d IDX images of shape %s from %s', len(pixels), pixels.shape[1:], images_path)
    return LabeledDataset(pixels, labels.astype(np.int64), 'image')

