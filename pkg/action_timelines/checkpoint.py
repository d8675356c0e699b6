import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np
import torch

from .config import RunConfig
from .dataset import atomic_write
from .exceptions import FormatError, TruncatedFileError
from .network import StreamedDetector

__all__ = ["CHECKPOINT_MAGIC", "CHECKPOINT_VERSION", "save_checkpoint", "read_checkpoint", "load_detector"]

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ACTCKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: Union[str, Path], detector: StreamedDetector, config: RunConfig) -> None:
    """Write every parameter block of ``detector`` plus the config echo

    Layout: magic, u32 version, u32 echo length, utf-8 echo, u32 block count,
    then per block (sorted by name) u16 name length, name, u32 ndim, u32 dims
    and the float32 little-endian values. Identical parameters give identical bytes.
    """
    echo = config.to_ini().encode("utf-8")
    state = detector.state_dict()
    with atomic_write(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<II", CHECKPOINT_VERSION, len(echo)))
        handle.write(echo)
        handle.write(struct.pack("<I", len(state)))
        for name in sorted(state):
            values = state[name].detach().cpu().numpy().astype("<f4")
            encoded = name.encode("utf-8")
            handle.write(struct.pack("<H", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<I", values.ndim))
            handle.write(struct.pack("<{}I".format(values.ndim), *values.shape))
            handle.write(values.tobytes(order="C"))
    logger.debug("saved %d parameter blocks to %s", len(state), path)


class _Reader:
    def __init__(self, path: Path, data: bytes) -> None:
        self.path = path
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise TruncatedFileError(self.path, "needs {} bytes at offset {}".format(size, self.offset))
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: Union[str, Path]) -> tuple[dict[str, torch.Tensor], str]:
    """Parse a checkpoint into its named float32 blocks and the config echo"""
    path = Path(path)
    reader = _Reader(path, path.read_bytes())
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError(path, "not a checkpoint (bad magic)")
    version, echo_length = reader.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise FormatError(path, "unsupported checkpoint version {}".format(version))
    echo = reader.take(echo_length).decode("utf-8")
    (count,) = reader.unpack("<I")
    blocks = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<H")
        name = reader.take(name_length).decode("utf-8")
        (ndim,) = reader.unpack("<I")
        shape = reader.unpack("<{}I".format(ndim))
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        values = np.frombuffer(reader.take(size * 4), dtype="<f4").reshape(shape)
        blocks[name] = torch.from_numpy(values.astype(np.float32))
    if reader.offset != len(reader.data):
        raise FormatError(path, "{} trailing bytes".format(len(reader.data) - reader.offset))
    return blocks, echo


def load_detector(path: Union[str, Path]) -> tuple[StreamedDetector, RunConfig]:
    """Rebuild the detector a checkpoint was saved from"""
    blocks, echo = read_checkpoint(path)
    config = RunConfig.from_ini_text(echo, str(path))
    detector = StreamedDetector(config.model)
    try:
        detector.load_state_dict(blocks)
    except RuntimeError as error:
        raise FormatError(path, "parameters do not fit the echoed model: {}".format(error)) from error
    detector.eval()
    return detector, config
