"""CRC-64/XZ (reflected ECMA-182 polynomial)."""

import numpy as np

from ._jit import njit

_POLY = np.uint64(0xC96C5795D7870F42)


def _make_table() -> np.ndarray:
    table = np.zeros(256, dtype=np.uint64)
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ 0xC96C5795D7870F42 if crc & 1 else crc >> 1
        table[i] = crc
    return table


_TABLE = _make_table()


@njit
def _crc_update(crc, data, table):
    for i in range(data.shape[0]):
        crc = table[(crc ^ np.uint64(data[i])) & np.uint64(0xFF)] ^ (crc >> np.uint64(8))
    return crc


class Crc64:
    """Incremental CRC-64/XZ; ``Crc64().update(b"123456789").digest()`` is 0x995DC9BBDF1939FA."""

    def __init__(self):
        self._crc = np.uint64(0xFFFFFFFFFFFFFFFF)

    def update(self, data) -> "Crc64":
        buf = np.frombuffer(memoryview(data).cast("B"), dtype=np.uint8)
        if buf.size:
            self._crc = np.uint64(_crc_update(self._crc, buf, _TABLE))
        return self

    def digest(self) -> int:
        return int(self._crc ^ np.uint64(0xFFFFFFFFFFFFFFFF))


def crc64(data) -> int:
    return Crc64().update(data).digest()
