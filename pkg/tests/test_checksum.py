from hypothesis import given
from hypothesis import strategies as st

from lwe_attack.checksum import Crc64, crc64


def test_check_value():
    assert crc64(b"123456789") == 0x995DC9BBDF1939FA


def test_empty():
    assert crc64(b"") == 0


def _bitwise_crc64(data: bytes) -> int:
    poly = 0xC96C5795D7870F42
    crc = 0xFFFFFFFFFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
    return crc ^ 0xFFFFFFFFFFFFFFFF


@given(st.binary(max_size=300))
def test_matches_bitwise_reference(data):
    assert crc64(data) == _bitwise_crc64(data)


@given(st.binary(max_size=200), st.binary(max_size=200))
def test_incremental_equals_one_shot(a, b):
    c = Crc64()
    c.update(a)
    c.update(b)
    assert c.digest() == crc64(a + b)


@given(st.binary(min_size=1, max_size=64), st.data())
def test_single_bit_flip_detected(data, draw):
    pos = draw.draw(st.integers(0, len(data) * 8 - 1))
    flipped = bytearray(data)
    flipped[pos // 8] ^= 1 << (pos % 8)
    assert crc64(bytes(flipped)) != crc64(data)
