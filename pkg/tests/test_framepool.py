import time

import pytest

from pyretalk.framepool import FramePool


def slow_square(index, value):
    time.sleep(0.01 * (5 - index))
    return value * value


@pytest.mark.asyncio
async def test_run_keeps_order():
    pool = FramePool(workers=4)
    assert await pool.run(slow_square, [1, 2, 3, 4, 5]) == [1, 4, 9, 16, 25]


def test_map():
    pool = FramePool(workers=2)
    assert pool.map(lambda index, value: (index, value), ['a', 'b']) == [(0, 'a'), (1, 'b')]
    assert pool.map(slow_square, []) == []
