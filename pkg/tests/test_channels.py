import unittest

from tornado import iostream, tcpclient

from kettle import channels
from tests import assert_is_not_none


async def _reverse(payload: bytes) -> bytes:
    return payload[::-1]


class InProcessTransportTests(unittest.IsolatedAsyncioTestCase):
    async def test_exchange_calls_endpoint(self) -> None:
        async with channels.InProcessTransport(_reverse) as transport:
            self.assertEqual(b'cba', await transport.exchange(b'abc'))


class SocketTransportTests(unittest.IsolatedAsyncioTestCase):
    async def asyncSetUp(self) -> None:
        await super().asyncSetUp()
        self.transport = channels.SocketTransport(_reverse)
        self.addAsyncCleanup(self.transport.close)

    async def test_exchange_over_loopback(self) -> None:
        self.assertIsNone(self.transport.port)
        self.assertEqual(b'olleh', await self.transport.exchange(b'hello'))
        self.assertIsNotNone(self.transport.port)

    async def test_multiple_frames_share_a_connection(self) -> None:
        for payload in (b'first', b'', b'\x00' * 70_000, b'last'):
            self.assertEqual(
                payload[::-1], await self.transport.exchange(payload)
            )

    async def test_oversized_frame_closes_the_connection(self) -> None:
        await self.transport.start()
        port = assert_is_not_none(self.transport.port)
        stream = await tcpclient.TCPClient().connect(channels.LOOPBACK, port)
        self.addCleanup(stream.close)
        with self.assertLogs('kettle.channels', 'ERROR'):
            await stream.write(
                channels.FRAME_HEADER.pack(channels.MAX_FRAME_SIZE + 1)
            )
            with self.assertRaises(iostream.StreamClosedError):
                await stream.read_bytes(1)

    async def test_close_is_idempotent(self) -> None:
        await self.transport.exchange(b'x')
        await self.transport.close()
        await self.transport.close()
