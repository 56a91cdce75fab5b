"""Message transports between the confidential-build actors

A transport delivers one request payload to an endpoint and returns
the endpoint's response.  [InProcessTransport][] calls the endpoint
directly; [SocketTransport][] runs the endpoint behind a tornado TCP
server on the loopback interface so that messages really cross a
socket.  Frames on the socket are a 4-byte big-endian length followed
by the payload.

"""

import struct
import types
import typing

from tornado import iostream, netutil, tcpclient, tcpserver

from kettle import errors, util

Endpoint = typing.Callable[[bytes], typing.Awaitable[bytes]]

FRAME_HEADER = struct.Struct('>I')
MAX_FRAME_SIZE = 64 * 1024 * 1024
LOOPBACK = '127.0.0.1'


class Transport(typing.Protocol):
    async def exchange(self, payload: bytes) -> bytes: ...

    async def close(self) -> None: ...


TransportFactory = typing.Callable[[Endpoint], Transport]


class _TransportContext:
    async def close(self) -> None:  # pragma: nocover
        raise NotImplementedError

    async def __aenter__(self) -> typing.Self:
        return self

    async def __aexit__(
        self,
        exc_type: type[BaseException] | None,
        exc_val: BaseException | None,
        exc_tb: types.TracebackType | None,
    ) -> None:
        await self.close()


class InProcessTransport(_TransportContext):
    def __init__(self, endpoint: Endpoint) -> None:
        self.endpoint = endpoint

    async def exchange(self, payload: bytes) -> bytes:
        return await self.endpoint(payload)

    async def close(self) -> None:
        pass


async def read_frame(stream: iostream.IOStream) -> bytes:
    header = await stream.read_bytes(FRAME_HEADER.size)
    (length,) = FRAME_HEADER.unpack(header)
    if length > MAX_FRAME_SIZE:
        raise errors.ProtocolError('frame', f'{length} byte frame')
    if not length:
        return b''
    return await stream.read_bytes(length)


async def write_frame(stream: iostream.IOStream, payload: bytes) -> None:
    await stream.write(FRAME_HEADER.pack(len(payload)) + payload)


class EndpointServer(tcpserver.TCPServer):
    """Serves one endpoint; each frame received is one request"""

    def __init__(self, endpoint: Endpoint) -> None:
        super().__init__()
        self.endpoint = endpoint
        self.logger = util.get_logger_for(self)

    async def handle_stream(
        self, stream: iostream.IOStream, address: tuple[str, int]
    ) -> None:
        self.logger.debug('connection from %s:%s', *address)
        try:
            while True:
                request = await read_frame(stream)
                response = await self.endpoint(request)
                await write_frame(stream, response)
        except iostream.StreamClosedError:
            pass
        except errors.KettleError as error:
            self.logger.error('closing connection from %s: %s', address, error)
            stream.close()


class SocketTransport(_TransportContext):
    """Loopback TCP transport

    The server is bound to an ephemeral port on first use.

    """

    def __init__(self, endpoint: Endpoint) -> None:
        self._server = EndpointServer(endpoint)
        self._stream: iostream.IOStream | None = None
        self.port: int | None = None

    async def start(self) -> None:
        sockets = netutil.bind_sockets(0, LOOPBACK)
        self.port = sockets[0].getsockname()[1]
        self._server.add_sockets(sockets)
        self._stream = await tcpclient.TCPClient().connect(
            LOOPBACK, self.port
        )

    async def exchange(self, payload: bytes) -> bytes:
        if self._stream is None:
            await self.start()
        stream = typing.cast(iostream.IOStream, self._stream)
        await write_frame(stream, payload)
        try:
            return await read_frame(stream)
        except iostream.StreamClosedError:
            raise errors.ProtocolError('response', 'closed stream') from None

    async def close(self) -> None:
        if self._stream is not None:
            self._stream.close()
            self._stream = None
        self._server.stop()
