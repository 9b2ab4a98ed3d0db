"""Real-socket transport: stubs over localhost TCP."""

import socket
import struct
import threading
import time

from rio.client import Client, ClientConfig
from rio.devices import ECHO_XFORM, default_devices
from rio.kernel import RealKernel
from rio.server import Server, ServerConfig
from rio.wire import TcpEndpoint


def _free_port():
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    return port


def test_echodev_over_tcp_loopback():
    port = _free_port()
    ready = threading.Event()

    def serve():
        kernel = RealKernel()
        server = Server(kernel, default_devices(kernel), ServerConfig())
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(("127.0.0.1", port))
        listener.listen(1)
        ready.set()

        def accept():
            sock, _ = listener.accept()
            endpoint = TcpEndpoint(kernel, sock)
            endpoint.on_close = kernel.stop
            server.attach(endpoint)

        kernel.add_reader(listener, accept)
        kernel.run()
        listener.close()

    thread = threading.Thread(target=serve, daemon=True)
    thread.start()
    assert ready.wait(5.0)
    time.sleep(0.05)

    kernel = RealKernel()
    client = Client(kernel, ClientConfig())
    sock = socket.create_connection(("127.0.0.1", port), timeout=5.0)
    endpoint = TcpEndpoint(kernel, sock)
    session = client.connect(endpoint)

    async def drive():
        handle = await session.open("echodev")
        arg = client.alloc(24)
        client.arena.write(arg + 4, bytes(range(8)))
        result = await handle.ioctl(ECHO_XFORM, arg)
        blob = client.arena.read(arg, 24)
        await handle.close()
        await session.close()
        return result, blob

    result, blob = kernel.run(drive())
    endpoint.close()
    thread.join(timeout=5.0)
    assert result == 0
    assert struct.unpack_from("<I", blob, 0)[0] == 1
    assert blob[12:20] == bytes((~i) & 0xFF for i in range(8))
    assert not thread.is_alive()


def test_garbage_bytes_drop_the_connection_not_the_server():
    port = _free_port()
    ready = threading.Event()
    stopped = threading.Event()

    def serve():
        kernel = RealKernel()
        server = Server(kernel, default_devices(kernel), ServerConfig())
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(("127.0.0.1", port))
        listener.listen(2)
        ready.set()
        sessions = []

        def accept():
            sock, _ = listener.accept()
            endpoint = TcpEndpoint(kernel, sock)
            server.attach(endpoint)
            sessions.append(endpoint)
            if len(sessions) == 2:
                endpoint.on_close = kernel.stop

        kernel.add_reader(listener, accept)
        kernel.run()
        listener.close()
        stopped.set()

    thread = threading.Thread(target=serve, daemon=True)
    thread.start()
    assert ready.wait(5.0)
    time.sleep(0.05)

    # First connection sends garbage; the server must survive it.
    vandal = socket.create_connection(("127.0.0.1", port), timeout=5.0)
    vandal.sendall(b"\xff" * 64)
    time.sleep(0.2)
    vandal.close()

    # Second connection does real work, then closes to stop the server.
    kernel = RealKernel()
    client = Client(kernel, ClientConfig())
    sock = socket.create_connection(("127.0.0.1", port), timeout=5.0)
    endpoint = TcpEndpoint(kernel, sock)
    session = client.connect(endpoint)

    async def drive():
        handle = await session.open("echodev")
        arg = client.alloc(24)
        result = await handle.ioctl(ECHO_XFORM, arg)
        await session.close()
        return result

    assert kernel.run(drive()) == 0
    endpoint.close()
    assert stopped.wait(5.0)


def test_cli_client_reports_unreachable_server():
    from rio.cli import run_cli
    rc = run_cli(["client", "--host", "127.0.0.1", "--port", str(_free_port()),
                  "--device", "sensor", "--count", "1"])
    assert rc == 1
