"""Auto-imported in plot jobs (the shim directory leads PYTHONPATH).

Blocks outbound network connections unless the runner set
CHART_ALLOW_NETWORK=1: generated code must not fetch data at render time.
"""

import os

if os.environ.get("CHART_ALLOW_NETWORK") != "1":
    import socket

    def _blocked_connect(self, *args, **kwargs):
        raise OSError("network access is disabled for plot jobs")

    socket.socket.connect = _blocked_connect
    socket.socket.connect_ex = _blocked_connect
