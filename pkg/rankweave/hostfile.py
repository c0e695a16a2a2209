"""Hostfiles & host endpoints.

A hostfile lists one host endpoint (`host[:port]`) per line; the line index
is the rank. As with MPI-style hostfiles, anything after the first
whitespace-separated token (e.g. `slots=4`) is carried along untouched.
Blank lines & `#` comments take no rank; a rewritten hostfile keeps them
in place, along with the original line endings.

Author: Andrew Ridyard.

License: GNU General Public License v3 or later.

Copyright (C): 2025.
"""

import ipaddress
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from .core import DEFAULT_PORT, HostfileError, RankOrder, RankOrderError

_logger = logging.getLogger(__name__)

_HOSTNAME = re.compile(
    r"^(?=.{1,253}$)[A-Za-z0-9_](?:[A-Za-z0-9_-]{0,61}[A-Za-z0-9_])?"
    r"(?:\.[A-Za-z0-9_](?:[A-Za-z0-9_-]{0,61}[A-Za-z0-9_])?)*\.?$"
)


@dataclass(frozen=True)
class Endpoint:
    """A UDP endpoint of an echo agent."""

    host: str
    port: int = DEFAULT_PORT

    def __str__(self) -> str:
        """`host:port`, bracketing IPv6 addresses."""
        host = f"[{self.host}]" if ":" in self.host else self.host
        return f"{host}:{self.port}"

    @classmethod
    def parse(cls, text: str, default_port: int = DEFAULT_PORT) -> "Endpoint":
        """Parse `host`, `host:port`, `[v6]` or `[v6]:port`.

        Raises:
            HostfileError: If the host or port is not valid.
        """
        text = text.strip()
        port: Optional[str] = None
        if text.startswith("["):
            host, _, rest = text[1:].partition("]")
            if rest:
                if not rest.startswith(":"):
                    raise HostfileError(f"Invalid endpoint '{text}'")
                port = rest[1:]
        elif text.count(":") == 1:
            host, port = text.split(":")
        else:
            host = text

        if not _valid_host(host):
            raise HostfileError(f"Invalid host in endpoint '{text}'")
        if port is None:
            return cls(host, default_port)
        if not port.isdigit() or not 0 < int(port) < 65536:
            raise HostfileError(f"Invalid port in endpoint '{text}'")
        return cls(host, int(port))


def _valid_host(host: str) -> bool:
    try:
        ipaddress.ip_address(host)
    except ValueError:
        return bool(_HOSTNAME.match(host))
    return True


def _is_host_line(raw: str) -> bool:
    line = raw.strip()
    return bool(line) and not line.startswith("#")


def _split_terminator(raw: str) -> tuple[str, str]:
    body = raw.rstrip("\r\n")
    return body, raw[len(body) :]


@dataclass(frozen=True)
class Hostfile:
    """Ordered host lines; rank `i` is `lines[i]`.

    `layout` holds every raw line of the source text, terminators included,
    so comments, blank lines & line endings survive a rewrite. It is empty
    for a hostfile built from bare host lines.
    """

    lines: tuple[str, ...]
    layout: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        """Validate endpoints & uniqueness.

        Raises:
            HostfileError: If the hostfile is empty, has an invalid endpoint
                or lists an endpoint twice.
        """
        if not self.lines:
            raise HostfileError("Hostfile is empty")
        if self.layout and len(self.lines) != sum(
            map(_is_host_line, self.layout)
        ):
            raise HostfileError("Host lines do not match the hostfile layout")
        seen = set()
        for line in self.lines:
            endpoint = str(Endpoint.parse(line.split(None, 1)[0]))
            if endpoint in seen:
                raise HostfileError(f"Duplicate host '{endpoint}'")
            seen.add(endpoint)

    def __len__(self) -> int:
        """Number of hosts."""
        return len(self.lines)

    def endpoints(self, default_port: int = DEFAULT_PORT) -> list[Endpoint]:
        """Parsed endpoints in rank order."""
        return [
            Endpoint.parse(line.split(None, 1)[0], default_port)
            for line in self.lines
        ]

    def reordered(self, order: RankOrder) -> "Hostfile":
        """Hostfile whose line `i` is the line of host `order.perm[i]`.

        Host lines move between the host slots of the layout; each slot
        keeps its own line terminator, and every other line stays put.

        Raises:
            RankOrderError: If the order length differs from the host count.
        """
        if order.n != len(self.lines):
            raise RankOrderError(
                f"Order has {order.n} ranks but hostfile has "
                f"{len(self.lines)} hosts"
            )
        lines = tuple(self.lines[p] for p in order.perm)
        if not self.layout:
            return Hostfile(lines)

        bodies = [
            _split_terminator(raw)[0]
            for raw in self.layout
            if _is_host_line(raw)
        ]
        moved = iter([bodies[p] for p in order.perm])
        layout = tuple(
            next(moved) + _split_terminator(raw)[1]
            if _is_host_line(raw)
            else raw
            for raw in self.layout
        )
        return Hostfile(lines, layout)

    def render(self) -> str:
        """Hostfile text, or one newline terminated line per host."""
        if self.layout:
            return "".join(self.layout)
        return "".join(f"{line}\n" for line in self.lines)


_RAW_LINE = re.compile(r"[^\r\n]*(?:\r\n|\r|\n)|[^\r\n]+\Z")


def parse_hostfile(text: str) -> Hostfile:
    """Parse hostfile text.

    Raises:
        HostfileError: On an invalid hostfile.
    """
    layout = tuple(_RAW_LINE.findall(text))
    lines = tuple(raw.strip() for raw in layout if _is_host_line(raw))
    return Hostfile(lines, layout)


def read_hostfile(path: Union[str, Path]) -> Hostfile:
    """Read a hostfile from disk, line endings untranslated.

    Raises:
        HostfileError: On an invalid hostfile.

        OSError: If the file cannot be read.
    """
    with open(path, "r", encoding="utf-8", newline="") as f:
        hostfile = parse_hostfile(f.read())
    _logger.debug(f"Read {len(hostfile)} hosts from {path}")
    return hostfile


def write_hostfile(path: Union[str, Path], hostfile: Hostfile) -> None:
    """Write `hostfile.render()` without translating line endings."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(hostfile.render())
