"""CLI entry point: run the sidecar with uvicorn."""
from __future__ import annotations

import argparse
from pathlib import Path

import uvicorn

from .app import SidecarConfig, create_app


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pasg-sidecar", description="segmentation sidecar service")
    parser.add_argument("--config", type=Path, default=None, help="JSON config file")
    parser.add_argument("--host", default=None)
    parser.add_argument("--port", type=int, default=None)
    parser.add_argument("--fake", action="store_true", help="force the deterministic fake model")
    args = parser.parse_args(argv)

    config = SidecarConfig.from_file(args.config) if args.config else SidecarConfig()
    if args.host is not None:
        config.host = args.host
    if args.port is not None:
        config.port = args.port
    if args.fake:
        config.mode = "fake"

    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="warning")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
