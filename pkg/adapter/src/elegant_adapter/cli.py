"""Command-line entry point for the adapter service."""

from __future__ import annotations

import argparse
import sys

from .config import AdapterConfig, AdapterConfigError
from .models import ModelLoadError
from .service import AdapterServer


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(prog="elegant-adapter", description=__doc__)
    parser.add_argument("--config", help="adapter config JSON")
    parser.add_argument("--host", default=None)
    parser.add_argument("--port", type=int, default=None)
    args = parser.parse_args(argv)
    try:
        config = AdapterConfig.from_file(args.config) if args.config else AdapterConfig()
        overrides = {}
        if args.host is not None:
            overrides["host"] = args.host
        if args.port is not None:
            overrides["port"] = args.port
        if overrides:
            data = {
                "models": dict(config.models),
                "device": config.device,
                "max_batch_size": config.max_batch_size,
                "host": overrides.get("host", config.host),
                "port": overrides.get("port", config.port),
                "embed_dim": config.embed_dim,
                "expected_token": config.expected_token,
            }
            config = AdapterConfig.from_json_dict(data)
        server = AdapterServer(config)
    except (AdapterConfigError, ModelLoadError) as exc:
        print(f"startup aborted: {exc}", file=sys.stderr)
        sys.exit(1)
    print(f"serving on {server.base_url}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.close()


if __name__ == "__main__":
    main()
