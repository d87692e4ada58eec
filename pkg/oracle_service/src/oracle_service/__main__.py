"""Serve a checkpoint: python -m oracle_service --checkpoint victim.bin"""

import argparse

import uvicorn

from .app import create_app
from .model import VictimModel


def main() -> None:
    parser = argparse.ArgumentParser(prog="oracle-service")
    parser.add_argument("--checkpoint", required=True, help="victim checkpoint file")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8470)
    parser.add_argument(
        "--debug-logits", action="store_true",
        help="expose logits in classification responses (harness validation only)",
    )
    args = parser.parse_args()
    model = VictimModel.load(args.checkpoint)
    app = create_app(model, debug=args.debug_logits)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")


if __name__ == "__main__":
    main()
