"""Command-line entry: load one model and serve it."""

from __future__ import annotations

import logging
import sys

import click

from .models import ModelLoadError, ModelSpec
from .server import create_app


@click.command()
@click.option("--model", required=True, help="Hub name, local path, or hash:<dim>.")
@click.option("--port", default=8080, type=int)
@click.option("--host", default="127.0.0.1")
@click.option("--device", default="cpu")
@click.option("--normalize", is_flag=True, help="L2-normalize embeddings.")
@click.option("--max-batch", default=64, type=int)
def main(model: str, port: int, host: str, device: str, normalize: bool, max_batch: int):
    """Serve one embedding model behind /v1/embeddings."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    import uvicorn

    spec = ModelSpec(model_id=model, device=device, max_batch=max_batch, normalize=normalize)
    try:
        app = create_app(spec)
    except ModelLoadError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
