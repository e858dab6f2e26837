import argparse
import logging
import sys

from .batch import run
from .encoder import load_encoder


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="clip-embed-sidecar",
        description="Embed a manifest of images/texts with CLIP and write MMEB shards",
    )
    parser.add_argument("--manifest", required=True, help="JSONL of {id, kind, path|text}")
    parser.add_argument("--out", required=True, help="output directory for shards")
    parser.add_argument("--model", default="openai/clip-vit-large-patch14")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--shard-size", type=int, default=100_000)
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    encoder = load_encoder(args.model)
    n = run(args.manifest, encoder, args.out, batch_size=args.batch_size, shard_size=args.shard_size)
    if n == 0:
        print("no entries embedded", file=sys.stderr)
        return 1
    print(f"wrote {n} vectors (dim {encoder.dim}) to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
