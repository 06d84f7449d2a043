"""Command line interface: export-text and export-images.

Examples:

    xmre-export export-text --dataset train.jsonl --dataset dev.jsonl \
        --store store/ --out text.xmrf --max-len 128

    xmre-export export-images --dataset train.jsonl --images-dir data/images \
        --store store/ --out images.xmrf

By default the text command loads a pretrained bert-base-uncased and
the image command pretrained ResNet-50 weights, both of which need the
model hub or a local cache. For offline or testing use, --vocab plus
--random-init builds a randomly initialized encoder of the same shape
from a local vocabulary file.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from xmre_export import export as ex
from xmre_export.dataset import DatasetError, Instance, parse_dataset
from xmre_export.encoders import (
    EncodeError,
    ImageEncoder,
    TextEncoder,
    build_wordpiece_tokenizer,
    register_markers,
)
from xmre_export.store import EvidenceStore, StoreError

DEFAULT_TEXT_MODEL = "bert-base-uncased"


class UsageError(ValueError):
    pass


def _load_instances(paths: list[str]) -> list[Instance]:
    instances: list[Instance] = []
    for path in paths:
        instances.extend(parse_dataset(path))
    return instances


def _random_text_encoder(vocab_file: str, seed: int, *, layers: int, heads: int) -> TextEncoder:
    import torch
    from transformers import BertConfig, BertModel

    tokenizer = build_wordpiece_tokenizer(vocab_file)
    register_markers(tokenizer)
    config = BertConfig(
        vocab_size=len(tokenizer),
        hidden_size=768,
        num_hidden_layers=layers,
        num_attention_heads=heads,
        intermediate_size=512,
        max_position_embeddings=512,
        pad_token_id=tokenizer.pad_token_id,
    )
    torch.manual_seed(seed)
    model = BertModel(config)
    return TextEncoder(
        tokenizer, model, identifier=f"random-init-bert(vocab={Path(vocab_file).name}, seed={seed})"
    )


def _random_image_encoder(seed: int) -> ImageEncoder:
    import torch
    from torchvision.models import resnet50

    torch.manual_seed(seed)
    model = resnet50(weights=None)
    return ImageEncoder(model, identifier=f"random-init-resnet50(seed={seed})")


def _build_text_encoder(args) -> TextEncoder:
    if args.random_init:
        if not args.vocab:
            raise UsageError("--random-init requires --vocab")
        return _random_text_encoder(args.vocab, args.seed, layers=args.layers, heads=args.heads)
    return TextEncoder.from_pretrained(args.model)


def _build_image_encoder(args) -> ImageEncoder:
    if args.random_init:
        return _random_image_encoder(args.seed)
    return ImageEncoder.from_pretrained()


def cmd_export_text(args) -> int:
    instances = _load_instances(args.dataset)
    store = EvidenceStore(args.store) if args.store else None
    encoder = _build_text_encoder(args)
    result = ex.export_text_features(
        instances, store, encoder, args.out, max_len=args.max_len
    )
    manifest = ex.ExportManifest(
        datasets=[str(Path(p)) for p in args.dataset],
        store=str(Path(args.store)) if args.store else None,
        outputs={"text": str(Path(args.out))},
        encoders={
            "text": {"identifier": encoder.identifier, **ex.ExportManifest.framework_versions()}
        },
        preprocessing=ex.ExportManifest.text_preprocessing(args.max_len),
        records={"text": result.records_written},
        skipped=result.skipped,
    )
    manifest.write(args.manifest or f"{args.out}.manifest.json")
    print(
        f"wrote {result.records_written} text records to {args.out}"
        f" ({len(result.skipped)} skipped)"
    )
    for skip in result.skipped:
        print(f"  skipped {skip.subject}: {skip.reason}")
    return 0


def cmd_export_images(args) -> int:
    instances = _load_instances(args.dataset)
    store = EvidenceStore(args.store) if args.store else None
    encoder = _build_image_encoder(args)
    sources = ex.gather_instance_images(instances, args.images_dir, store)
    result = ex.export_image_features(sources, encoder, args.out)
    manifest = ex.ExportManifest(
        datasets=[str(Path(p)) for p in args.dataset],
        store=str(Path(args.store)) if args.store else None,
        outputs={"images": str(Path(args.out))},
        encoders={
            "image": {"identifier": encoder.identifier, **ex.ExportManifest.framework_versions()}
        },
        preprocessing=ex.ExportManifest.image_preprocessing(),
        records={"images": result.records_written},
        skipped=result.skipped,
    )
    manifest.write(args.manifest or f"{args.out}.manifest.json")
    print(
        f"wrote {result.records_written} image records to {args.out}"
        f" ({len(result.skipped)} skipped)"
    )
    for skip in result.skipped:
        print(f"  skipped {skip.subject}: {skip.reason}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmre-export",
        description="Export full-scale feature files for the xmre pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--dataset",
        action="append",
        required=True,
        help="JSON-lines dataset file; repeat for multiple splits",
    )
    common.add_argument("--store", help="evidence store directory")
    common.add_argument("--out", required=True, help="output feature file path")
    common.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
    common.add_argument(
        "--random-init",
        action="store_true",
        help="randomly initialized encoder instead of pretrained weights",
    )
    common.add_argument("--seed", type=int, default=0, help="seed for --random-init")

    p = sub.add_parser(
        "export-text", parents=[common], help="encode sentences and evidence texts"
    )
    p.add_argument("--max-len", type=int, default=128, help="maximum encoded length")
    p.add_argument("--model", default=DEFAULT_TEXT_MODEL, help="pretrained model name")
    p.add_argument("--vocab", help="local vocabulary file for --random-init")
    p.add_argument("--layers", type=int, default=2, help="encoder layers for --random-init")
    p.add_argument("--heads", type=int, default=4, help="attention heads for --random-init")
    p.set_defaults(func=cmd_export_text)

    p = sub.add_parser(
        "export-images", parents=[common], help="encode content, crop, and retrieved images"
    )
    p.add_argument("--images-dir", help="directory holding the dataset's content images")
    p.set_defaults(func=cmd_export_images)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"xmre-export: usage error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, StoreError, EncodeError, ex.ExportError, OSError) as exc:
        print(f"xmre-export: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
