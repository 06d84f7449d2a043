"""Pretrained encoder wrappers.

Text: a BERT-family masked-language model whose final hidden states are
exported one row per subword position (width = hidden size, 768 for the
base models). The four entity marker tokens are registered as special
tokens so they are never split and their positions survive subword
tokenization.

Images: a ResNet-50 trunk; each image is resized so its short side is
256, center-cropped to 224x224, normalized with the standard ImageNet
statistics, and reduced by global average pooling over the final
convolutional stage to a 2048-wide vector.

Both encoders run in eval mode under no_grad, so identical inputs
produce identical outputs.
"""

from __future__ import annotations

import io
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from xmre_export.dataset import MARKERS

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
RESIZE_SHORT_SIDE = 256
CROP_SIZE = 224


class EncodeError(ValueError):
    """An input cannot be encoded (for example an undecodable image)."""


def build_wordpiece_tokenizer(vocab_file: str | Path, *, lowercase: bool = True):
    """Build a WordPiece tokenizer from a plain vocab file, offline.

    The file holds one token per line; line order defines ids. It must
    contain [PAD], [UNK], [CLS], [SEP], and [MASK]. Sequences are
    wrapped as [CLS] ... [SEP].
    """

    from tokenizers import Tokenizer, normalizers, pre_tokenizers, processors
    from tokenizers.models import WordPiece
    from transformers import PreTrainedTokenizerFast

    tokens = [t for t in Path(vocab_file).read_text(encoding="utf-8").splitlines() if t]
    vocab = {t: i for i, t in enumerate(tokens)}
    if len(vocab) != len(tokens):
        dupes = sorted(t for t, n in Counter(tokens).items() if n > 1)
        raise EncodeError(
            f"vocab file {vocab_file} repeats {', '.join(dupes)}; duplicate lines "
            "leave id gaps that collide with the marker tokens added later"
        )
    for required in ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"):
        if required not in vocab:
            raise EncodeError(f"vocab file {vocab_file} lacks required token {required}")
    backend = Tokenizer(WordPiece(vocab, unk_token="[UNK]"))
    backend.normalizer = normalizers.BertNormalizer(lowercase=lowercase)
    backend.pre_tokenizer = pre_tokenizers.BertPreTokenizer()
    backend.post_processor = processors.TemplateProcessing(
        single="[CLS] $A [SEP]",
        pair="[CLS] $A [SEP] $B [SEP]",
        special_tokens=[("[CLS]", vocab["[CLS]"]), ("[SEP]", vocab["[SEP]"])],
    )
    return PreTrainedTokenizerFast(
        tokenizer_object=backend,
        unk_token="[UNK]",
        pad_token="[PAD]",
        cls_token="[CLS]",
        sep_token="[SEP]",
        mask_token="[MASK]",
    )


def register_markers(tokenizer, model=None) -> int:
    """Add the four entity markers as never-split special tokens.

    When a model is given and its embedding table is smaller than the
    grown vocabulary, the table is resized so the new ids are valid.
    Returns the number of tokens added.
    """

    added = tokenizer.add_special_tokens({"additional_special_tokens": list(MARKERS)})
    if model is not None:
        table = model.get_input_embeddings()
        if table is not None and table.num_embeddings < len(tokenizer):
            model.resize_token_embeddings(len(tokenizer))
    return added


@dataclass(frozen=True)
class EncodedText:
    matrix: np.ndarray  # (length, hidden) float32
    e1_pos: int | None
    e2_pos: int | None
    cls_pos: int
    length: int


class TextEncoder:
    def __init__(self, tokenizer, model, *, identifier: str, device: str = "cpu"):
        self.tokenizer = tokenizer
        self.model = model.to(device).eval()
        self.identifier = identifier
        self.device = device
        self.hidden_size = model.config.hidden_size
        ids = tokenizer.convert_tokens_to_ids(list(MARKERS))
        if any(i is None or i == tokenizer.unk_token_id for i in ids):
            raise EncodeError(
                "entity markers are not registered as special tokens; "
                "call register_markers(tokenizer, model) first"
            )
        self._marker_ids = dict(zip(MARKERS, ids))

    @classmethod
    def from_pretrained(cls, name: str, *, device: str = "cpu") -> "TextEncoder":
        from transformers import AutoModel, AutoTokenizer

        tokenizer = AutoTokenizer.from_pretrained(name)
        model = AutoModel.from_pretrained(name)
        register_markers(tokenizer, model)
        return cls(tokenizer, model, identifier=name, device=device)

    def _forward(self, input_ids: list[int]) -> np.ndarray:
        ids = torch.tensor([input_ids], dtype=torch.long, device=self.device)
        mask = torch.ones_like(ids)
        with torch.no_grad():
            out = self.model(input_ids=ids, attention_mask=mask)
        return out.last_hidden_state[0].cpu().numpy().astype(np.float32, copy=False)

    def _positions_of(self, input_ids: list[int], marker: str) -> int:
        marker_id = self._marker_ids[marker]
        occurrences = [i for i, t in enumerate(input_ids) if t == marker_id]
        if len(occurrences) != 1:
            raise EncodeError(
                f"marker {marker} occurs {len(occurrences)} times after tokenization"
            )
        return occurrences[0]

    def encode_marked_tokens(self, tokens: list[str]) -> EncodedText:
        """Encode a pre-tokenized, marker-bearing sentence.

        Marker positions refer to post-subword indices; index 0 is the
        sequence-summary ([CLS]) position added by the tokenizer.
        """

        enc = self.tokenizer(tokens, is_split_into_words=True, add_special_tokens=True)
        input_ids = enc["input_ids"]
        e1 = self._positions_of(input_ids, "[E1]")
        e2 = self._positions_of(input_ids, "[E2]")
        matrix = self._forward(input_ids)
        return EncodedText(matrix=matrix, e1_pos=e1, e2_pos=e2, cls_pos=0, length=len(input_ids))

    def encode_text(self, text: str) -> EncodedText:
        """Encode a raw evidence string; only the CLS position applies."""

        enc = self.tokenizer(text, add_special_tokens=True)
        input_ids = enc["input_ids"]
        matrix = self._forward(input_ids)
        return EncodedText(matrix=matrix, e1_pos=None, e2_pos=None, cls_pos=0, length=len(input_ids))

    def token_at(self, ids_index: int, input_ids: list[int]) -> str:
        return self.tokenizer.convert_ids_to_tokens([input_ids[ids_index]])[0]

    def encoded_length(self, tokens_or_text) -> int:
        if isinstance(tokens_or_text, str):
            return len(self.tokenizer(tokens_or_text, add_special_tokens=True)["input_ids"])
        return len(
            self.tokenizer(tokens_or_text, is_split_into_words=True, add_special_tokens=True)[
                "input_ids"
            ]
        )


class ImageEncoder:
    def __init__(self, model=None, *, identifier: str = "resnet50", device: str = "cpu"):
        import torch.nn as nn
        from torchvision import transforms
        from torchvision.models import resnet50

        if model is None:
            model = resnet50(weights=None)
        self.trunk = nn.Sequential(*list(model.children())[:-1]).to(device).eval()
        self.identifier = identifier
        self.device = device
        self.width = 2048
        self.transform = transforms.Compose(
            [
                transforms.Resize(RESIZE_SHORT_SIDE),
                transforms.CenterCrop(CROP_SIZE),
                transforms.ToTensor(),
                transforms.Normalize(mean=IMAGENET_MEAN, std=IMAGENET_STD),
            ]
        )

    @classmethod
    def from_pretrained(cls, *, device: str = "cpu") -> "ImageEncoder":
        from torchvision.models import ResNet50_Weights, resnet50

        model = resnet50(weights=ResNet50_Weights.IMAGENET1K_V2)
        return cls(model, identifier="resnet50/IMAGENET1K_V2", device=device)

    def preprocess(self, data: bytes) -> torch.Tensor:
        try:
            with Image.open(io.BytesIO(data)) as img:
                rgb = img.convert("RGB")
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            raise EncodeError(f"undecodable image: {exc}") from exc
        return self.transform(rgb)

    def encode_bytes(self, data: bytes) -> np.ndarray:
        """One 2048-wide float32 vector per image."""

        tensor = self.preprocess(data).unsqueeze(0).to(self.device)
        with torch.no_grad():
            pooled = self.trunk(tensor)
        return pooled.reshape(-1).cpu().numpy().astype(np.float32, copy=False)
