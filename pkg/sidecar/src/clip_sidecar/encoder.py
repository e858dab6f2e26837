"""CLIP encoder wrapper producing L2-normalized float32 vectors."""
from __future__ import annotations

import numpy as np
import torch
from PIL import Image


class ClipEncoder:
    """Wraps a transformers CLIP model + processor behind two batch calls.

    Any encoder exposing ``dim``, ``encode_images``, and ``encode_texts``
    with the same contracts can stand in (tests use a tiny random one).
    """

    def __init__(self, model, processor):
        self.model = model.eval()
        self.processor = processor

    @property
    def dim(self) -> int:
        return int(self.model.config.projection_dim)

    @torch.no_grad()
    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        inputs = self.processor(images=images, return_tensors="pt")
        out = self.model.vision_model(pixel_values=inputs["pixel_values"])
        feats = self.model.visual_projection(out.pooler_output)
        return _normalize(feats)

    @torch.no_grad()
    def encode_texts(self, texts: list[str]) -> np.ndarray:
        inputs = self.processor(
            text=texts, return_tensors="pt", padding=True, truncation=True
        )
        out = self.model.text_model(
            input_ids=inputs["input_ids"], attention_mask=inputs["attention_mask"]
        )
        feats = self.model.text_projection(out.pooler_output)
        return _normalize(feats)


def _normalize(feats: torch.Tensor) -> np.ndarray:
    feats = feats / feats.norm(dim=-1, keepdim=True)
    return feats.cpu().numpy().astype(np.float32)


def load_encoder(model_id: str) -> ClipEncoder:
    """Load a CLIP checkpoint (e.g. openai/clip-vit-large-patch14, dim 768)."""
    from transformers import CLIPModel, CLIPProcessor

    model = CLIPModel.from_pretrained(model_id)
    processor = CLIPProcessor.from_pretrained(model_id)
    return ClipEncoder(model, processor)
