import zlib

import numpy as np
import pytest
import torch
from PIL import Image

from clip_sidecar.encoder import ClipEncoder

IMAGE_SIZE = 32
MAX_LEN = 16
VOCAB = 99


class TinyProcessor:
    """Minimal stand-in for CLIPProcessor: fixed-size pixel tensors and a
    deterministic crc-based tokenizer (ids 3.. to keep bos/eos distinct)."""

    def __call__(self, images=None, text=None, return_tensors="pt", padding=True, truncation=True):
        if images is not None:
            arrs = [
                np.asarray(img.convert("RGB").resize((IMAGE_SIZE, IMAGE_SIZE)), dtype=np.float32) / 255.0
                for img in images
            ]
            pix = torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous()
            return {"pixel_values": pix}
        ids_rows = []
        for t in text:
            words = t.split()[: MAX_LEN - 2]
            ids = [1] + [3 + zlib.crc32(w.encode()) % (VOCAB - 3) for w in words] + [2]
            ids_rows.append(ids)
        width = max(len(r) for r in ids_rows)
        input_ids = torch.zeros((len(ids_rows), width), dtype=torch.long)
        mask = torch.zeros((len(ids_rows), width), dtype=torch.long)
        for i, row in enumerate(ids_rows):
            input_ids[i, : len(row)] = torch.tensor(row)
            mask[i, : len(row)] = 1
        return {"input_ids": input_ids, "attention_mask": mask}


def tiny_clip_model():
    from transformers import CLIPConfig, CLIPModel, CLIPTextConfig, CLIPVisionConfig

    text_cfg = CLIPTextConfig(
        hidden_size=32,
        intermediate_size=64,
        num_hidden_layers=2,
        num_attention_heads=2,
        max_position_embeddings=MAX_LEN,
        vocab_size=VOCAB,
        bos_token_id=1,
        eos_token_id=2,
    )
    vision_cfg = CLIPVisionConfig(
        hidden_size=32,
        intermediate_size=64,
        num_hidden_layers=2,
        num_attention_heads=2,
        image_size=IMAGE_SIZE,
        patch_size=16,
    )
    cfg = CLIPConfig(
        text_config=text_cfg.to_dict(), vision_config=vision_cfg.to_dict(), projection_dim=24
    )
    torch.manual_seed(1234)
    return CLIPModel(cfg)


@pytest.fixture(scope="session")
def encoder():
    return ClipEncoder(tiny_clip_model(), TinyProcessor())


def save_test_png(path, seed: int, size=(40, 30)) -> str:
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
    Image.fromarray(arr, "RGB").save(path, "PNG")
    return str(path)
