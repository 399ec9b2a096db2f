"""Generator for the inference-parity fixtures committed to the pipeline repo.

Produces, under a target directory:
  tiny_bmi_model.pt2   TorchScript artifact of a seeded tiny SE model
  parity_outputs.json reference outputs of the eager model on 32 seeded
                      inputs (plus the all-zero-tensor reference), with the
                      input recipe so the inputs are regenerated bit-exactly
  parity_image.png    deterministic RGB image for preprocessing parity
  parity_tensor.npz   this package's preprocessing output for that image

The evaluation side must reproduce parity_outputs within 1e-4 and the
preprocessing tensor within 1e-5 without importing this package.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import preprocess_image
from .export import export_model
from .model import BmiRegressor, ModelSpec, build_model

MODEL_SEED = 12345
INPUT_SEED = 2024
N_INPUTS = 32
INPUT_SIZE = 224


def _fixture_model() -> BmiRegressor:
    torch.manual_seed(MODEL_SEED)
    model = build_model(ModelSpec(backbone="tiny", se_reduction=4))
    return model.eval()


def fixture_inputs() -> np.ndarray:
    """Seeded standard-normal batch; the recipe is part of the fixture contract."""
    rng = np.random.default_rng(INPUT_SEED)
    return rng.standard_normal((N_INPUTS, 3, INPUT_SIZE, INPUT_SIZE)).astype(np.float32)


def parity_image() -> Image.Image:
    """Deterministic smooth RGB gradient, 192x144."""
    w, h = 192, 144
    xs = np.linspace(0, 255, w, dtype=np.float64)
    ys = np.linspace(0, 255, h, dtype=np.float64)
    r = np.tile(xs, (h, 1))
    g = np.tile(ys[:, None], (1, w))
    b = (r + g) / 2.0
    arr = np.stack([r, g, b], axis=2).round().astype(np.uint8)
    return Image.fromarray(arr, mode="RGB")


def make_parity_fixtures(out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = _fixture_model()
    artifact = export_model(model, out_dir / "tiny_bmi_model.pt2", input_size=INPUT_SIZE,
                            metadata={"fixture": True, "model_seed": MODEL_SEED})

    inputs = fixture_inputs()
    with torch.no_grad():
        outputs = model(torch.from_numpy(inputs)).reshape(-1).numpy()
        zero_out = model(torch.zeros(1, 3, INPUT_SIZE, INPUT_SIZE)).item()
    payload = {
        "input_recipe": {
            "generator": "numpy-pcg64",
            "seed": INPUT_SEED,
            "shape": [N_INPUTS, 3, INPUT_SIZE, INPUT_SIZE],
            "dtype": "float32",
            "distribution": "standard_normal",
        },
        "outputs": [float(v) for v in outputs],
        "zero_input_output": float(zero_out),
    }
    (out_dir / "parity_outputs.json").write_text(json.dumps(payload, indent=2),
                                                 encoding="utf-8")

    img = parity_image()
    img.save(out_dir / "parity_image.png")
    tensor = preprocess_image(img)
    np.savez_compressed(out_dir / "parity_tensor.npz", tensor=tensor)

    return {"artifact": str(artifact), "n_outputs": len(payload["outputs"])}
