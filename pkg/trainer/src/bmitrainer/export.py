"""Single-file artifact export for the inference runtime.

Artifacts are exported programs (`torch.export`, .pt2 files): one
self-contained file that the evaluation side loads without any model-building
code. The batch dimension is exported as dynamic; the spatial input size is
fixed at export time. Export always round-trips the artifact and checks
outputs against the eager model before it is considered valid.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch

from .model import BmiRegressor

ROUNDTRIP_TOLERANCE = 1e-6
MAX_BATCH = 65536
META_FILE = "bmitrainer_meta.json"


class ExportError(RuntimeError):
    pass


def export_model(
    model: BmiRegressor,
    path: str | Path,
    input_size: int = 224,
    metadata: dict | None = None,
) -> Path:
    """Export the model as a single .pt2 artifact.

    Raises ExportError when the reloaded artifact disagrees with the eager
    model beyond ROUNDTRIP_TOLERANCE on a probe batch.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model = model.eval()

    example = torch.zeros(2, 3, input_size, input_size)
    batch = torch.export.Dim("batch", min=1, max=MAX_BATCH)
    exported = torch.export.export(model, (example,), dynamic_shapes=({0: batch},))

    meta = {"backbone": model.spec.backbone, "se_reduction": model.spec.se_reduction,
            "pretrained_init": model.spec.pretrained, "input_size": input_size}
    if metadata:
        meta.update(metadata)
    torch.export.save(exported, path, extra_files={META_FILE: json.dumps(meta)})

    probe = torch.randn(4, 3, input_size, input_size,
                        generator=torch.Generator().manual_seed(0))
    reloaded = load_artifact(path)
    with torch.no_grad():
        eager_out = model(probe)
        exported_out = reloaded(probe)
    drift = (eager_out - exported_out).abs().max().item()
    if drift > ROUNDTRIP_TOLERANCE:
        raise ExportError(f"export round-trip drift {drift} exceeds {ROUNDTRIP_TOLERANCE}")
    return path


def load_artifact(path: str | Path) -> torch.nn.Module:
    exported = torch.export.load(str(path))
    return exported.module()


def read_artifact_metadata(path: str | Path) -> dict:
    extra = {META_FILE: ""}
    torch.export.load(str(path), extra_files=extra)
    raw = extra[META_FILE]
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    return json.loads(raw) if raw else {}
