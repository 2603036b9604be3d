"""Convert PyTorch checkpoints into the pipeline's TorchScript model files.

The pipeline loads self-contained TorchScript modules with pinned contracts:

* detector: float32 input ``(1, 3, S, S)`` in [0, 1], output candidate rows
  ``(N, 4 + num_classes)`` (a leading batch axis of 1 is tolerated);
* upscaler: float32 input ``(1, 3, H, W)`` in [0, 1], output ``(1, 3, sH, sW)``.

Export prefers scripting (keeps shapes dynamic) and falls back to tracing with
the smoke input. Every export runs a parity check: one random input through
the native module and the exported graph, with the max absolute deviation
written into the sidecar shape report.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import torch

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
PARITY_TOLERANCE = 1e-3
META_FILE = "export_meta.json"


class ExportError(Exception):
    """Checkpoint unloadable, graph unconvertible, or contract violated."""


class Target(Enum):
    DETECTOR = "detector"
    UPSCALER = "upscaler"


@dataclass(frozen=True)
class ExportSpec:
    checkpoint_path: str
    target: Target
    output_path: str
    input_size: int = 640  # detector smoke/trace input side
    scale: int = 4         # upscaler factor, checked against the output shape
    smoke_size: int = 64   # upscaler smoke/trace input side
    format_version: int = FORMAT_VERSION


@dataclass(frozen=True)
class ExportReport:
    output_path: str
    report_path: str
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    max_abs_deviation: float
    passed: bool


def load_checkpoint(path: str) -> torch.nn.Module:
    """Load a pickled ``nn.Module`` checkpoint in eval mode."""
    try:
        module = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ExportError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(module, torch.nn.Module):
        raise ExportError(
            f"checkpoint {path} holds {type(module).__name__}, expected a torch.nn.Module"
        )
    module.eval()
    return module


def _smoke_input(spec: ExportSpec) -> torch.Tensor:
    side = spec.input_size if spec.target is Target.DETECTOR else spec.smoke_size
    return torch.rand(1, 3, side, side)


def _validate_output(spec: ExportSpec, example: torch.Tensor, output: torch.Tensor) -> None:
    if spec.target is Target.DETECTOR:
        shape = tuple(output.shape)
        rows_ok = (output.dim() == 2 and shape[1] >= 5) or (
            output.dim() == 3 and shape[0] == 1 and shape[2] >= 5
        )
        if not rows_ok:
            raise ExportError(
                f"detector output shape {shape} does not match the (N, 4+classes) "
                f"candidate-row contract"
            )
    else:
        expected = (1, 3, example.shape[2] * spec.scale, example.shape[3] * spec.scale)
        if tuple(output.shape) != expected:
            raise ExportError(
                f"upscaler output shape {tuple(output.shape)} does not match "
                f"expected {expected} for scale {spec.scale}"
            )


def _convert(module: torch.nn.Module, example: torch.Tensor) -> torch.jit.ScriptModule:
    # check_trace is off: the exporter's own parity check below is the gate,
    # and it catches trace divergence with a reported deviation.
    try:
        return torch.jit.script(module)
    except Exception as script_exc:
        logger.info("scripting failed (%s); falling back to tracing", script_exc)
        try:
            with torch.no_grad():
                return torch.jit.trace(module, example, check_trace=False)
        except Exception as trace_exc:
            raise ExportError(
                f"cannot convert checkpoint graph: scripting failed with "
                f"[{script_exc}], tracing failed with [{trace_exc}]"
            ) from trace_exc


def export_model(spec: ExportSpec) -> ExportReport:
    """Export one checkpoint, verify parity, and write the shape report.

    A deviation above the tolerance marks the export failed (report.passed is
    False and the model file is removed); callers turn that into a nonzero
    exit.
    """
    module = load_checkpoint(spec.checkpoint_path)
    example = _smoke_input(spec)
    with torch.no_grad():
        native_out = module(example)
    if not isinstance(native_out, torch.Tensor):
        raise ExportError(
            f"checkpoint forward returned {type(native_out).__name__}, expected a tensor"
        )
    _validate_output(spec, example, native_out)

    scripted = _convert(module, example)
    output_path = Path(spec.output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": spec.format_version,
        "target": spec.target.value,
        "input_shape": list(example.shape),
        "output_shape": list(native_out.shape),
    }
    torch.jit.save(scripted, str(output_path),
                   _extra_files={META_FILE: json.dumps(meta)})

    reloaded = torch.jit.load(str(output_path), map_location="cpu")
    with torch.no_grad():
        exported_out = reloaded(torch.as_tensor(example))
    if tuple(exported_out.shape) != tuple(native_out.shape):
        output_path.unlink(missing_ok=True)
        raise ExportError(
            f"exported graph changed the output shape: native {tuple(native_out.shape)} "
            f"vs exported {tuple(exported_out.shape)}"
        )
    deviation = float((exported_out - native_out).abs().max())
    passed = deviation <= PARITY_TOLERANCE
    if not passed:
        logger.error("parity check failed: max abs deviation %.3e", deviation)
        output_path.unlink(missing_ok=True)

    report = ExportReport(
        output_path=str(output_path),
        report_path=str(output_path) + ".shapes.json",
        input_shape=tuple(example.shape),
        output_shape=tuple(native_out.shape),
        max_abs_deviation=deviation,
        passed=passed,
    )
    Path(report.report_path).write_text(json.dumps({
        "model": str(output_path),
        "target": spec.target.value,
        "format_version": spec.format_version,
        "input_shape": list(report.input_shape),
        "output_shape": list(report.output_shape),
        "max_abs_deviation": report.max_abs_deviation,
        "parity_tolerance": PARITY_TOLERANCE,
        "passed": report.passed,
    }, indent=2) + "\n", encoding="utf-8")
    return report


def read_embedded_meta(model_path: str) -> Optional[dict]:
    """Read the metadata pinned inside an exported model file."""
    extra = {META_FILE: ""}
    torch.jit.load(model_path, map_location="cpu", _extra_files=extra)
    raw = extra[META_FILE]
    return json.loads(raw) if raw else None
