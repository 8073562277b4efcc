"""Class-specific activation maps.

A map for class c is ReLU(sum_m n_m f^m) where n_m is the spatial mean of
d(logit_c)/d(f^m) over the retained third-conv-block features f.  Maps are
used two ways: at native conv resolution inside the training losses (never
upsampled or normalized there), and upsampled/normalized for visual export.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .model import ForwardPass

SALIENCY_GRAD_MODES = ("detached", "full")


@dataclass
class ClassActivationMap:
    values: Tensor          # (batch, *feature_extents), all >= 0
    class_id: int
    source: ForwardPass


def gradcam_weights(fp: ForwardPass, class_id: int, create_graph: bool = False) -> Tensor:
    """Per-channel weights: the spatial mean of d(logit_c)/d(features).

    Returns a (batch, channels) tensor.  With ``create_graph`` the weights
    stay graph-connected and can be differentiated further.
    """
    if class_id not in (0, 1):
        raise ContractError(f"class_id must be 0 or 1, got {class_id}")
    if not fp.logits.requires_grad or not fp.features.requires_grad:
        raise ContractError("forward pass was recorded without tape linkage; "
                            "rerun it outside no_grad()")
    score = ad.tsum(ad.getitem(fp.logits, (slice(None), class_id)))
    g = ad.grad(score, [fp.features], create_graph=create_graph)[0]
    spatial_axes = tuple(range(2, g.ndim))
    return ad.tmean(g, axis=spatial_axes)


def activation_map(fp: ForwardPass, class_id: int,
                   saliency_grad: str = "detached") -> ClassActivationMap:
    """ReLU of the weight-summed feature maps, at native conv resolution.

    ``saliency_grad`` picks how the channel weights enter the graph:
    "detached" treats them as constants (first-order training), "full" keeps
    them differentiable (second-order path).
    """
    if saliency_grad not in SALIENCY_GRAD_MODES:
        raise ContractError(f"saliency_grad must be one of {SALIENCY_GRAD_MODES}")
    full = saliency_grad == "full"
    n = gradcam_weights(fp, class_id, create_graph=full)
    if not full:
        n = ad.detach(n)
    r = fp.features.ndim - 2
    w = ad.reshape(n, n.shape + (1,) * r)
    values = ad.relu(ad.tsum(ad.mul(w, fp.features), axis=1))
    return ClassActivationMap(values=values, class_id=class_id, source=fp)


# ---------------------------------------------------------------------------
# export path (visualization only; never feeds a loss)
# ---------------------------------------------------------------------------

def _interp_axis(a: np.ndarray, axis: int, new: int) -> np.ndarray:
    old = a.shape[axis]
    if new == old:
        return a
    if old == 1:
        return np.repeat(a, new, axis=axis)
    pos = np.linspace(0.0, old - 1.0, new)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, old - 1)
    frac = (pos - lo).reshape([-1 if i == axis else 1 for i in range(a.ndim)])
    lo_vals = np.take(a, lo, axis=axis)
    hi_vals = np.take(a, hi, axis=axis)
    return lo_vals + (hi_vals - lo_vals) * frac.astype(a.dtype)


def upsample_for_export(cam: ClassActivationMap, target_extents) -> np.ndarray:
    """Multilinear (align-corners) interpolation to the target extents, then
    per-map renormalization to [0, 1] by the maximum (a zero map stays zero).

    Accepts a single map (no batch axis expected in ``cam.values``'s spatial
    part beyond the batch); returns one array per batch entry stacked.
    """
    target = tuple(int(t) for t in target_extents)
    vals = cam.values.data
    spatial = vals.shape[1:]
    if len(target) != len(spatial):
        raise ContractError(f"target rank {len(target)} != map rank {len(spatial)}")
    if any(t < s for t, s in zip(target, spatial)):
        raise ContractError(f"target extents {target} smaller than map extents {spatial}")
    out = vals.astype(np.float64)
    for i, t in enumerate(target):
        out = _interp_axis(out, axis=1 + i, new=t)
    peaks = out.reshape(out.shape[0], -1).max(axis=1)
    scale = np.where(peaks > 0, peaks, 1.0).reshape((-1,) + (1,) * len(target))
    return (out / scale).astype(vals.dtype)


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM from a [0, 1] 2D array."""
    if image.ndim != 2:
        raise ContractError(f"PGM export needs a 2D array, got shape {image.shape}")
    px = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(px.tobytes())


def export_saliency(upsampled: np.ndarray, base_path) -> list[str]:
    """Write one saliency map (no batch axis): 2D -> PGM; 3D -> raw f32 volume
    with a JSON sidecar plus a central-slice PGM preview."""
    base = Path(base_path)
    written: list[str] = []
    if upsampled.ndim == 2:
        p = base.with_suffix(".pgm")
        write_pgm(p, upsampled)
        written.append(str(p))
    elif upsampled.ndim == 3:
        raw = base.with_suffix(".f32")
        raw.write_bytes(np.ascontiguousarray(upsampled, dtype="<f4").tobytes())
        written.append(str(raw))
        slice_index = upsampled.shape[0] // 2
        preview = base.with_suffix(".preview.pgm")
        write_pgm(preview, upsampled[slice_index])
        written.append(str(preview))
        sidecar = base.with_suffix(".json")
        sidecar.write_text(json.dumps({
            "extents": list(upsampled.shape),
            "dtype": "float32",
            "byte_order": "little",
            "layout": "row-major",
            "preview_slice_index": slice_index,
        }, sort_keys=True))
        written.append(str(sidecar))
    else:
        raise ContractError(f"saliency export supports 2D/3D maps, got shape {upsampled.shape}")
    return written
