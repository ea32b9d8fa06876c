"""Named stack configurations and the published parameter tables they are audited against."""

from __future__ import annotations

from .errors import ConfigError
from .predcode_stack import AuditReport, StackConfig

PRESETS = {
    "mnist-paper": dict(height=64, width=64, a_channels=(1, 48, 96, 192), r_channels=(1, 48, 96, 192)),
    "kitti-paper": dict(height=128, width=160, a_channels=(3, 48, 96, 192), r_channels=(3, 48, 96, 192)),
    # mse, not e_mean: the L1-type loss collapses to an all-black predictor on sparse frames
    "desk": dict(height=16, width=16, a_channels=(1, 16), r_channels=(1, 16), loss="mse"),
}


def preset_config(name: str, model: str = "M18", **overrides) -> StackConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
    base.update(overrides)
    return StackConfig(model=model, **base)


# Per-layer kernel rows of the 64x64x1 four-layer table, verbatim.
_MNIST_RGC = {
    ("f", 0): (3, 3, 52, 1), ("g", 0): (3, 3, 51, 1), ("Â", 0): (3, 3, 1, 1),
    ("downsample", 0): (3, 3, 2, 48),
    ("f", 1): (3, 3, 288, 48), ("g", 1): (3, 3, 240, 48), ("Â", 1): (3, 3, 48, 48),
    ("downsample", 1): (3, 3, 96, 96),
    ("f", 2): (3, 3, 576, 96), ("g", 2): (3, 3, 480, 96), ("Â", 2): (3, 3, 96, 96),
    ("downsample", 2): (3, 3, 192, 192),
    ("f", 3): (3, 3, 768, 192), ("g", 3): (3, 3, 576, 192), ("Â", 3): (3, 3, 192, 192),
}
_MNIST_CLSTM = {
    ("f", 0): (3, 3, 51, 1), ("g", 0): (3, 3, 51, 1), ("i", 0): (3, 3, 51, 1),
    ("o", 0): (3, 3, 51, 1), ("Â", 0): (3, 3, 1, 1), ("downsample", 0): (3, 3, 2, 48),
    ("f", 1): (3, 3, 240, 48), ("g", 1): (3, 3, 240, 48), ("i", 1): (3, 3, 240, 48),
    ("o", 1): (3, 3, 240, 48), ("Â", 1): (3, 3, 48, 48), ("downsample", 1): (3, 3, 96, 96),
    ("f", 2): (3, 3, 480, 96), ("g", 2): (3, 3, 480, 96), ("i", 2): (3, 3, 480, 96),
    ("o", 2): (3, 3, 480, 96), ("Â", 2): (3, 3, 96, 96), ("downsample", 2): (3, 3, 192, 192),
    ("f", 3): (3, 3, 576, 192), ("g", 3): (3, 3, 576, 192), ("i", 3): (3, 3, 576, 192),
    ("o", 3): (3, 3, 576, 192), ("Â", 3): (3, 3, 192, 192),
}


# Published kernel tables, layer bias counts and totals. The shape rows
# are transcribed per row, so a mismatch between them and the totals
# shows up in comparisons instead of being reconciled here.
PUBLISHED = {
    ("mnist-paper", "M18"): dict(
        total=4_316_235,
        shapes=_MNIST_RGC,
        biases={0: 51, 1: 240, 2: 480, 3: 576},
    ),
    ("mnist-paper", "M1"): dict(
        total=6_909_834,
        shapes=_MNIST_CLSTM,
        biases={0: 53, 1: 336, 2: 672, 3: 960},
    ),
    ("kitti-paper", "M18"): dict(
        total=4_320_273,
        shapes={("f", 0): (3, 3, 60, 3), ("g", 0): (3, 3, 57, 3), ("Â", 0): (3, 3, 3, 3),
                ("downsample", 0): (3, 3, 6, 48)},
        biases={0: 60},
    ),
    ("kitti-paper", "M1"): dict(
        total=6_915_948,
        shapes={("f", 0): (3, 3, 57, 3), ("g", 0): (3, 3, 57, 3), ("i", 0): (3, 3, 57, 3),
                ("o", 0): (3, 3, 57, 3), ("Â", 0): (3, 3, 3, 3), ("downsample", 0): (3, 3, 6, 48)},
        biases={0: 57},
    ),
}

# Totals reported for the whole zoo on the 64x64x1 configuration.
PUBLISHED_ZOO_TOTALS = {
    "M1": 6_909_834, "M2": 3_880_786, "M3": 5_395_310, "M4": 5_395_310, "M5": 3_880_786,
    "M6": 5_395_310, "M7": 3_880_786, "M8": 8_216_229, "M9": 4_316_251, "M10": 6_266_240,
    "M11": 6_266_240, "M12": 4_316_251, "M13": 6_266_240, "M14": 4_316_251,
    "M15": 3_880_786, "M16": 3_880_786, "M17": 3_880_786, "M18": 4_316_235,
    "M19": 4_316_235, "M20": 4_316_235,
}


def compare_published(preset: str, report: AuditReport) -> tuple[list[str], list[str]]:
    """Check an audit against the published table for ``preset``.

    Returns ``(shape_mismatches, discrepancies)``. Shape mismatches mean the
    wiring disagrees with a published kernel row. Discrepancies are
    published numbers (totals, bias counts) that differ from the sum of
    the kernel rows computed from the wiring.
    """
    shape_bad: list[str] = []
    notes: list[str] = []
    ref = PUBLISHED.get((preset, report.model))
    if ref is not None and report.peephole_mode == "stacked_conv":
        for (kernel, layer), shape in ref["shapes"].items():
            got = report.shape_of(kernel, layer)
            if got != shape:
                shape_bad.append(f"{kernel}_{layer}: published {shape}, wiring gives {got}")
        covered = {l for _, l in ref["shapes"]}
        extra = [f"{r.kernel}_{r.layer}" for r in report.rows
                 if r.layer in covered and (r.kernel, r.layer) not in ref["shapes"]]
        if extra:
            shape_bad.append(f"kernels absent from the published table: {', '.join(extra)}")
        biases = report.layer_biases()
        for layer, count in ref["biases"].items():
            if biases[layer] != count:
                notes.append(f"biases_{layer}: published {count}, kernel rows sum to {biases[layer]}")
        total = ref["total"]
    elif preset == "mnist-paper" and report.peephole_mode == "stacked_conv":
        total = PUBLISHED_ZOO_TOTALS.get(report.model)
    else:
        total = None
    if total is not None and total != report.total:
        notes.append(
            f"total: published {total:,}, kernel rows sum to {report.total:,} "
            f"(difference {total - report.total:+,})")
    return shape_bad, notes
