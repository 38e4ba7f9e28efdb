"""Analytic parameter and FLOP accounting from model topology.

Nothing is executed: counts come from :meth:`Model.describe`, so reports for
full-size networks need no activations and no initialised weights.

Two FLOP conventions are supported and every report names the one it used:

``2mac``
    conv and linear layers cost ``2 * MACs`` plus one add per output element
    for the bias; instance norm costs 4 per element; pooling, upsampling,
    activations and elementwise products cost 1 per output element; global
    average pooling costs 1 per input element.
``mac-out``
    the profiler-style count: one MAC per output element per
    ``C_in / groups * prod(kernel)`` (so a stride-2 transposed conv is charged
    at its output resolution), plus bias adds; norm costs 2 per element;
    the remaining layers are charged as in ``2mac``.

``include_norm=False`` drops norm rows from the FLOP total, the plain-conv
comparison mode.
"""

import json

from .errors import ConfigurationError
from .networks import Model, NetworkSpec

CONVENTIONS = {
    "2mac": {"conv": 2, "norm": 4},
    "mac-out": {"conv": 1, "norm": 2},
}

# elementwise-style rows charged one op per recorded element
_UNIT_KINDS = {"pool", "upsample", "act", "mul", "add", "gap"}


def _row_flops(row, convention, include_norm):
    rule = CONVENTIONS[convention]
    if row.kind in ("conv", "conv_transpose"):
        macs = row.macs if convention == "2mac" else row.macs_out
        return rule["conv"] * macs + row.bias_elems
    if row.kind == "norm":
        return rule["norm"] * row.elems if include_norm else 0
    if row.kind in _UNIT_KINDS:
        return row.elems
    return 0


def _as_model(model_or_spec):
    if isinstance(model_or_spec, NetworkSpec):
        return Model(model_or_spec)
    return model_or_spec


def count_params(model):
    """Exact number of learnable scalars in the parameter store."""
    return sum(t.size for t in _as_model(model).params.values())


def _check_convention(convention):
    if convention not in CONVENTIONS:
        raise ConfigurationError(f"unknown FLOP convention {convention!r}; have {sorted(CONVENTIONS)}")


def count_flops(model, geometry, convention="2mac", include_norm=True):
    _check_convention(convention)
    rows = _as_model(model).describe(tuple(geometry))
    return sum(_row_flops(r, convention, include_norm) for r in rows)


class ComplexityReport:
    """Per-layer rows and totals for one model at one input geometry."""

    def __init__(self, name, spec, geometry, rows, convention, include_norm):
        self.name = name
        self.spec = spec
        self.geometry = tuple(geometry)
        self.convention = convention
        self.include_norm = include_norm
        self.rows = [
            {"name": r.name, "kind": r.kind, "params": r.params,
             "flops": _row_flops(r, convention, include_norm)}
            for r in rows
        ]
        self.alt_flops = {
            c: sum(_row_flops(r, c, include_norm) for r in rows) for c in CONVENTIONS
        }

    @property
    def totals(self):
        return {
            "params": sum(r["params"] for r in self.rows),
            "flops": sum(r["flops"] for r in self.rows),
        }

    def to_dict(self, with_rows=True):
        d = {
            "name": self.name,
            "convention": self.convention_text(),
            "geometry": list(self.geometry),
            "totals": self.totals,
            "flops_by_convention": self.alt_flops,
        }
        if with_rows:
            d["rows"] = self.rows
        return d

    def convention_text(self):
        norm = "norm included" if self.include_norm else "norm excluded"
        return f"{self.convention}; {norm}"


def complexity_report(model, geometry, name=None, convention="2mac", include_norm=True):
    _check_convention(convention)
    model = _as_model(model)
    rows = model.describe(tuple(geometry))
    return ComplexityReport(name or model.spec.variant, model.spec, geometry, rows, convention,
                            include_norm)


ABLATION_GEOMETRY = {2: (512, 512), 3: (192, 192, 96)}


def ablation_specs(rank, plain_convs=True):
    """The seven ablation configurations compared for each rank."""
    pool_small = (2, 2) if rank == 2 else (2, 2, 1)
    pool_large = (4, 4) if rank == 2 else (4, 4, 1)
    conv = "x".join(["{k}"] * rank)
    base = dict(rank=rank, num_classes=2, plain_convs=plain_convs)
    out = [("U-Net", "-", NetworkSpec(variant="unet", **base))]
    for pool in (pool_small, pool_large):
        label = "x".join(str(p) for p in pool[:2]) + " AvgPool"
        out.append(("DMRC-Net", label, NetworkSpec(variant="dmrc", dmrc_pool=pool, **base)))
    for k in (5, 7):
        for lw in (False, True):
            label = conv.format(k=k) + (" DWConv" if lw else " Conv")
            out.append(("DMSC-Net", label, NetworkSpec(variant="dmsc", dmsc_kernel=k,
                                                        lightweight_dmsc=lw, **base)))
    return out


def ablation_grid(ranks=(2, 3), geometry=None, convention="2mac", include_norm=True):
    """Rows ``{rank, method, design, params, flops, flops_by_convention}``."""
    rows = []
    for rank in ranks:
        geo = tuple(geometry) if geometry is not None else ABLATION_GEOMETRY[rank]
        for method, design, spec in ablation_specs(rank, plain_convs=not include_norm):
            rep = complexity_report(spec, geo, name=method, convention=convention,
                                    include_norm=include_norm)
            rows.append({
                "rank": rank,
                "method": method,
                "design": design,
                "geometry": list(geo),
                "params": rep.totals["params"],
                "flops": rep.totals["flops"],
                "flops_by_convention": rep.alt_flops,
            })
    return {"convention": f"{convention}; norm {'included' if include_norm else 'excluded'}",
            "rows": rows}


def format_table(grid):
    """Aligned text rendering of :func:`ablation_grid` output (M params, G FLOPs)."""
    head = f"{'rank':<5}{'method':<10}{'design':<16}{'params(M)':>11}{'FLOPs(G)':>12}"
    lines = [f"convention: {grid['convention']}", head, "-" * len(head)]
    for r in grid["rows"]:
        lines.append(
            f"{str(r['rank']) + 'D':<5}{r['method']:<10}{r['design']:<16}"
            f"{r['params'] / 1e6:>11.2f}{r['flops'] / 1e9:>12.2f}"
        )
    return "\n".join(lines)


def to_json(grid):
    return json.dumps(grid, indent=2, sort_keys=True)
