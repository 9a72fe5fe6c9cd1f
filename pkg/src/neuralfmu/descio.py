"""modelDescription.xml, ``.fmu`` archive metadata and trajectory CSV files."""

from __future__ import annotations

import csv
import io
import zipfile
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Causality, ModelDescription, ModelKind, ScalarVariable, Variability
from .errors import DescriptionError, ParseError
from .odesolve import Trajectory

SUPPORTED_FMI_VERSIONS = ("2.0",)
STANDARD_PLATFORMS = ("win32", "win64", "linux32", "linux64", "darwin64")

_CAUSALITY_IN = {
    "parameter": Causality.PARAMETER,
    "calculatedParameter": Causality.LOCAL,
    "input": Causality.INPUT,
    "output": Causality.OUTPUT,
    "local": Causality.LOCAL,
}


def _bool_attr(elem, name):
    value = elem.get(name, "false").strip().lower()
    if value not in ("true", "false", "1", "0"):
        raise ParseError(f"attribute {name}={value!r} is not a boolean")
    return value in ("true", "1")


def _int_attr(elem, name, default=None):
    raw = elem.get(name)
    if raw is None:
        if default is None:
            raise ParseError(f"<{elem.tag}> is missing attribute {name!r}")
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ParseError(f"attribute {name}={raw!r} is not an integer") from None
    if value < 0:
        raise ParseError(f"attribute {name}={raw!r} must be non-negative")
    return value


def parse_model_description(xml_bytes) -> ModelDescription:
    """Parse the FMI 2.0 modelDescription subset used by this package.

    Only ``Real`` variables are kept; other scalar types and the
    ``independent`` time variable are skipped but still count for the
    1-based variable indices of ``ModelStructure``.  Unknown elements are
    ignored.
    """
    if isinstance(xml_bytes, str):
        xml_bytes = xml_bytes.encode("utf-8")
    try:
        root = ET.fromstring(xml_bytes)
    except ET.ParseError as exc:
        line = exc.position[0] if getattr(exc, "position", None) else None
        raise ParseError(f"malformed XML: {exc}", line=line) from None
    except (ValueError, TypeError) as exc:
        raise ParseError(f"malformed XML: {exc}") from None
    try:
        return _parse_root(root)
    except ParseError:
        raise
    except (DescriptionError, ValueError, TypeError, KeyError, IndexError) as exc:
        raise ParseError(str(exc)) from None


def _parse_root(root) -> ModelDescription:
    if root.tag != "fmiModelDescription":
        raise ParseError(f"root element is <{root.tag}>, expected <fmiModelDescription>")
    for attr in ("fmiVersion", "modelName", "guid"):
        if not root.get(attr):
            raise ParseError(f"missing required attribute {attr!r}")
    version = root.get("fmiVersion")
    if version not in SUPPORTED_FMI_VERSIONS:
        raise ParseError(f"unsupported fmiVersion {version!r} (supported: {', '.join(SUPPORTED_FMI_VERSIONS)})")

    me = root.find("ModelExchange")
    cs = root.find("CoSimulation")
    if me is not None and cs is not None:
        kind = ModelKind.BOTH
    elif me is not None:
        kind = ModelKind.ME
    elif cs is not None:
        kind = ModelKind.CS
    else:
        raise ParseError("neither <ModelExchange> nor <CoSimulation> present")
    flags_elem = me if me is not None else cs
    provides_dd = _bool_attr(flags_elem, "providesDirectionalDerivative")
    can_state = _bool_attr(flags_elem, "canGetAndSetFMUstate")

    # index (1-based, over all ScalarVariables) -> ScalarVariable or None
    by_index = {}
    derivative_of = {}
    variables = []
    mv = root.find("ModelVariables")
    for k, sv in enumerate([] if mv is None else mv.findall("ScalarVariable"), start=1):
        real = sv.find("Real")
        causality = sv.get("causality", "local")
        if real is None or causality == "independent":
            by_index[k] = None
            continue
        if causality not in _CAUSALITY_IN:
            raise ParseError(f"variable {sv.get('name')!r}: unsupported causality {causality!r}")
        variability = sv.get("variability", "continuous")
        if variability not in {v.value for v in Variability}:
            raise ParseError(f"variable {sv.get('name')!r}: unsupported variability {variability!r}")
        name = sv.get("name")
        if not name:
            raise ParseError(f"ScalarVariable #{k} has no name")
        start = real.get("start")
        try:
            start = None if start is None else float(start)
        except ValueError:
            raise ParseError(f"variable {name!r}: start={start!r} is not a number") from None
        var = ScalarVariable(
            name=name,
            vr=_int_attr(sv, "valueReference"),
            causality=_CAUSALITY_IN[causality],
            variability=Variability(variability),
            start=start,
            description=sv.get("description", ""),
        )
        by_index[k] = var
        variables.append(var)
        if real.get("derivative") is not None:
            derivative_of[k] = _int_attr(real, "derivative")

    def resolve(index, what):
        var = by_index.get(index)
        if var is None:
            raise ParseError(f"{what} refers to variable index {index} which is not a Real variable")
        return var

    state_vrs, derivative_vrs, output_vrs = [], [], []
    ms = root.find("ModelStructure")
    if ms is not None:
        outs = ms.find("Outputs")
        for unk in [] if outs is None else outs.findall("Unknown"):
            output_vrs.append(resolve(_int_attr(unk, "index"), "Outputs").vr)
        ders = ms.find("Derivatives")
        for unk in [] if ders is None else ders.findall("Unknown"):
            idx = _int_attr(unk, "index")
            der = resolve(idx, "Derivatives")
            if idx not in derivative_of:
                raise ParseError(f"derivative {der.name!r} lacks a 'derivative' attribute")
            state = resolve(derivative_of[idx], f"derivative attribute of {der.name!r}")
            state_vrs.append(state.vr)
            derivative_vrs.append(der.vr)
    input_vrs = [v.vr for v in variables if v.causality is Causality.INPUT]

    return ModelDescription(
        model_name=root.get("modelName"),
        guid=root.get("guid"),
        kind=kind,
        variables=tuple(variables),
        state_vrs=tuple(state_vrs),
        derivative_vrs=tuple(derivative_vrs),
        input_vrs=tuple(input_vrs),
        output_vrs=tuple(output_vrs),
        provides_directional_derivative=provides_dd,
        can_get_set_state=can_state,
        n_event_indicators=_int_attr(root, "numberOfEventIndicators", 0),
        description=root.get("description", ""),
    )


def _flag(b):
    return "true" if b else "false"


def serialize_model_description(md: ModelDescription) -> bytes:
    """Write ``md`` as FMI 2.0 XML; ``parse(serialize(md)) == md``."""
    ident = "".join(ch if ch.isalnum() or ch == "_" else "_" for ch in md.model_name) or "model"
    root = ET.Element(
        "fmiModelDescription",
        {
            "fmiVersion": "2.0",
            "modelName": md.model_name,
            "guid": md.guid,
            "numberOfEventIndicators": str(md.n_event_indicators),
            "variableNamingConvention": "structured",
        },
    )
    if md.description:
        root.set("description", md.description)
    flags = {
        "modelIdentifier": ident,
        "providesDirectionalDerivative": _flag(md.provides_directional_derivative),
        "canGetAndSetFMUstate": _flag(md.can_get_set_state),
    }
    if md.kind in (ModelKind.ME, ModelKind.BOTH):
        ET.SubElement(root, "ModelExchange", flags)
    if md.kind in (ModelKind.CS, ModelKind.BOTH):
        ET.SubElement(root, "CoSimulation", flags)

    index = {var.vr: k for k, var in enumerate(md.variables, start=1)}
    state_of = dict(zip(md.derivative_vrs, md.state_vrs))
    mv = ET.SubElement(root, "ModelVariables")
    for var in md.variables:
        attrs = {
            "name": var.name,
            "valueReference": str(var.vr),
            "causality": var.causality.value,
            "variability": var.variability.value,
        }
        if var.description:
            attrs["description"] = var.description
        sv = ET.SubElement(mv, "ScalarVariable", attrs)
        real = ET.SubElement(sv, "Real")
        if var.start is not None:
            real.set("start", repr(float(var.start)))
        if var.vr in state_of:
            real.set("derivative", str(index[state_of[var.vr]]))
    ms = ET.SubElement(root, "ModelStructure")
    if md.output_vrs:
        outs = ET.SubElement(ms, "Outputs")
        for vr in md.output_vrs:
            ET.SubElement(outs, "Unknown", {"index": str(index[vr])})
    if md.derivative_vrs:
        ders = ET.SubElement(ms, "Derivatives")
        for vr in md.derivative_vrs:
            ET.SubElement(ders, "Unknown", {"index": str(index[vr])})
    ET.indent(root, space="  ")
    return ET.tostring(root, encoding="UTF-8", xml_declaration=True) + b"\n"


# -- archives -----------------------------------------------------------------


@dataclass
class ArchiveManifest:
    model_description: ModelDescription
    resource_paths: list = field(default_factory=list)
    has_binary: dict = field(default_factory=dict)
    path: Optional[str] = None


def open_archive(path) -> ArchiveManifest:
    """Read metadata from an ``.fmu`` zip; binaries are listed, never loaded."""
    if not zipfile.is_zipfile(path):
        raise ParseError(f"{path} is not a zip archive")
    with zipfile.ZipFile(path) as zf:
        names = zf.namelist()
        if "modelDescription.xml" not in names:
            raise ParseError(f"{path} has no modelDescription.xml at its root")
        md = parse_model_description(zf.read("modelDescription.xml"))
    has_binary = {plat: False for plat in STANDARD_PLATFORMS}
    resources = []
    for name in names:
        parts = name.split("/")
        if parts[0] == "binaries" and len(parts) >= 3 and parts[2]:
            has_binary[parts[1]] = True
        elif parts[0] == "resources" and len(parts) >= 2 and parts[-1]:
            resources.append(name)
    return ArchiveManifest(md, sorted(resources), has_binary, str(path))


def write_archive(path, md: ModelDescription, resources: Optional[dict] = None, binaries: Optional[dict] = None):
    """Pack a description (plus optional resource/binary blobs) as an ``.fmu`` zip."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("modelDescription.xml", serialize_model_description(md))
        for name, data in (resources or {}).items():
            zf.writestr(f"resources/{name}", data)
        for name, data in (binaries or {}).items():
            zf.writestr(f"binaries/{name}", data)


def load_description(path) -> ModelDescription:
    """Description from either a modelDescription.xml file or an ``.fmu`` archive."""
    if zipfile.is_zipfile(path):
        return open_archive(path).model_description
    with open(path, "rb") as fh:
        return parse_model_description(fh.read())


# -- trajectory CSV -----------------------------------------------------------


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_trajectory_csv(traj: Trajectory, names: Sequence[str], path):
    """Write ``t`` plus one column per state, 17 significant digits, LF endings."""
    names = list(names)
    if traj.states.ndim != 2 or traj.states.shape[1] != len(names):
        raise ValueError(f"{len(names)} column names for {traj.states.shape[-1]} state columns")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t"] + names)
    for t, row in zip(traj.times, traj.states):
        writer.writerow([_fmt(t)] + [_fmt(v) for v in row])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(buf.getvalue())


def write_table_csv(path, header: Sequence[str], columns):
    """Generic numeric table with the same number formatting as trajectories."""
    columns = [np.asarray(c, dtype=np.float64).reshape(-1) for c in columns]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(header))
    for row in zip(*columns):
        writer.writerow([_fmt(v) for v in row])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(buf.getvalue())


def read_trajectory_csv(path) -> Trajectory:
    """Inverse of :func:`write_trajectory_csv`; column names land in ``stats['names']``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = rows[0]
    if not header or header[0] != "t":
        raise ParseError("first column must be 't'", line=1)
    n_cols = len(header)
    times, states = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != n_cols:
            raise ParseError(f"expected {n_cols} fields, found {len(row)}", line=lineno)
        try:
            vals = [float(v) for v in row]
        except ValueError:
            raise ParseError(f"non-numeric field in {row!r}", line=lineno) from None
        times.append(vals[0])
        states.append(vals[1:])
    states = np.array(states, dtype=np.float64).reshape(len(times), n_cols - 1)
    return Trajectory(np.array(times), states, stats={"names": header[1:]})
