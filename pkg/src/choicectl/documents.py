"""JSON scenario documents, law documents and trajectory CSV files.

A scenario document looks like::

    {
      "version": 1,
      "system": {"A": [[0, 1], [0, 0]], "B": [[[0], [1]], [[0], [-1]]]},
      "horizon": {"t0": 0, "T": 1, "switch_time": 0.6},
      "x0": [5, 0],
      "targets": {"dims": [2, 2], "entries": [[10, 0], [0, 0], [0, 0], [-10, 0]]},
      "noise": {"sigma": 0.5, "hold_interval": 0.01, "seed": 42, "mask": [0, 1]},
      "penalty_f": 1000,
      "controller": "open_loop"
    }

``targets.entries`` lists one state vector per choice tuple in row-major
order (last agent's choice varies fastest). Choice indices are 0-based
everywhere. Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import ChoiceCtlError
from .model import LinearSystem, Scenario, TargetTensor
from .sim import NoiseConfig

FORMAT_VERSION = 1
CONTROLLERS = ("open_loop", "feedback_hybrid", "approach")

_TOP_KEYS = {"version", "system", "horizon", "x0", "targets", "noise", "penalty_f", "controller"}
_REQUIRED = ("version", "system", "horizon", "x0", "targets", "controller")
_SUB_KEYS = {
    "system": ({"A", "B"}, ("A", "B")),
    "horizon": ({"t0", "T", "switch_time"}, ("t0", "T")),
    "targets": ({"dims", "entries"}, ("dims", "entries")),
    "noise": ({"sigma", "hold_interval", "seed", "mask"}, ("sigma", "hold_interval", "seed")),
}


class DocumentError(ChoiceCtlError, ValueError):
    """A document could not be parsed or does not describe a valid scenario."""


@dataclass(frozen=True)
class ScenarioDocument:
    scenario: Scenario
    controller: str
    source_sha256: str


def _check_keys(obj, where, allowed, required):
    if not isinstance(obj, dict):
        raise DocumentError(f"{where}: expected an object")
    extra = sorted(set(obj) - allowed)
    if extra:
        raise DocumentError(f"{where}: unknown key(s) {', '.join(extra)}")
    missing = [k for k in required if k not in obj]
    if missing:
        raise DocumentError(f"{where}: missing key(s) {', '.join(missing)}")


def _number(value, where):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DocumentError(f"{where}: expected a number, got {value!r}")
    return float(value)


def _array(value, where, ndim):
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise DocumentError(f"{where}: not a numeric array ({exc})") from None
    if arr.ndim != ndim:
        raise DocumentError(f"{where}: expected a {ndim}-d array, got shape {arr.shape}")
    return arr


def parse_scenario(text: str) -> ScenarioDocument:
    """Parse and validate a scenario document.

    Raises :class:`DocumentError` with line/column context for JSON syntax
    errors and a key path for structural errors. Scenario-level validation
    errors (dimensions, horizon) are re-raised as :class:`DocumentError` too.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DocumentError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    _check_keys(raw, "document", _TOP_KEYS, _REQUIRED)
    if raw["version"] != FORMAT_VERSION:
        raise DocumentError(f"version: unsupported value {raw['version']!r} (expected {FORMAT_VERSION})")
    for key, (allowed, required) in _SUB_KEYS.items():
        if key in raw:
            _check_keys(raw[key], key, allowed, required)
    controller = raw["controller"]
    if controller not in CONTROLLERS:
        raise DocumentError(f"controller: expected one of {', '.join(CONTROLLERS)}, got {controller!r}")

    A = _array(raw["system"]["A"], "system.A", 2)
    if not isinstance(raw["system"]["B"], list) or not raw["system"]["B"]:
        raise DocumentError("system.B: expected a non-empty list of matrices")
    Bs = tuple(_array(B, f"system.B[{k}]", 2) for k, B in enumerate(raw["system"]["B"]))
    hz = raw["horizon"]
    t0 = _number(hz["t0"], "horizon.t0")
    T = _number(hz["T"], "horizon.T")
    switch = None if hz.get("switch_time") is None else _number(hz["switch_time"], "horizon.switch_time")
    x0 = _array(raw["x0"], "x0", 1)
    dims = raw["targets"]["dims"]
    if not isinstance(dims, list) or not all(isinstance(d, int) and not isinstance(d, bool) for d in dims):
        raise DocumentError("targets.dims: expected a list of integers")
    entries = _array(raw["targets"]["entries"], "targets.entries", 2)
    penalty = None if raw.get("penalty_f") is None else _number(raw["penalty_f"], "penalty_f")
    noise = None
    if raw.get("noise") is not None:
        nz = raw["noise"]
        seed = nz["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
            raise DocumentError("noise.seed: expected an integer in [0, 2^64)")
        mask = None if nz.get("mask") is None else tuple(_array(nz["mask"], "noise.mask", 1))
        try:
            noise = NoiseConfig(_number(nz["sigma"], "noise.sigma"),
                                _number(nz["hold_interval"], "noise.hold_interval"), seed, mask)
        except ValueError as exc:
            raise DocumentError(f"noise: {exc}") from None
        if mask is not None and len(mask) != x0.shape[0]:
            raise DocumentError(f"noise.mask: length {len(mask)} does not match state dimension {x0.shape[0]}")
    try:
        system = LinearSystem(A, Bs)
        targets = TargetTensor.from_flat(dims, entries)
        scenario = Scenario(system, t0, T, x0, targets, switch_time=switch,
                            penalty_weight=penalty, noise=noise)
    except (ValueError, ChoiceCtlError) as exc:
        raise DocumentError(f"invalid scenario: {exc}") from None
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return ScenarioDocument(scenario, controller, digest)


def load_scenario(path) -> ScenarioDocument:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DocumentError(f"cannot read {path}: {exc.strerror}") from None
    return parse_scenario(text)


def _num(x):
    x = float(x)
    return int(x) if x.is_integer() and abs(x) < 2 ** 53 else x


def _nested(arr):
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 0:
        return _num(arr)
    return [_nested(a) for a in arr]


def scenario_to_dict(scenario: Scenario, controller: str) -> dict:
    doc = {
        "version": FORMAT_VERSION,
        "system": {"A": _nested(scenario.system.A), "B": [_nested(B) for B in scenario.system.inputs]},
        "horizon": {"t0": _num(scenario.t0), "T": _num(scenario.T)},
        "x0": _nested(scenario.x0),
        "targets": {"dims": list(scenario.targets.dims), "entries": _nested(scenario.targets.flat())},
    }
    if scenario.switch_time is not None:
        doc["horizon"]["switch_time"] = _num(scenario.switch_time)
    if scenario.noise is not None:
        nz = scenario.noise
        doc["noise"] = {"sigma": _num(nz.sigma), "hold_interval": _num(nz.hold_interval), "seed": nz.seed}
        if nz.mask is not None:
            doc["noise"]["mask"] = [_num(v) for v in nz.mask]
    if scenario.penalty_weight is not None:
        doc["penalty_f"] = _num(scenario.penalty_weight)
    doc["controller"] = controller
    return doc


def dump_json(obj) -> str:
    """Canonical text form: fixed key order as given, two-space indent, trailing newline."""
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def dump_scenario(scenario: Scenario, controller: str) -> str:
    return dump_json(scenario_to_dict(scenario, controller))


def write_atomic(path, text: str):
    """Write ``text`` to ``path`` through a temporary file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trajectory_csv(traj, input_dims) -> str:
    """CSV text with header ``t,x_1..x_n,u_agent1_1..,u_agent2_1..``; floats with 17 significant digits."""
    n = traj.states.shape[1]
    header = ["t"] + [f"x_{k + 1}" for k in range(n)]
    for l, m in enumerate(input_dims):
        header += [f"u_agent{l + 1}_{k + 1}" for k in range(m)]
    table = np.column_stack([traj.times, traj.states, *traj.controls])
    out = io.StringIO()
    out.write(",".join(header) + "\n")
    for row in table:
        out.write(",".join(format(v, ".17g") for v in row) + "\n")
    return out.getvalue()


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data

