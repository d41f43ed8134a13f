"""Long-format multi-state data, transition structures and prior groupings.

States and transitions are numbered from 1, as in the long-format files
(``from``/``to`` hold state numbers, ``trans`` holds transition ids).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd

from .exceptions import (
    DuplicateStatusOne,
    DuplicateTransition,
    IncompleteRiskPeriod,
    InconsistentInterval,
    MissingColumn,
    SelfTransition,
    UnknownTransition,
    ValidationError,
)

REQUIRED_COLUMNS = ("id", "from", "to", "trans", "Tstart", "Tstop", "time",
                    "status", "strata")
INTERVAL_TOL = 1e-9

SCALES = ("clock_reset", "clock_forward")

SURV_DTYPE = np.dtype([("entry", "f8"), ("exit", "f8"), ("status", "i1"),
                       ("stratum", "i8"), ("id", "i8")])


# ---------------------------------------------------------------------------
# Transition structures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransitionStructure:
    """Directed graph of states; transition ``k`` is ``transitions[k - 1]``.

    Parameters
    ----------
    state_names : sequence of str
        One label per state; state ``s`` has label ``state_names[s - 1]``.
    transitions : sequence of (int, int)
        ``(from, to)`` state numbers, in transition-id order.
    """

    state_names: tuple
    transitions: tuple

    def __post_init__(self):
        object.__setattr__(self, "state_names", tuple(str(s) for s in self.state_names))
        object.__setattr__(self, "transitions",
                           tuple((int(a), int(b)) for a, b in self.transitions))
        if len(set(self.state_names)) != len(self.state_names):
            raise ValidationError("state names must be unique")
        seen = set()
        for a, b in self.transitions:
            for s in (a, b):
                if not 1 <= s <= self.n_states:
                    raise ValidationError(f"state number {s} out of range")
            if a == b:
                raise SelfTransition(f"self-transition at state {a}")
            if (a, b) in seen:
                raise DuplicateTransition(f"transition {a}->{b} declared twice")
            seen.add((a, b))

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    @property
    def n_transitions(self) -> int:
        return len(self.transitions)

    @property
    def trans_ids(self) -> list:
        return list(range(1, self.n_transitions + 1))

    def from_state(self, trans: int) -> int:
        return self.transitions[trans - 1][0]

    def to_state(self, trans: int) -> int:
        return self.transitions[trans - 1][1]

    def outbound(self, state: int) -> list:
        return [k for k, (a, _) in enumerate(self.transitions, 1) if a == state]

    def inbound(self, state: int) -> list:
        return [k for k, (_, b) in enumerate(self.transitions, 1) if b == state]

    @property
    def absorbing_states(self) -> list:
        return [s for s in range(1, self.n_states + 1) if not self.outbound(s)]

    @property
    def roots(self) -> list:
        return [s for s in range(1, self.n_states + 1) if not self.inbound(s)]

    @property
    def is_acyclic(self) -> bool:
        indeg = {s: len(self.inbound(s)) for s in range(1, self.n_states + 1)}
        queue = [s for s, d in indeg.items() if d == 0]
        visited = 0
        while queue:
            s = queue.pop()
            visited += 1
            for k in self.outbound(s):
                t = self.to_state(k)
                indeg[t] -= 1
                if indeg[t] == 0:
                    queue.append(t)
        return visited == self.n_states

    @property
    def is_tree(self) -> bool:
        if any(len(self.inbound(s)) > 1 for s in range(1, self.n_states + 1)):
            return False
        return self.is_acyclic and len(self.roots) == 1

    def reachable(self, state: int) -> list:
        """States reachable from `state` (itself included), in visit order."""
        order, stack = [], [state]
        while stack:
            s = stack.pop(0)
            if s in order:
                continue
            order.append(s)
            stack.extend(self.to_state(k) for k in self.outbound(s))
        return order

    def state_number(self, label) -> int:
        if isinstance(label, (int, np.integer)):
            if not 1 <= label <= self.n_states:
                raise ValidationError(f"state number {label} out of range")
            return int(label)
        try:
            return self.state_names.index(str(label)) + 1
        except ValueError:
            raise ValidationError(f"unknown state {label!r}") from None

    def to_dict(self) -> dict:
        return {"states": list(self.state_names),
                "transitions": [{"from": a, "to": b} for a, b in self.transitions]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TransitionStructure":
        pairs = [(t["from"], t["to"]) for t in d["transitions"]]
        return build_structure(pairs, d["states"])

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path) -> "TransitionStructure":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_structure(pairs: Sequence, state_names: Sequence[str] | None = None
                    ) -> TransitionStructure:
    """Build a structure from ``(from, to)`` pairs.

    Pairs may use state labels (looked up in `state_names`) or 1-based state
    numbers. Transition ids follow input order, starting at 1. Without
    `state_names`, integer pairs are state numbers (states ``1..max``) and
    other pairs are labels numbered in order of first appearance.

    Examples
    --------
    >>> s = build_structure([("MDS", "AML"), ("MDS", "death"), ("AML", "death_AML")])
    >>> s.is_tree, s.n_states
    (True, 4)
    """
    pairs = list(pairs)
    if state_names is None and all(isinstance(s, (int, np.integer)) for p in pairs for s in p):
        state_names = [str(s) for s in range(1, max((max(p) for p in pairs), default=0) + 1)]
    if state_names is None:
        names: list = []
        for a, b in pairs:
            for s in (a, b):
                if str(s) not in names:
                    names.append(str(s))
        state_names = names
    names = [str(s) for s in state_names]
    if len(set(names)) != len(names):
        raise ValidationError("state names must be unique")

    def number(s):
        if isinstance(s, (int, np.integer)) and str(s) not in names:
            return int(s)
        try:
            return names.index(str(s)) + 1
        except ValueError:
            raise ValidationError(f"unknown state {s!r}") from None

    return TransitionStructure(tuple(names), tuple((number(a), number(b)) for a, b in pairs))


# ---------------------------------------------------------------------------
# Long-format data
# ---------------------------------------------------------------------------

class EventRecord(NamedTuple):
    id: object
    from_state: int
    to_state: int
    trans: int
    t_start: float
    t_stop: float
    time: float
    status: int
    stratum: int
    covariates: tuple


@dataclass(frozen=True)
class Expansion:
    """Record of a covariate expansion by transition type."""

    base_columns: tuple
    partition: Mapping[int, int]

    @property
    def types(self) -> list:
        return sorted(set(self.partition.values()))

    def columns(self) -> list:
        return [f"{x}.{t}" for x in self.base_columns for t in self.types]


@dataclass
class MultiStateData:
    """Validated long-format data set.

    Attributes
    ----------
    frame : pandas.DataFrame
        Rows with the required columns followed by the covariate columns.
    structure : TransitionStructure
    covariates : tuple of str
        Names of the covariate columns used as model features.
    expansion : Expansion or None
        Set when the covariates were produced by :func:`expand_covariates`.
    """

    frame: pd.DataFrame
    structure: TransitionStructure
    covariates: tuple = ()
    expansion: Expansion | None = None
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.covariates = tuple(self.covariates)
        if self.validate:
            validate_long(self.frame, self.structure, self.covariates)

    def __len__(self):
        return len(self.frame)

    @property
    def X(self) -> np.ndarray:
        return self.frame.loc[:, list(self.covariates)].to_numpy(dtype=float)

    @property
    def ids(self) -> np.ndarray:
        return pd.unique(self.frame["id"])

    @property
    def trans_strata(self) -> dict:
        """Transition id -> stratum, for transitions that appear in the data."""
        out = {}
        for k, g in self.frame.groupby("trans")["strata"]:
            vals = pd.unique(g)
            if len(vals) != 1:
                raise ValidationError(f"transition {k} has several strata")
            out[int(k)] = int(vals[0])
        return out

    def surv(self, scale: str = "clock_reset") -> np.ndarray:
        """Structured survival array with fields entry, exit, status, stratum, id."""
        if scale not in SCALES:
            raise ValidationError(f"scale must be one of {SCALES}, got {scale!r}")
        f = self.frame
        y = np.empty(len(f), dtype=SURV_DTYPE)
        if scale == "clock_reset":
            y["entry"] = 0.0
            y["exit"] = f["time"].to_numpy(float)
        else:
            y["entry"] = f["Tstart"].to_numpy(float)
            y["exit"] = f["Tstop"].to_numpy(float)
        y["status"] = f["status"].to_numpy()
        y["stratum"] = f["strata"].to_numpy()
        y["id"] = pd.factorize(f["id"], sort=True)[0]
        return y

    def records(self) -> Iterator[EventRecord]:
        cov = self.X
        cols = [self.frame[c].to_numpy() for c in REQUIRED_COLUMNS]
        for i in range(len(self.frame)):
            pid, a, b, k, t0, t1, dt, st, sg = (c[i] for c in cols)
            yield EventRecord(pid, int(a), int(b), int(k), float(t0), float(t1),
                              float(dt), int(st), int(sg), tuple(cov[i]))

    def subset(self, ids) -> "MultiStateData":
        """Rows of the given patients, in original row order."""
        mask = self.frame["id"].isin(list(ids)).to_numpy()
        return self._with_frame(self.frame.loc[mask].reset_index(drop=True))

    def drop(self, ids) -> "MultiStateData":
        mask = ~self.frame["id"].isin(list(ids)).to_numpy()
        return self._with_frame(self.frame.loc[mask].reset_index(drop=True))

    def resample(self, ids) -> "MultiStateData":
        """Stack the rows of each listed patient; repeats get fresh ids 1..len(ids)."""
        groups = {k: idx for k, idx in self.frame.groupby("id", sort=False).indices.items()}
        parts, new_ids = [], []
        for j, pid in enumerate(ids, 1):
            idx = groups[pid]
            parts.append(idx)
            new_ids.append(np.full(len(idx), j))
        rows = np.concatenate(parts) if parts else np.array([], dtype=int)
        f = self.frame.iloc[rows].reset_index(drop=True)
        f["id"] = np.concatenate(new_ids) if new_ids else []
        return self._with_frame(f)

    def _with_frame(self, frame) -> "MultiStateData":
        return MultiStateData(frame, self.structure, self.covariates, self.expansion,
                              validate=False)

    def base_covariates(self, pid) -> dict:
        """Original (unexpanded) covariate values of one patient."""
        rows = self.frame.loc[self.frame["id"] == pid]
        if rows.empty:
            raise ValidationError(f"unknown patient id {pid!r}")
        first = rows.iloc[0]
        if self.expansion is None:
            return {c: float(first[c]) for c in self.covariates}
        typ = self.expansion.partition[int(first["trans"])]
        return {x: float(first[f"{x}.{typ}"]) for x in self.expansion.base_columns}

    def patient_frame(self, values: Mapping | Sequence[float]) -> pd.DataFrame:
        """One row per transition (trans, strata, model covariates) for a profile.

        `values` holds the original covariate values: expanded copies are
        filled according to the stored partition.
        """
        base = self.expansion.base_columns if self.expansion else self.covariates
        if not isinstance(values, Mapping):
            values = dict(zip(base, values))
        missing = [c for c in base if c not in values]
        if missing:
            raise MissingColumn(f"profile lacks covariates {missing}")
        strata = self.trans_strata
        rows = []
        for k in self.structure.trans_ids:
            row = {"trans": k, "strata": strata.get(k, k)}
            if self.expansion is None:
                row.update({c: float(values[c]) for c in self.covariates})
            else:
                typ = self.expansion.partition[k]
                for x in self.expansion.base_columns:
                    for t in self.expansion.types:
                        row[f"{x}.{t}"] = float(values[x]) if t == typ else 0.0
            rows.append(row)
        return pd.DataFrame(rows, columns=["trans", "strata", *self.covariates])

    def column_transitions(self) -> dict:
        """Covariate column -> transition ids on which it can be nonzero."""
        trans = self.structure.trans_ids
        if self.expansion is None:
            return {c: list(trans) for c in self.covariates}
        out = {}
        for x in self.expansion.base_columns:
            for t in self.expansion.types:
                out[f"{x}.{t}"] = [k for k in trans if self.expansion.partition[k] == t]
        return out


def validate_long(frame: pd.DataFrame, structure: TransitionStructure,
                  covariates: Sequence[str] = ()) -> None:
    """Check long-format invariants; raise a :class:`ValidationError` subclass."""
    missing = [c for c in (*REQUIRED_COLUMNS, *covariates) if c not in frame.columns]
    if missing:
        raise MissingColumn(f"missing columns: {missing}")
    if frame.empty:
        return
    trans = frame["trans"].to_numpy()
    known = set(structure.trans_ids)
    bad = sorted(set(int(k) for k in trans) - known)
    if bad:
        raise UnknownTransition(f"transition ids {bad} not in structure "
                                f"with {structure.n_transitions} transitions")
    tab = np.asarray(structure.transitions)
    idx = trans.astype(int) - 1
    if (np.any(tab[idx, 0] != frame["from"].to_numpy())
            or np.any(tab[idx, 1] != frame["to"].to_numpy())):
        raise UnknownTransition("from/to columns disagree with the transition ids")

    t0 = frame["Tstart"].to_numpy(float)
    t1 = frame["Tstop"].to_numpy(float)
    dt = frame["time"].to_numpy(float)
    if np.any(t0 < 0) or np.any(~(t1 > t0)):
        raise InconsistentInterval("rows need 0 <= Tstart < Tstop")
    if np.any(np.abs(dt - (t1 - t0)) > INTERVAL_TOL):
        raise InconsistentInterval("time must equal Tstop - Tstart")
    status = frame["status"].to_numpy()
    if not np.isin(status, (0, 1)).all():
        raise ValidationError("status must be 0 or 1")
    for c in covariates:
        if not np.issubdtype(frame[c].dtype, np.number):
            raise ValidationError(f"covariate {c!r} is not numeric")

    keys = ["id", "from", "Tstart"]
    n_events = frame.groupby(keys, sort=False)["status"].sum()
    if (n_events > 1).any():
        raise DuplicateStatusOne(f"risk periods with several events: "
                                 f"{list(n_events[n_events > 1].index[:3])}")
    outbound = {s: sorted(structure.outbound(s)) for s in range(1, structure.n_states + 1)}
    for (pid, s, _), g in frame.groupby(keys, sort=False)["trans"]:
        if sorted(int(k) for k in g) != outbound[int(s)]:
            raise IncompleteRiskPeriod(
                f"patient {pid!r} in state {s}: transitions {sorted(g)} "
                f"but state has outbound {outbound[int(s)]}")


def load_long_csv(path, structure: TransitionStructure) -> MultiStateData:
    """Read a long-format CSV; every non-required column is a covariate."""
    frame = pd.read_csv(path)
    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise MissingColumn(f"missing columns: {missing}")
    covariates = [c for c in frame.columns if c not in REQUIRED_COLUMNS]
    frame = frame[[*REQUIRED_COLUMNS, *covariates]]
    return MultiStateData(frame, structure, tuple(covariates))


def write_long_csv(data: MultiStateData, path) -> None:
    data.frame.loc[:, [*REQUIRED_COLUMNS, *data.covariates]].to_csv(path, index=False)


def expand_covariates(data: MultiStateData, partition: Mapping[int, int] | None = None
                      ) -> MultiStateData:
    """Replicate each covariate per transition type, zero off-type.

    Column ``x`` becomes ``x.1, x.2, ...``; ``x.t`` equals ``x`` on rows whose
    transition has type ``t`` and 0 elsewhere. Without `partition` every
    transition is its own type.
    """
    if data.expansion is not None:
        raise ValidationError("data are already expanded")
    if partition is None:
        partition = {k: k for k in data.structure.trans_ids}
    partition = {int(k): int(v) for k, v in partition.items()}
    unmapped = [k for k in data.structure.trans_ids if k not in partition]
    if unmapped:
        raise ValidationError(f"transitions {unmapped} have no type")
    exp = Expansion(tuple(data.covariates), partition)
    f = data.frame
    row_type = f["trans"].map(partition).to_numpy()
    cols = {}
    for x in data.covariates:
        v = f[x].to_numpy(float)
        for t in exp.types:
            cols[f"{x}.{t}"] = np.where(row_type == t, v, 0.0)
    out = pd.concat([f.loc[:, list(REQUIRED_COLUMNS)].reset_index(drop=True),
                     pd.DataFrame(cols)], axis=1)
    return MultiStateData(out, data.structure, tuple(exp.columns()), exp, validate=False)


# ---------------------------------------------------------------------------
# Prior groupings
# ---------------------------------------------------------------------------

MEAN_MODES = ("fixed_zero", "estimated")


@dataclass(frozen=True)
class PriorGrouping:
    """Assignment of coefficient columns to Gaussian prior groups."""

    group_of: Mapping[str, str]
    mean_mode: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "group_of", {str(k): str(v) for k, v in self.group_of.items()})
        modes = {g: self.mean_mode.get(g, "fixed_zero") for g in self.groups}
        for g, m in modes.items():
            if m not in MEAN_MODES:
                raise ValidationError(f"mean mode for group {g!r} must be one of {MEAN_MODES}")
        object.__setattr__(self, "mean_mode", modes)

    @property
    def groups(self) -> list:
        return list(dict.fromkeys(self.group_of.values()))

    def labels(self, columns: Sequence[str]) -> list:
        missing = [c for c in columns if c not in self.group_of]
        if missing:
            raise ValidationError(f"columns without a prior group: {missing}")
        return [self.group_of[c] for c in columns]

    @classmethod
    def single(cls, columns, label="all", mean_mode="fixed_zero"):
        return cls({c: label for c in columns}, {label: mean_mode})

    @classmethod
    def by_transition(cls, data: MultiStateData, mean_mode="fixed_zero"):
        """One group per transition type of an expanded data set."""
        if data.expansion is None:
            return cls.single(data.covariates, mean_mode=mean_mode)
        group_of = {f"{x}.{t}": f"type_{t}"
                    for x in data.expansion.base_columns for t in data.expansion.types}
        return cls(group_of, {g: mean_mode for g in set(group_of.values())})

    def to_dict(self) -> dict:
        return {"group_of": dict(self.group_of), "mean_mode": dict(self.mean_mode)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PriorGrouping":
        if "group_of" in d:
            return cls(d["group_of"], d.get("mean_mode", {}))
        return cls(d)

    @classmethod
    def from_json(cls, path) -> "PriorGrouping":
        return cls.from_dict(json.loads(Path(path).read_text()))
