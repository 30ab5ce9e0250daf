"""Workload specs: parsing, value distributions and deterministic request generation."""

from __future__ import annotations

import bisect
import random
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional

from ..engine import Engine
from ..sqlparse import ParseError, Placeholder, SchemaCatalog, StatementKind, bind, parse


class SpecValidation(ValueError):
    pass


# ---------------------------------------------------------------------------
# distributions

class ZipfSampler:
    """Ranks 1..n with P(k) proportional to 1/k**theta; returns ``offset + k - 1``."""

    def __init__(self, n: int, theta: float, offset: int = 0):
        if n < 1 or theta < 0:
            raise SpecValidation(f"zipf needs n >= 1 and theta >= 0, got {n}, {theta}")
        self.n, self.theta, self.offset = n, theta, offset
        weights = [1.0 / (k ** theta) for k in range(1, n + 1)]
        total = sum(weights)
        acc, cdf = 0.0, []
        for w in weights:
            acc += w / total
            cdf.append(acc)
        cdf[-1] = 1.0
        self.cdf = cdf
        self.top_mass = weights[0] / total

    def draw(self, rng: random.Random) -> int:
        return self.offset + bisect.bisect_left(self.cdf, rng.random())


@dataclass
class Distribution:
    kind: str  # zipf | uniform | const | seq | text
    args: tuple = ()
    _zipf: Optional[ZipfSampler] = field(default=None, repr=False, compare=False)
    _next: int = field(default=0, repr=False, compare=False)

    @classmethod
    def parse(cls, text: str) -> "Distribution":
        parts = text.split()
        if not parts:
            raise SpecValidation("empty distribution")
        kind, raw = parts[0].lower(), parts[1:]
        try:
            if kind == "zipf":
                if len(raw) not in (2, 3):
                    raise SpecValidation("zipf N THETA [OFFSET]")
                d = cls(kind, (int(raw[0]), float(raw[1]), int(raw[2]) if len(raw) == 3 else 0))
                d._zipf = ZipfSampler(*d.args)
                return d
            if kind == "uniform":
                lo, hi = int(raw[0]), int(raw[1])
                if lo > hi or len(raw) != 2:
                    raise SpecValidation(f"uniform range {lo}..{hi}")
                return cls(kind, (lo, hi))
            if kind == "const":
                return cls(kind, (_literal(" ".join(raw)),))
            if kind == "seq":
                start = int(raw[0]) if raw else 0
                return cls(kind, (start,), _next=start)
            if kind == "text":
                return cls(kind, (int(raw[0]) if raw else 8,))
        except (IndexError, ValueError) as exc:
            if isinstance(exc, SpecValidation):
                raise
            raise SpecValidation(f"bad distribution {text!r}: {exc}") from None
        raise SpecValidation(f"unknown distribution {kind!r}")

    def draw(self, rng: random.Random, index: Optional[int] = None):
        if self.kind == "zipf":
            return self._zipf.draw(rng)
        if self.kind == "uniform":
            return rng.randint(*self.args)
        if self.kind == "const":
            return self.args[0]
        if self.kind == "seq":
            if index is not None:
                return self.args[0] + index
            v = self._next
            self._next += 1
            return v
        return "".join(rng.choice(string.ascii_lowercase) for _ in range(self.args[0]))

    def reset(self) -> None:
        if self.kind == "seq":
            self._next = self.args[0]


def _literal(text: str):
    text = text.strip()
    if text.upper() == "NULL":
        return None
    if len(text) >= 2 and text[0] == text[-1] == "'":
        return text[1:-1].replace("''", "'")
    try:
        return int(text)
    except ValueError:
        return float(text)


# ---------------------------------------------------------------------------
# spec model

@dataclass
class TableDecl:
    name: str
    create: str
    rows: int = 0
    fill: dict = field(default_factory=dict)  # column -> Distribution


@dataclass
class Template:
    name: str
    statements: list = field(default_factory=list)  # (sql, [param names])
    params: dict = field(default_factory=dict)  # name -> Distribution
    parsed: list = field(default_factory=list)

    @property
    def is_read_only(self) -> bool:
        return all(s.kind is StatementKind.SELECT for s in self.parsed)


@dataclass
class WorkloadSpec:
    name: str = "workload"
    tables: list = field(default_factory=list)
    templates: dict = field(default_factory=dict)
    mix: dict = field(default_factory=dict)
    clients: int = 8
    txns: int = 1000
    seed: int = 1
    catalog: SchemaCatalog = field(default_factory=SchemaCatalog)

    def validate(self) -> "WorkloadSpec":
        if not self.templates:
            raise SpecValidation("no templates")
        if abs(sum(self.mix.values()) - 100.0) > 1e-9:
            raise SpecValidation(f"mix sums to {sum(self.mix.values())}, not 100")
        for name in self.mix:
            if name not in self.templates:
                raise SpecValidation(f"mix names unknown template {name!r}")
        if self.clients < 1 or self.txns < 0:
            raise SpecValidation("clients must be >= 1 and txns >= 0")
        catalog = SchemaCatalog()
        for t in self.tables:
            try:
                stmt = parse(t.create, catalog)
            except ParseError as exc:
                raise SpecValidation(f"table {t.name}: {exc}") from None
            if stmt.kind is not StatementKind.CREATE_TABLE:
                raise SpecValidation(f"table {t.name}: create must be CREATE TABLE")
            catalog.add(stmt.create)
            schema = stmt.create
            for col in t.fill:
                if schema.resolve(col) is None:
                    raise SpecValidation(f"table {t.name}: fill for unknown column {col}")
            filled = {schema.resolve(c) for c in t.fill}
            if t.rows and schema.primary_key not in filled:
                raise SpecValidation(f"table {t.name}: rows need a fill for the primary key")
        self.catalog = catalog
        for tpl in self.templates.values():
            tpl.parsed = []
            for sql, names in tpl.statements:
                try:
                    stmt = parse(sql, catalog)
                except ParseError as exc:
                    raise SpecValidation(f"template {tpl.name}: {exc}") from None
                holes = sum(1 for v in stmt.all_values() if isinstance(v, Placeholder))
                if holes != len(names):
                    raise SpecValidation(f"template {tpl.name}: {holes} placeholders, "
                                         f"{len(names)} parameters in {sql!r}")
                for n in names:
                    if n not in tpl.params:
                        raise SpecValidation(f"template {tpl.name}: undefined parameter {n!r}")
                tpl.parsed.append(stmt)
        return self

    def copy(self, **changes) -> "WorkloadSpec":
        import copy
        out = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(out, k, v)
        return out.validate()


def parse_spec(text: str, name: str = "workload") -> WorkloadSpec:
    """Parse the line-oriented spec format (see ``specs/example.spec``)."""
    spec = WorkloadSpec(name=name)
    section, current = None, None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise SpecValidation(f"line {lineno}: unterminated section header")
            head = line[1:-1].split()
            section = head[0].lower()
            arg = head[1] if len(head) > 1 else None
            if section == "table":
                current = TableDecl(arg or "", "")
                spec.tables.append(current)
            elif section == "template":
                if not arg:
                    raise SpecValidation(f"line {lineno}: template needs a name")
                if arg in spec.templates:
                    raise SpecValidation(f"line {lineno}: duplicate template {arg}")
                current = Template(arg)
                spec.templates[arg] = current
            elif section in ("mix", "workload"):
                current = None
            else:
                raise SpecValidation(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise SpecValidation(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        try:
            _apply(spec, section, current, key, value)
        except SpecValidation as exc:
            raise SpecValidation(f"line {lineno}: {exc}") from None
    return spec.validate()


def _apply(spec, section, current, key, value) -> None:
    if section == "workload":
        if key == "name":
            spec.name = value
        elif key in ("clients", "txns", "seed"):
            setattr(spec, key, int(value))
        else:
            raise SpecValidation(f"unknown workload key {key!r}")
    elif section == "table":
        if key == "create":
            current.create = value
            if not current.name:
                current.name = value.split("(")[0].split()[-1]
        elif key == "rows":
            current.rows = int(value)
        elif key.startswith("fill."):
            current.fill[key[5:]] = Distribution.parse(value)
        else:
            raise SpecValidation(f"unknown table key {key!r}")
    elif section == "template":
        if key == "sql":
            sql, _, names = value.partition("|")
            params = [n.strip() for n in names.split(",") if n.strip()]
            current.statements.append((sql.strip(), params))
        elif key.startswith("param "):
            current.params[key[6:].strip()] = Distribution.parse(value)
        else:
            raise SpecValidation(f"unknown template key {key!r}")
    elif section == "mix":
        spec.mix[key] = float(value)
    else:
        raise SpecValidation("key outside a section")


BUILTIN = ("kv-read-only", "kv-read-heavy", "kv-balanced", "kv-write-heavy",
           "order-mix", "order-read-heavy", "adversarial")
ALIASES = {"kv-mix": "kv-balanced"}


def load_spec(name_or_path: str) -> WorkloadSpec:
    """A built-in spec by name or a spec file by path."""
    name = ALIASES.get(name_or_path, name_or_path)
    if name in BUILTIN:
        text = resources.files(__package__).joinpath("specs", f"{name}.spec").read_text()
        return parse_spec(text, name)
    path = Path(name_or_path)
    if not path.exists():
        raise SpecValidation(f"no built-in spec or file named {name_or_path!r}")
    return parse_spec(path.read_text(), path.stem)


# ---------------------------------------------------------------------------
# generation

@dataclass
class TxnRequest:
    """One client transaction: bound statements from one template."""

    seq: int
    template: str
    statements: list
    read_only: bool


def populate(engine: Engine, spec: WorkloadSpec) -> None:
    """Create the workload's tables and load initial rows in one transaction."""
    rng = random.Random(spec.seed ^ 0x5EED)
    for t in spec.tables:
        engine.create_table(parse(t.create, SchemaCatalog()).create)
    stmts = []
    for t in spec.tables:
        schema = engine.catalog.get(t.name)
        for i in range(t.rows):
            vals = []
            for col in schema.columns:
                dist = next((d for c, d in t.fill.items() if schema.resolve(c) == col), None)
                vals.append(dist.draw(rng, i) if dist is not None else None)
            text = ", ".join("?" for _ in vals)
            stmts.append(bind(parse(f"INSERT INTO {schema.name} VALUES ({text})", engine.catalog),
                              vals))
    if stmts:
        engine.run(stmts)


def build_engine(spec: WorkloadSpec, **kwargs) -> Engine:
    eng = Engine(**kwargs)
    populate(eng, spec)
    return eng


def generate(spec: WorkloadSpec, seed: Optional[int] = None) -> Iterator[TxnRequest]:
    """Deterministic stream of ``spec.txns`` requests."""
    spec.validate()
    rng = random.Random(spec.seed if seed is None else seed)
    for tpl in spec.templates.values():
        for d in tpl.params.values():
            d.reset()
    names = list(spec.mix)
    weights = [spec.mix[n] for n in names]
    for i in range(spec.txns):
        tpl = spec.templates[rng.choices(names, weights)[0]]
        values = {p: d.draw(rng) for p, d in tpl.params.items()}
        stmts = []
        for stmt, (_, pnames) in zip(tpl.parsed, tpl.statements):
            stmts.append(bind(stmt, [values[p] for p in pnames]))
        yield TxnRequest(i, tpl.name, stmts, tpl.is_read_only)
