"""Template-generated SQL-like pair corpus for demos, fixtures, and the
overfit acceptance checks. ~60 distinct tokens across both sides."""

from .seeding import stream

_TABLES = [f"tab{i}" for i in range(6)]
_COLUMNS = [f"col{i}" for i in range(8)]
_VALUES = [str(v) for v in (1, 2, 3, 5, 7, 9)]

_TEMPLATES = [
    (
        "SELECT {col} FROM {tab}",
        "how to select {col} from {tab}",
    ),
    (
        "SELECT {col} FROM {tab} WHERE {col2} = {val}",
        "get {col} of {tab} where {col2} equals {val}",
    ),
    (
        "DELETE FROM {tab} WHERE {col} = {val}",
        "delete rows of {tab} with {col} equal {val}",
    ),
    (
        "UPDATE {tab} SET {col} = {val}",
        "set {col} to {val} in table {tab}",
    ),
    (
        "INSERT INTO {tab} ( {col} , {col2} ) VALUES ( {val} , {val2} )",
        "insert {col} and {col2} into {tab}",
    ),
    (
        "SELECT COUNT ( * ) FROM {tab} WHERE {col} > {val}",
        "count rows of {tab} with {col} above {val}",
    ),
]


def generate_pairs(n, seed=0):
    """`n` distinct <code, query> template instantiations."""
    rng = stream(seed, "toydata")
    seen = set()
    pairs = []
    while len(pairs) < n:
        code_tpl, query_tpl = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
        fills = {
            "tab": _TABLES[int(rng.integers(len(_TABLES)))],
            "col": _COLUMNS[int(rng.integers(len(_COLUMNS)))],
            "col2": _COLUMNS[int(rng.integers(len(_COLUMNS)))],
            "val": _VALUES[int(rng.integers(len(_VALUES)))],
            "val2": _VALUES[int(rng.integers(len(_VALUES)))],
        }
        code = code_tpl.format(**fills)
        if code in seen:
            continue
        seen.add(code)
        pairs.append({"code": code, "query": query_tpl.format(**fills)})
    return pairs
