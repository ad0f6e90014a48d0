"""Structured report templates.

A template is a JSON document describing the sentences a report may contain.
Sentences are organised in groups. A group is either a ``literal_group`` (a
list of verbatim sentences) or a ``product_group`` (every attribute joined to
every location by ``"in the"``, optionally restricted to an observed subset of
pairs). Exclusive groups contribute exactly one sentence to a report; the
remaining groups contribute every sentence predicted positive.

Template file layout::

    {
      "version": "1",
      "attributes": ["consolidation", ...],       # product vocabulary
      "locations": ["left lung", ...],
      "groups": [
        {"id": "cardiomegaly", "kind": "literal_group", "exclusive": true,
         "prompts": ["The heart is normal in size.", ...]},
        {"id": "consolidation", "kind": "product_group", "exclusive": false,
         "attributes": ["consolidation"],          # optional subset
         "locations": ["left lung", ...],          # optional subset
         "pairs": [["consolidation", "left lung"], ...],   # optional restriction
         "negative_sentence": "No consolidation."}
      ]
    }

Class indices are assigned in document order: groups in the order listed,
prompts inside a literal group in list order, and product prompts in ``pairs``
order when given, otherwise attribute-major over the group's attributes and
locations.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import TemplateError

PRODUCT = "product_group"
LITERAL = "literal_group"
JOINER = "in the"

_GROUP_KEYS = {"id", "kind", "exclusive", "prompts", "pairs", "observed_pairs",
               "attributes", "locations", "negative_sentence"}
_TOP_KEYS = {"version", "attributes", "locations", "groups"}
_PAIR_RE = re.compile(r'\[\s*("(?:[^"\\]|\\.)*"),\s*("(?:[^"\\]|\\.)*")\s*\]')


def product_sentence(attribute: str, location: str) -> str:
    return f"{attribute} {JOINER} {location}"


@dataclass(frozen=True)
class TemplateNode:
    node_id: str
    kind: str
    prompts: tuple[tuple[int, str], ...]
    exclusive: bool
    negative_sentence: str | None = None
    # (attribute, location) per prompt; empty for literal groups
    pairs: tuple[tuple[str, str], ...] = ()

    @property
    def class_indices(self) -> list[int]:
        return [i for i, _ in self.prompts]


@dataclass(frozen=True)
class TemplateTree:
    nodes: tuple[TemplateNode, ...]
    attributes: tuple[str, ...] = ()
    locations: tuple[str, ...] = ()
    version: str = "1"

    @property
    def num_classes(self) -> int:
        return sum(len(n.prompts) for n in self.nodes)

    def node(self, node_id: str) -> TemplateNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def exclusive_groups(self) -> list[list[int]]:
        return [n.class_indices for n in self.nodes if n.exclusive]

    def non_exclusive_indices(self) -> list[int]:
        return [i for n in self.nodes if not n.exclusive for i in n.class_indices]

    def pair_index(self) -> dict[tuple[str, str], int]:
        """Map each (attribute, location) pair of the product groups to its class."""
        out = {}
        for n in self.nodes:
            for (i, _), pair in zip(n.prompts, n.pairs):
                out[pair] = i
        return out

    def pathology_grouping(self) -> dict[str, list[int]]:
        """Class indices of every location of each attribute, in attribute order."""
        grouping: dict[str, list[int]] = {}
        for (attribute, _), idx in sorted(self.pair_index().items(), key=lambda kv: kv[1]):
            grouping.setdefault(attribute, []).append(idx)
        order = {a: k for k, a in enumerate(self.attributes)}
        return dict(sorted(grouping.items(), key=lambda kv: order.get(kv[0], len(order))))


@dataclass(frozen=True)
class PromptSet:
    sentences: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def __getitem__(self, i: int) -> str:
        return self.sentences[i]

    def index(self, sentence: str) -> int:
        return self.sentences.index(sentence)


@dataclass(frozen=True)
class DecisionConfig:
    threshold: float = 0.0
    gamma: float = 50.0


@dataclass
class ReportLine:
    node_id: str
    text: str
    class_index: int | None
    similarity: float | None
    probability: float | None
    note: str = ""


@dataclass
class StructuredReport:
    lines: list[ReportLine] = field(default_factory=list)

    @property
    def sentences(self) -> list[str]:
        return [line.text for line in self.lines]

    def to_text(self) -> str:
        return "".join(line.text + "\n" for line in self.lines)

    def provenance(self) -> dict[str, Any]:
        return {"lines": [
            {"node_id": line.node_id, "text": line.text, "class_index": line.class_index,
             "similarity": line.similarity, "probability": line.probability,
             "note": line.note}
            for line in self.lines
        ]}


# -- parsing -----------------------------------------------------------------

def _fail(path: str, msg: str) -> TemplateError:
    return TemplateError(f"{path}: {msg}")


def _str_list(value: Any, path: str, allow_empty: bool = True) -> list[str]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise _fail(path, "expected a list of strings")
    if not allow_empty and not value:
        raise _fail(path, "must not be empty")
    for k, v in enumerate(value):
        if not v.strip():
            raise _fail(f"{path}[{k}]", "empty string")
    return list(value)


def _subset(values: list[str], universe: Sequence[str], path: str) -> None:
    allowed = set(universe)
    for k, v in enumerate(values):
        if v not in allowed:
            raise _fail(f"{path}[{k}]", f"{v!r} is not declared at the top level")


def parse_template(config_text: str) -> TemplateTree:
    """Parse and validate a template document.

    Raises TemplateError naming the offending line (syntax errors) or the
    offending field path (schema and validation errors).
    """
    try:
        doc = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise TemplateError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise _fail("<root>", "expected a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise _fail("<root>", f"unknown keys {sorted(unknown)}")

    version = doc.get("version", "1")
    if not isinstance(version, str):
        raise _fail("version", "expected a string")
    attributes = _str_list(doc.get("attributes", []), "attributes")
    locations = _str_list(doc.get("locations", []), "locations")
    for name, values in (("attributes", attributes), ("locations", locations)):
        if len(set(values)) != len(values):
            raise _fail(name, "duplicate entries")

    groups = doc.get("groups")
    if not isinstance(groups, list):
        raise _fail("groups", "expected a list")
    if not groups:
        raise _fail("groups", "template has no groups")

    nodes: list[TemplateNode] = []
    next_index = 0
    for g, group in enumerate(groups):
        path = f"groups[{g}]"
        if not isinstance(group, dict):
            raise _fail(path, "expected an object")
        unknown = set(group) - _GROUP_KEYS
        if unknown:
            raise _fail(path, f"unknown keys {sorted(unknown)}")
        node_id = group.get("id")
        if not isinstance(node_id, str) or not node_id:
            raise _fail(f"{path}.id", "expected a non-empty string")
        kind = group.get("kind")
        if kind not in (PRODUCT, LITERAL):
            raise _fail(f"{path}.kind", f"expected {PRODUCT!r} or {LITERAL!r}, got {kind!r}")
        exclusive = group.get("exclusive", False)
        if not isinstance(exclusive, bool):
            raise _fail(f"{path}.exclusive", "expected a boolean")
        negative = group.get("negative_sentence")
        if negative is not None and (not isinstance(negative, str) or not negative.strip()):
            raise _fail(f"{path}.negative_sentence", "expected a non-empty string")

        pairs: list[tuple[str, str]] = []
        if kind == LITERAL:
            for key in ("pairs", "observed_pairs", "attributes", "locations"):
                if key in group:
                    raise _fail(f"{path}.{key}", "not allowed in a literal_group")
            sentences = _str_list(group.get("prompts"), f"{path}.prompts", allow_empty=False)
        else:
            if "prompts" in group:
                raise _fail(f"{path}.prompts", "not allowed in a product_group")
            g_attrs = _str_list(group.get("attributes", attributes), f"{path}.attributes")
            g_locs = _str_list(group.get("locations", locations), f"{path}.locations")
            _subset(g_attrs, attributes, f"{path}.attributes")
            _subset(g_locs, locations, f"{path}.locations")
            if "pairs" in group and "observed_pairs" in group:
                raise _fail(path, "give either 'pairs' or 'observed_pairs', not both")
            raw_pairs = group.get("pairs", group.get("observed_pairs"))
            if raw_pairs is None:
                pairs = [(a, loc) for a in g_attrs for loc in g_locs]
            else:
                pkey = "pairs" if "pairs" in group else "observed_pairs"
                if not isinstance(raw_pairs, list):
                    raise _fail(f"{path}.{pkey}", "expected a list of [attribute, location]")
                a_set, l_set = set(g_attrs), set(g_locs)
                for k, p in enumerate(raw_pairs):
                    ppath = f"{path}.{pkey}[{k}]"
                    if (not isinstance(p, list) or len(p) != 2
                            or not all(isinstance(x, str) for x in p)):
                        raise _fail(ppath, "expected [attribute, location]")
                    if p[0] not in a_set:
                        raise _fail(ppath, f"attribute {p[0]!r} not available to this group")
                    if p[1] not in l_set:
                        raise _fail(ppath, f"location {p[1]!r} not available to this group")
                    pairs.append((p[0], p[1]))
                if len(set(pairs)) != len(pairs):
                    raise _fail(f"{path}.{pkey}", "duplicate pairs")
            if not pairs:
                raise _fail(path, "product group expands to no prompts")
            sentences = [product_sentence(a, loc) for a, loc in pairs]

        if exclusive and len(sentences) < 2:
            raise _fail(path, "an exclusive group needs at least 2 prompts")
        prompts = tuple((next_index + k, s) for k, s in enumerate(sentences))
        next_index += len(sentences)
        nodes.append(TemplateNode(node_id, kind, prompts, exclusive, negative, tuple(pairs)))

    tree = TemplateTree(tuple(nodes), tuple(attributes), tuple(locations), version)
    validate_tree(tree)
    return tree


def validate_tree(tree: TemplateTree) -> None:
    if not tree.nodes:
        raise TemplateError("groups: template has no groups")
    ids = [n.node_id for n in tree.nodes]
    dup_ids = sorted({i for i in ids if ids.count(i) > 1})
    if dup_ids:
        raise TemplateError(f"groups: duplicate group id(s) {dup_ids}")
    seen: dict[str, str] = {}
    indices = []
    for n in tree.nodes:
        if n.exclusive and len(n.prompts) < 2:
            raise TemplateError(f"group {n.node_id!r}: an exclusive group needs at least 2 prompts")
        if not n.prompts:
            raise TemplateError(f"group {n.node_id!r}: no prompts")
        for i, s in n.prompts:
            if not s.strip():
                raise TemplateError(f"group {n.node_id!r}: empty sentence")
            if s in seen:
                raise TemplateError(
                    f"group {n.node_id!r}: duplicate sentence {s!r} (also in {seen[s]!r})")
            seen[s] = n.node_id
            indices.append(i)
    if sorted(indices) != list(range(len(indices))):
        raise TemplateError("class indices are not a permutation of 0..C-1")


def serialize_template(tree: TemplateTree) -> str:
    """Inverse of parse_template; product groups are written with explicit pairs."""
    groups = []
    for n in tree.nodes:
        g: dict[str, Any] = {"id": n.node_id, "kind": n.kind, "exclusive": n.exclusive}
        if n.kind == LITERAL:
            g["prompts"] = [s for _, s in n.prompts]
        else:
            g["pairs"] = [list(p) for p in n.pairs]
        if n.negative_sentence is not None:
            g["negative_sentence"] = n.negative_sentence
        groups.append(g)
    doc = {"version": tree.version, "attributes": list(tree.attributes),
           "locations": list(tree.locations), "groups": groups}
    text = json.dumps(doc, indent=2, ensure_ascii=False)
    # one [attribute, location] pair per line
    text = _PAIR_RE.sub(lambda m: f"[{m.group(1)}, {m.group(2)}]", text)
    return text + "\n"


def load_template(path: str | Path) -> TemplateTree:
    return parse_template(Path(path).read_text(encoding="utf-8"))


def bundled_template(name: str) -> TemplateTree:
    """Load one of the templates shipped in ``fsrg/templates`` (e.g. ``"cardiomegaly"``)."""
    fname = name if name.endswith(".json") else f"{name}.json"
    text = resources.files("fsrg").joinpath("templates").joinpath(fname).read_text(encoding="utf-8")
    return parse_template(text)


def expand_prompts(tree: TemplateTree) -> PromptSet:
    by_index = sorted((i, s) for n in tree.nodes for i, s in n.prompts)
    return PromptSet(tuple(s for _, s in by_index))


# -- rendering ---------------------------------------------------------------

def _group_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    e = np.exp(z)
    return e / e.sum()


def render_report(tree: TemplateTree, scores: Sequence[float],
                  decision: DecisionConfig | None = None) -> StructuredReport:
    """Turn a similarity vector into report lines.

    Exclusive groups pick the most probable sentence (softmax of gamma * s
    inside the group); ties go to the lowest class index and are noted in the
    provenance. Other groups keep every sentence with s > threshold, or fall
    back to the group's negative sentence, or are left out.
    """
    decision = decision or DecisionConfig()
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] != tree.num_classes:
        raise ValueError(f"expected {tree.num_classes} scores, got shape {s.shape}")
    report = StructuredReport()
    for node in tree.nodes:
        idx = np.array(node.class_indices)
        if node.exclusive:
            logits = decision.gamma * s[idx]
            probs = _group_softmax(logits)
            best = int(np.argmax(logits))
            tied = int(np.sum(logits == logits[best]))
            note = f"tie among {tied} prompts, lowest index chosen" if tied > 1 else ""
            ci, text = node.prompts[best]
            report.lines.append(ReportLine(node.node_id, text, ci, float(s[ci]),
                                           float(probs[best]), note))
            continue
        chosen = [(ci, text) for ci, text in node.prompts if s[ci] > decision.threshold]
        for ci, text in chosen:
            prob = 0.5 * (1.0 + math.tanh(0.5 * decision.gamma * s[ci]))
            report.lines.append(ReportLine(node.node_id, text, ci, float(s[ci]), prob))
        if not chosen and node.negative_sentence is not None:
            report.lines.append(ReportLine(node.node_id, node.negative_sentence, None, None, None,
                                           "no prompt above threshold"))
    return report
