import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsrg.errors import TemplateError
from fsrg.templates import (DecisionConfig, bundled_template, expand_prompts, parse_template,
                            render_report, serialize_template)

SEVERITY = [
    "The heart is normal in size.",
    "The heart is top normal in size.",
    "There is mild cardiomegaly.",
    "There is moderate cardiomegaly.",
    "There is severe cardiomegaly.",
    "There is marked cardiomegaly.",
]


def _doc(**groups_and_top):
    return json.dumps(groups_and_top)


@pytest.fixture
def severity_tree():
    return bundled_template("cardiomegaly")


@pytest.fixture
def imagenome_like_tree():
    full = bundled_template("localization_full")
    rng = np.random.default_rng(3)
    universe = [(a, loc) for a in full.attributes for loc in full.locations]
    keep = sorted(rng.choice(len(universe), size=98, replace=False))
    pairs = [list(universe[i]) for i in keep]
    doc = {"version": "1", "attributes": list(full.attributes), "locations": list(full.locations),
           "groups": [{"id": "findings", "kind": "product_group", "pairs": pairs}]}
    return parse_template(json.dumps(doc))


def test_cardiomegaly_template(severity_tree):
    assert severity_tree.num_classes == 6
    assert len(severity_tree.nodes) == 1
    assert severity_tree.nodes[0].exclusive
    assert list(expand_prompts(severity_tree)) == SEVERITY


def test_observed_pairs_restrict_product(imagenome_like_tree):
    tree = imagenome_like_tree
    assert len(tree.attributes) == 9 and len(tree.locations) == 19
    assert tree.num_classes == 98


def test_full_product_is_attribute_major():
    tree = bundled_template("localization_full")
    prompts = expand_prompts(tree)
    assert len(prompts) == 9 * 19
    assert prompts[0] == "lung opacity in the right lung"
    assert prompts[19] == "pleural effusion in the right lung"


def test_product_prompt_joins_with_in_the():
    doc = _doc(attributes=["consolidation"], locations=["left lung"],
               groups=[{"id": "c", "kind": "product_group"}])
    prompts = expand_prompts(parse_template(doc))
    assert list(prompts) == ["consolidation in the left lung"]


def test_literal_prompt_is_verbatim():
    doc = _doc(groups=[{"id": "x", "kind": "literal_group", "prompts": ["There is mild cardiomegaly."]}])
    assert expand_prompts(parse_template(doc))[0].encode() == b"There is mild cardiomegaly."


def test_indices_follow_document_order():
    doc = _doc(attributes=["a", "b"], locations=["x", "y"], groups=[
        {"id": "lit", "kind": "literal_group", "prompts": ["one.", "two."], "exclusive": True},
        {"id": "prod", "kind": "product_group", "pairs": [["b", "y"], ["a", "x"]]},
    ])
    tree = parse_template(doc)
    assert list(expand_prompts(tree)) == ["one.", "two.", "b in the y", "a in the x"]
    assert tree.pair_index() == {("b", "y"): 2, ("a", "x"): 3}
    assert tree.pathology_grouping() == {"a": [3], "b": [2]}


@pytest.mark.parametrize("doc, fragment", [
    (_doc(groups=[]), "groups"),
    (_doc(), "groups"),
    ('{"groups": [\n  {"id": "x",,}\n]}', "line 2"),
    (_doc(groups=[{"id": "x", "kind": "tree"}]), "groups[0].kind"),
    (_doc(groups=[{"id": "x", "kind": "literal_group", "prompts": ["a."], "exclusive": True}]),
     "at least 2"),
    (_doc(groups=[{"id": "x", "kind": "literal_group", "prompts": []}]), "groups[0].prompts"),
    (_doc(groups=[{"id": "x", "kind": "literal_group", "prompts": ["a.", "a."]}]), "duplicate sentence"),
    (_doc(groups=[{"id": "x", "kind": "literal_group", "prompts": ["a."]},
                  {"id": "y", "kind": "literal_group", "prompts": ["a."]}]), "duplicate sentence"),
    (_doc(groups=[{"id": "x", "kind": "literal_group", "prompts": ["a."]},
                  {"id": "x", "kind": "literal_group", "prompts": ["b."]}]), "duplicate group id"),
    (_doc(attributes=["a"], locations=["l"],
          groups=[{"id": "x", "kind": "product_group", "pairs": [["a", "nowhere"]]}]),
     "groups[0].pairs[0]"),
    (_doc(groups=[{"id": "x", "kind": "literal_group", "prompts": ["a."], "colour": 1}]), "unknown keys"),
])
def test_parse_errors(doc, fragment):
    with pytest.raises(TemplateError, match=fragment.replace("[", r"\[").replace("]", r"\]")):
        parse_template(doc)


@pytest.mark.parametrize("name", ["cardiomegaly", "synthetic_localization", "localization_full"])
def test_round_trip(name):
    tree = bundled_template(name)
    again = parse_template(serialize_template(tree))
    assert [s.encode() for s in expand_prompts(again)] == [s.encode() for s in expand_prompts(tree)]
    assert again == parse_template(serialize_template(again))


def test_round_trip_imagenome_like(imagenome_like_tree):
    again = parse_template(serialize_template(imagenome_like_tree))
    assert expand_prompts(again) == expand_prompts(imagenome_like_tree)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=4, unique=True),
       st.lists(st.sampled_from(["w", "x", "y", "z"]), min_size=1, max_size=4, unique=True),
       st.integers(0, 5))
def test_expansion_size_and_permutation(attrs, locs, n_literal):
    groups = [{"id": "p", "kind": "product_group"}]
    if n_literal:
        groups.append({"id": "l", "kind": "literal_group",
                       "prompts": [f"sentence {k}." for k in range(n_literal)]})
    tree = parse_template(_doc(attributes=attrs, locations=locs, groups=groups))
    prompts = expand_prompts(tree)
    assert len(prompts) == len(attrs) * len(locs) + n_literal
    indices = sorted(i for n in tree.nodes for i, _ in n.prompts)
    assert indices == list(range(len(prompts)))


# -- render_report -----------------------------------------------------------

def test_render_unique_argmax(severity_tree):
    report = render_report(severity_tree, [0.1, 0.2, 0.9, 0.3, 0.1, 0.0])
    assert report.sentences == ["There is mild cardiomegaly."]
    assert report.lines[0].class_index == 2


def test_render_tie_breaks_low_and_is_recorded(severity_tree):
    report = render_report(severity_tree, [0.3] * 6)
    assert report.lines[0].class_index == 0
    assert "tie" in report.provenance()["lines"][0]["note"]
    assert report.lines[0].probability == pytest.approx(1 / 6)


def _two_finding_tree(negative=None):
    g = {"id": "c", "kind": "product_group"}
    if negative:
        g["negative_sentence"] = negative
    return parse_template(_doc(attributes=["consolidation"], locations=["left lung", "right lung"],
                               groups=[g]))


def test_render_threshold_rule_matches_enumeration():
    tree = _two_finding_tree("No consolidation.")
    prompts = list(expand_prompts(tree))
    grid = [-0.5, -0.2, 0.0, 0.4, 0.7]
    # brute-force decision table: every score pair, every threshold on the grid
    for s0, s1, thr in itertools.product(grid, grid, [-0.3, 0.0, 0.5]):
        expected = [p for p, s in zip(prompts, (s0, s1)) if s > thr] or ["No consolidation."]
        got = render_report(tree, [s0, s1], DecisionConfig(threshold=thr)).sentences
        assert got == expected, (s0, s1, thr)
    assert render_report(tree, [0.4, -0.2]).sentences == ["consolidation in the left lung"]


def test_render_omits_group_without_negative_sentence():
    tree = _two_finding_tree()
    assert render_report(tree, [-0.1, -0.4]).lines == []


def test_render_length_mismatch(severity_tree):
    with pytest.raises(ValueError):
        render_report(severity_tree, [0.1] * 5)


def test_render_text_and_sidecar(severity_tree):
    report = render_report(severity_tree, [0, 0, 0, 0, 1, 0])
    assert report.to_text() == "There is severe cardiomegaly.\n"
    json.dumps(report.provenance())


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6), st.floats(-5, 5))
def test_exclusive_choice_is_shift_invariant(scores, shift):
    tree = bundled_template("cardiomegaly")
    s = np.array(scores)
    gaps = np.abs(s[:, None] - s[None, :])[~np.eye(6, dtype=bool)]
    if gaps.min() < 1e-9:
        return
    a = render_report(tree, s).lines[0].class_index
    b = render_report(tree, s + shift).lines[0].class_index
    assert a == b


def test_exactly_one_sentence_per_exclusive_group_fuzz():
    doc = _doc(attributes=["a"], locations=["x", "y"], groups=[
        {"id": "sev", "kind": "literal_group", "exclusive": True, "prompts": SEVERITY},
        {"id": "grade", "kind": "literal_group", "exclusive": True, "prompts": ["low.", "high."]},
        {"id": "p", "kind": "product_group", "negative_sentence": "No a."},
    ])
    tree = parse_template(doc)
    rng = np.random.default_rng(0)
    for _ in range(2000):
        report = render_report(tree, rng.uniform(-1, 1, tree.num_classes))
        ids = [line.node_id for line in report.lines]
        assert ids.count("sev") == 1 and ids.count("grade") == 1
        assert ids.count("p") >= 1
