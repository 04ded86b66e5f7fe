import json
import unicodedata

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lifetraj.extraction import Category, EntitySpan
from lifetraj.ingest import (
    BiographyPage,
    Sentence,
    collapse_ws,
    filter_target_sentences,
    load_corpus,
    segment_sentences,
    split_paragraph,
    tokenize,
)

from conftest import MINI


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def page_line(pid, title="T", paragraphs=("x.",)):
    return json.dumps({"page_id": pid, "title": title, "paragraphs": list(paragraphs)})


def test_single_valid_line(tmp_path):
    errors = []
    pages = list(load_corpus(write_lines(tmp_path / "c.jsonl", [page_line("a")]), errors))
    assert len(pages) == 1 and errors == []


def test_malformed_line_reported_with_line_number(tmp_path):
    path = write_lines(tmp_path / "c.jsonl", [page_line("a"), "{not json"])
    errors = []
    pages = list(load_corpus(path, errors))
    assert [p.page_id for p in pages] == ["a"]
    assert len(errors) == 1 and errors[0].line == 2


@pytest.mark.parametrize("bad", [
    json.dumps({"page_id": "x", "title": "t"}),
    json.dumps({"page_id": 3, "title": "t", "paragraphs": []}),
    json.dumps({"page_id": "x", "title": "t", "paragraphs": [1]}),
    json.dumps(["list"]),
])
def test_schema_violations_are_record_errors(tmp_path, bad):
    errors = []
    assert list(load_corpus(write_lines(tmp_path / "c.jsonl", [bad]), errors)) == []
    assert len(errors) == 1


def test_duplicate_page_id_is_an_error(tmp_path):
    path = write_lines(tmp_path / "c.jsonl", [page_line("a"), page_line("a")])
    errors = []
    assert len(list(load_corpus(path, errors))) == 1
    assert "duplicate" in errors[0].message


def test_missing_file_is_fatal(tmp_path):
    with pytest.raises(FileNotFoundError):
        list(load_corpus(tmp_path / "nope.jsonl"))


def test_fixture_pages_in_file_order():
    expected = [json.loads(l)["page_id"] for l in (MINI / "corpus.jsonl").read_text().splitlines()]
    assert [p.page_id for p in load_corpus(MINI / "corpus.jsonl")] == expected
    assert expected == ["p001", "p002", "p003", "p004", "p005"]


def test_nfc_applied_at_load(tmp_path):
    decomposed = unicodedata.normalize("NFD", "Bibliothèque")
    path = write_lines(tmp_path / "c.jsonl", [page_line("a", paragraphs=[decomposed + "."])])
    (page,) = load_corpus(path)
    assert page.paragraphs[0] == "Bibliothèque."


def test_two_sentences():
    assert split_paragraph("He was born in 1900. He died in 1970.") == [
        "He was born in 1900.", "He died in 1970."]


def test_empty_paragraph():
    assert split_paragraph("") == []
    page = BiographyPage("p", "t", ("",))
    assert segment_sentences(page) == []


@pytest.mark.parametrize("text", [
    "Dr. Smith moved.",
    "She met H. G. Wells in London.",
    "He joined St. Andrew's College in 1920.",
])
def test_abbreviations_and_initials_do_not_split(text):
    assert split_paragraph(text) == [text]


def test_question_exclamation_and_quotes():
    text = 'Why Paris? She never said! "It was home." Then she left.'
    assert split_paragraph(text) == ["Why Paris?", "She never said!", '"It was home."', "Then she left."]


def test_lowercase_after_period_does_not_split():
    assert len(split_paragraph("The value was approx. three times higher in 1950.")) == 1


def test_segment_indices_dense_and_zero_based():
    page = BiographyPage("p", "t", ("A b. C d.", "E f."))
    sents = segment_sentences(page)
    assert [(s.paragraph_index, s.sentence_index) for s in sents] == [(0, 0), (0, 1), (1, 0)]
    assert sents[1].tokens == ("C", "d", ".")


def test_fixture_segmentation_matches_annotation_tokens():
    ann = {}
    for line in (MINI / "annotations.jsonl").read_text().splitlines():
        obj = json.loads(line)
        ann[(obj["page_id"], obj["paragraph_index"], obj["sentence_index"])] = obj["tokens"]
    sents = [s for p in load_corpus(MINI / "corpus.jsonl") for s in segment_sentences(p)]
    assert len(sents) == len(ann) == 59
    for s in sents:
        assert list(s.tokens) == ann[s.key]


prose = st.lists(
    st.sampled_from(["He", "moved", "to", "Paris", "in", "1920", "Dr.", "St.", "U.S.", "etc.", ",", ".", "!", "?", "Smith", "the"]),
    max_size=40,
).map(" ".join)


@settings(max_examples=200, deadline=None)
@given(prose)
def test_segmentation_is_a_partition(text):
    pieces = split_paragraph(text)
    assert collapse_ws(" ".join(pieces)) == collapse_ws(text)
    assert all(p.strip() == p and p for p in pieces)


@settings(max_examples=100, deadline=None)
@given(prose)
def test_tokens_reconstruct_text_modulo_whitespace(text):
    assert "".join(tokenize(text)) == "".join(text.split())


def spans(*cats):
    return [EntitySpan(c, i, i + 1, "x") for i, c in enumerate(cats)]


def test_filter_keeps_time_and_location():
    s = [Sentence("p", 0, i, f"s{i}", ()) for i in range(3)]
    ann = [
        spans(Category.TIME, Category.LOCATION, Category.PERSON),
        spans(Category.TIME),
        spans(Category.LOCATION, Category.VERB),
    ]
    assert filter_target_sentences(s, ann) == [s[0]]


def test_filter_missing_annotations_mean_no_entities():
    s = [Sentence("p", 0, i, f"s{i}", ()) for i in range(2)]
    keyed = {s[1].key: spans(Category.TIME, Category.LOCATION)}
    assert filter_target_sentences(s, keyed) == [s[1]]
    assert filter_target_sentences(s, []) == []


def test_filter_matches_brute_force_on_ten_sentences():
    import random

    rng = random.Random(7)
    cats = list(Category)
    sents = [Sentence("p", 0, i, f"s{i}", ()) for i in range(10)]
    ann = [spans(*rng.choices(cats, k=rng.randint(0, 4))) for _ in sents]
    expected = []
    for s, a in zip(sents, ann):
        has_t = any(sp.category == Category.TIME for sp in a)
        has_l = any(sp.category == Category.LOCATION for sp in a)
        if has_t and has_l:
            expected.append(s)
    kept = filter_target_sentences(sents, ann)
    assert kept == expected
    again = filter_target_sentences(kept, [ann[s.sentence_index] for s in kept])
    assert again == kept


def test_two_loads_identical():
    a = [s.to_json() for p in load_corpus(MINI / "corpus.jsonl") for s in segment_sentences(p)]
    b = [s.to_json() for p in load_corpus(MINI / "corpus.jsonl") for s in segment_sentences(p)]
    assert json.dumps(a) == json.dumps(b)


def test_sentence_json_round_trip():
    s = Sentence("p", 1, 2, "He left.", ("He", "left", "."))
    assert Sentence.from_json(s.to_json()) == s
