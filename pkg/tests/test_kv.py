import pytest

from gridmesh.kv import KvDocument, KvFormatError, apply_env_overrides, parse_kv


def test_parse_header_and_entries():
    doc = parse_kv("gridmesh/model v1\nname = demo\nnode = 1\nnode = 2\n")
    assert doc.doctype == "model"
    assert doc.version == 1
    assert doc.get("name") == "demo"
    assert doc.get_all("node") == ["1", "2"]


def test_comments_and_blank_lines():
    doc = parse_kv("# leading comment\n\ngridmesh/pmu v1\nidcode = 3 # trailing\n")
    assert doc.doctype == "pmu"
    assert doc.get("idcode") == "3"


def test_missing_header_rejected():
    with pytest.raises(KvFormatError):
        parse_kv("name = demo\n")


def test_doctype_mismatch_rejected():
    with pytest.raises(KvFormatError, match="expected a gridmesh/model"):
        parse_kv("gridmesh/scenario v1\n", expect_doctype="model")


def test_bad_line_names_position():
    with pytest.raises(KvFormatError, match="line 2"):
        parse_kv("gridmesh/model v1\nnot-a-pair\n")


def test_typed_accessors_name_offending_key():
    doc = parse_kv("gridmesh/model v1\nx = abc\n")
    with pytest.raises(KvFormatError, match="'x'"):
        doc.get_float("x")
    with pytest.raises(KvFormatError, match="'missing'"):
        doc.require("missing")


def test_dump_round_trip():
    doc = KvDocument("scenario", 1)
    doc.add("duration_s", "30")
    doc.add("event", "20.9 77 -0.3 -0.15")
    again = parse_kv(doc.dump())
    assert again.entries == doc.entries
    assert again.doctype == "scenario"


def test_env_override_replaces_scalar():
    doc = parse_kv("gridmesh/vo v1\nendpoint = http://a/report\nvo_id = vo-1\n")
    out = apply_env_overrides(
        doc, environ={"GRIDMESH_VO_ENDPOINT": "http://b/report"}
    )
    assert out.get("endpoint") == "http://b/report"
    assert out.get("vo_id") == "vo-1"
    # original untouched
    assert doc.get("endpoint") == "http://a/report"
